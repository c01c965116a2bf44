import json

import pytest

from budgetalloc.cli import main


def run(args, capsys):
    code = main(args)
    return code, capsys.readouterr()


class TestEnvCommands:
    def test_gen_validate(self, tmp_path, capsys):
        path = tmp_path / "env.json"
        assert run(["env", "gen", "--seed", "2", "--out", str(path)], capsys)[0] == 0
        code, out = run(["env", "validate", str(path)], capsys)
        assert code == 0 and "ok (6 periods" in out.out

    def test_gen_stdout(self, capsys):
        code, out = run(["env", "gen", "--periods", "3"], capsys)
        assert code == 0 and json.loads(out.out)["periods"] == 3

    def test_save_tabulated(self, tmp_path, capsys):
        path = tmp_path / "t.json"
        assert run(["env", "save", "--seed", "1", "--points", "31", "--out", str(path)], capsys)[0] == 0
        obj = json.loads(path.read_text())
        assert all(c["kind"] == "table" and len(c["points"]) == 31 for c in obj["curves"])

    def test_validate_bad(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"budget": 6, "periods": 1, "curves": [{"kind": "poly", "coeffs": [1, -0.1]}]}')
        code, out = run(["env", "validate", str(path)], capsys)
        assert code == 2 and "T >= 2" in out.err


class TestSolve:
    def test_solve(self, capsys):
        code, out = run(["solve", "--seed", "0", "--periods", "3"], capsys)
        assert code == 0 and "oracle allocation" in out.out and "brute variance" in out.out


class TestRun:
    def test_run_and_report(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"repeats": 2}))
        out_dir = tmp_path / "out"
        assert run(["run", "--config", str(cfg), "--out", str(out_dir)], capsys)[0] == 0
        code, out = run(["report", str(out_dir)], capsys)
        assert code == 0 and "stored summary matches" in out.out

    def test_conflict_exit_code(self, tmp_path, capsys):
        out_dir = str(tmp_path / "out")
        for seed in (0, 1):
            (tmp_path / f"c{seed}.json").write_text(json.dumps({"repeats": 1, "seed": seed}))
        assert run(["run", "--config", str(tmp_path / "c0.json"), "--out", out_dir], capsys)[0] == 0
        code, out = run(["run", "--config", str(tmp_path / "c1.json"), "--out", out_dir], capsys)
        assert code == 2 and "--overwrite" in out.err

    def test_train(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"iterations": 12, "batch_prompts": 2}))
        code, out = run(["train", "--config", str(cfg), "--out", str(tmp_path / "t"), "--seed", "4"], capsys)
        assert code == 0 and (tmp_path / "t" / "policy.json").exists()
        assert len((tmp_path / "t" / "train_log.csv").read_text().splitlines()) == 13

    def test_sweep_refresh_flags_none_arm(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"iterations": 10, "batch_prompts": 1, "refresh_period": 5}))
        code, out = run(["sweep", "refresh", "--config", str(cfg), "--out", str(tmp_path / "s"),
                         "--m", "5", "none", "--seeds", "0", "--beta0"], capsys)
        assert code == 0 and "static" in out.out and "beta=0" in out.out

    def test_bad_refresh_value(self, capsys):
        with pytest.raises(SystemExit):
            main(["sweep", "refresh", "--m", "zero"])
