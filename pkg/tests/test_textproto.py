import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetalloc.agents import FewShotSet, HeuristicOptimizer, run_dual_phase
from budgetalloc.envmodel import EnvMeta, EpisodeRecord, GenSpec, env_evaluate, env_generate
from budgetalloc.errors import ConfigError, TransportError
from budgetalloc.textproto import (
    OPTIMIZER,
    REASONER,
    CompletionClient,
    CompletionEndpoint,
    LlmAgent,
    ParseFailure,
    format_answer,
    llm_agent_act,
    parse_answer,
    render_prompt,
)

SAMPLE_RESPONSE = """<reason>
Looking at the historical data, periods 3 and 5 look weak and periods 4 and 6 look strong.
I will move budget accordingly while keeping the total at 6.
</reason>
<answer>
[0.93, 1.18, 0.77, 1.19, 0.75, 1.18]
</answer>"""


def history():
    return [
        EpisodeRecord(np.array([1.0, 1, 1, 1, 1, 1]), np.array([0.1, 0.2, 0.0, 0.25, 0.0, 0.3])),
        EpisodeRecord(np.array([0.5, 1.5, 1, 1, 1, 1]), np.array([0.12, 0.07, 0.0, 0.27, 0.0, 0.49])),
    ]


class TestRender:
    def test_reasoner(self):
        text = render_prompt(REASONER, 6, 6.0, history())
        assert "across 6 time periods" in text
        assert "total budget of 6 " in text
        assert text.endswith("<reason>")
        assert "{" not in text

    def test_optimizer(self):
        text = render_prompt(OPTIMIZER, 6, 6.0, history())
        assert "equalize the reward across all periods" in text
        assert text.endswith("<reason>")
        assert "[y1, y2, ..., y6]" in text

    def test_history_lines(self):
        text = render_prompt(OPTIMIZER, 6, 6.0, history())
        assert "Round 1: allocation=[1.0000, 1.0000, 1.0000, 1.0000, 1.0000, 1.0000], " \
               "rewards=[0.1000, 0.2000, 0.0000, 0.2500, 0.0000, 0.3000]" in text
        assert "Round 2: allocation=[0.5000, 1.5000" in text

    def test_deterministic(self):
        assert render_prompt(REASONER, 6, 6.0, history()) == render_prompt(REASONER, 6, 6.0, history())

    def test_empty_history(self):
        with pytest.raises(ConfigError):
            render_prompt(REASONER, 6, 6.0, [])

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            render_prompt("critic", 6, 6.0, history())


class TestParse:
    def test_sample(self):
        assert parse_answer(SAMPLE_RESPONSE, 6) == [0.93, 1.18, 0.77, 1.19, 0.75, 1.18]

    def test_no_tags(self):
        out = parse_answer("I would put [1, 1, 1, 1, 1, 1]", 6)
        assert isinstance(out, ParseFailure) and out.reason == "no_answer_block"

    def test_no_vector(self):
        out = parse_answer("<answer>evenly</answer>", 6)
        assert out.reason == "no_vector"

    def test_length_not_enforced(self):
        assert parse_answer("<answer>[1, 2]</answer>", 6) == [1.0, 2.0]

    def test_first_span_and_vector(self):
        text = "<answer>[1, 2, 3] or [4, 5, 6]</answer><answer>[7, 8, 9]</answer>"
        assert parse_answer(text, 3) == [1.0, 2.0, 3.0]

    def test_scientific_and_signs(self):
        assert parse_answer("<answer>[1e-1, -2, +.5]</answer>", 3) == [0.1, -2.0, 0.5]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 6, allow_nan=False), min_size=1, max_size=12))
    def test_roundtrip(self, values):
        parsed = parse_answer(format_answer(values), len(values))
        np.testing.assert_allclose(parsed, np.round(values, 4), atol=1e-12)


class Stub(BaseHTTPRequestHandler):
    reply = {"choices": [{"text": SAMPLE_RESPONSE}]}
    status = 200
    requests: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests.append({"body": body, "auth": self.headers.get("Authorization")})
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(json.dumps(self.reply).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def stub():
    def start(reply=None, status=200):
        handler = type("H", (Stub,), {"reply": reply or Stub.reply, "status": status, "requests": []})
        server = HTTPServer(("127.0.0.1", 0), handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_port}/v1/completions", handler

    servers = []
    yield start
    for s in servers:
        s.shutdown()


class TestEndpoint:
    def test_roundtrip(self, stub, monkeypatch):
        url, handler = stub()
        monkeypatch.setenv("STUB_TOKEN", "s3cret")
        client = CompletionClient(CompletionEndpoint(url, "m", auth_token_env_var="STUB_TOKEN"))
        audit = []
        out = llm_agent_act(client, OPTIMIZER, history(), EnvMeta(6, 6.0), audit)
        assert out == [0.93, 1.18, 0.77, 1.19, 0.75, 1.18]
        req = handler.requests[0]
        assert req["auth"] == "Bearer s3cret"
        assert req["body"]["max_tokens"] == 500 and req["body"]["model"] == "m"
        assert audit[0]["response"] == SAMPLE_RESPONSE
        assert audit[0]["prompt"].endswith("<reason>")

    def test_plain_text_body(self, stub):
        url, _ = stub(reply={"text": "<answer>[3, 3]</answer>"})
        client = CompletionClient(CompletionEndpoint(url, "m"))
        assert llm_agent_act(client, REASONER, history()[:1], EnvMeta(6, 6.0)) == [3.0, 3.0]

    def test_prose(self, stub):
        url, _ = stub(reply={"text": "spread it evenly"})
        client = CompletionClient(CompletionEndpoint(url, "m"))
        out = llm_agent_act(client, REASONER, history(), EnvMeta(6, 6.0))
        assert out.reason == "no_answer_block"

    def test_error_status_retries(self, stub):
        url, handler = stub(status=500)
        client = CompletionClient(CompletionEndpoint(url, "m", retries=2))
        with pytest.raises(TransportError):
            llm_agent_act(client, REASONER, history(), EnvMeta(6, 6.0))
        assert len(handler.requests) == 3

    def test_unreachable(self):
        client = CompletionClient(CompletionEndpoint("http://127.0.0.1:9/", "m", timeout=0.5, retries=1))
        with pytest.raises(TransportError):
            client.complete("hello")

    def test_no_token_header_without_env(self, stub, monkeypatch):
        url, handler = stub()
        monkeypatch.delenv("MISSING_TOKEN", raising=False)
        CompletionClient(CompletionEndpoint(url, "m", auth_token_env_var="MISSING_TOKEN")).complete("x")
        assert handler.requests[0]["auth"] is None

    def test_agent_in_dual_phase(self, stub):
        url, _ = stub()
        env = env_generate(0, GenSpec())
        fs = FewShotSet(tuple(history()))
        agent = LlmAgent(CompletionClient(CompletionEndpoint(url, "m")), REASONER)
        traj = run_dual_phase(env, fs, agent, HeuristicOptimizer(), n_try=3)
        np.testing.assert_allclose(traj.episodes[0].allocation, [0.93, 1.18, 0.77, 1.19, 0.75, 1.18])
        np.testing.assert_allclose(traj.episodes[0].mroi, env_evaluate(env, traj.episodes[0].allocation))
        assert len(agent.audit) == 1
