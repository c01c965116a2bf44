"""Prompt rendering, answer extraction and a text-completion agent."""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import requests

from budgetalloc.envmodel import EnvMeta, EpisodeRecord
from budgetalloc.errors import ConfigError, TransportError

log = logging.getLogger(__name__)

REASONER = "reasoner"
OPTIMIZER = "optimizer"

_OUTPUT_FORMAT = """Please output the new allocation:
<reason>
...
</reason>
<answer>
[y1, y2, ..., y{NUM}]
</answer>

Your Response:
<reason>"""

REASONER_TEMPLATE = (
    "You are given a total budget of {TOTAL} to allocate across {NUM} time periods. "
    "Based on your last attempt, identify the time period with the **lowest reward**, "
    "and reallocate some of its budget to the time period with the **highest reward**. "
    "Keep the allocations for other periods unchanged.\n"
    "\n"
    "Last attempt: {HISTORY}\n"
    "\n" + _OUTPUT_FORMAT
)

OPTIMIZER_TEMPLATE = (
    "You are given a budget allocation task across {NUM} time periods. "
    "The total budget is {TOTAL}, and it must be fully used - no more, no less. "
    "In every time period, allocating more budget results in smaller reward. "
    "Your goal is to equalize the reward across all periods.\n"
    "\n"
    "You are provided with the last some rounds of allocations and observed rewards. "
    "Use this historical data to identify:\n"
    "- Which periods likely has lower reward, reduce allocation slightly.\n"
    "- Which periods likely has higher reward, increase allocation slightly.\n"
    "\n"
    "Do not resort to a naive and robust uniform allocation. Instead, carefully analyze "
    "the underlying patterns and allocate the budget based on the relationship between "
    "historical data and observed rewards.\n"
    "\n"
    "Last attempt: {HISTORY}\n"
    "\n" + _OUTPUT_FORMAT
)

TEMPLATES = {REASONER: REASONER_TEMPLATE, OPTIMIZER: OPTIMIZER_TEMPLATE}
_PLACEHOLDER = re.compile(r"\{[A-Za-z_-]+\}")


def _fmt_vec(values) -> str:
    return "[" + ", ".join(f"{float(v):.4f}" for v in values) + "]"


def format_history(history: Sequence[EpisodeRecord]) -> str:
    lines = []
    for k, rec in enumerate(history, start=1):
        lines.append(f"Round {k}: allocation={_fmt_vec(rec.allocation)}, rewards={_fmt_vec(rec.mroi)}")
    return "\n".join(lines)


def _fmt_number(x: float) -> str:
    return f"{x:g}"


def render_prompt(kind: str, periods: int, budget: float, history: Sequence[EpisodeRecord]) -> str:
    if kind not in TEMPLATES:
        raise ConfigError(f"unknown prompt kind {kind!r}")
    records = list(history)
    if not records:
        raise ConfigError("cannot render a prompt without at least one past attempt")
    body = "\n" + format_history(records)
    text = (
        TEMPLATES[kind]
        .replace("{HISTORY}", body)
        .replace("{NUM}", str(int(periods)))
        .replace("{TOTAL}", _fmt_number(float(budget)))
    )
    leftover = _PLACEHOLDER.search(text)
    if leftover:
        raise ConfigError(f"unresolved placeholder {leftover.group(0)}")
    return text


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    detail: str = ""


_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_NUM = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_VECTOR = re.compile(r"\[\s*(" + _NUM + r"(?:\s*,\s*" + _NUM + r")*)\s*,?\s*\]")


def parse_answer(response: str, periods: int | None = None) -> list[float] | ParseFailure:
    """Numbers from the first bracketed vector inside the first answer block.

    The length is not checked against ``periods``; a wrong-length vector is
    returned as-is and penalized by the reward.
    """
    m = _ANSWER.search(response or "")
    if m is None:
        return ParseFailure("no_answer_block")
    v = _VECTOR.search(m.group(1))
    if v is None:
        return ParseFailure("no_vector", m.group(1).strip()[:200])
    return [float(x) for x in re.findall(_NUM, v.group(1))]


def format_answer(values) -> str:
    return f"<answer>\n{_fmt_vec(values)}\n</answer>"


@dataclass(frozen=True)
class CompletionEndpoint:
    base_url: str
    model_name: str
    timeout: float = 30.0
    max_tokens: int = 500
    temperature: float = 0.0
    retries: int = 2
    auth_token_env_var: str | None = None
    max_in_flight: int = 4


class CompletionClient:
    """Minimal JSON completion client: POST ``{model, prompt, max_tokens, temperature}``.

    Accepts either ``{"choices": [{"text": ...}]}`` or ``{"text": ...}`` bodies.
    """

    def __init__(self, endpoint: CompletionEndpoint, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max(1, endpoint.max_in_flight))

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        var = self.endpoint.auth_token_env_var
        if var:
            token = os.environ.get(var)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, prompt: str) -> str:
        ep = self.endpoint
        payload = {
            "model": ep.model_name,
            "prompt": prompt,
            "max_tokens": ep.max_tokens,
            "temperature": ep.temperature,
        }
        last_exc: Exception | None = None
        for attempt in range(ep.retries + 1):
            if attempt:
                time.sleep(0.1 * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self.session.post(ep.base_url, json=payload, headers=self._headers(), timeout=ep.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                last_exc = TransportError(f"endpoint returned status {resp.status_code}")
                continue
            try:
                body = resp.json()
            except ValueError as exc:
                last_exc = exc
                continue
            if isinstance(body, dict) and "choices" in body:
                return str(body["choices"][0].get("text", ""))
            if isinstance(body, dict) and "text" in body:
                return str(body["text"])
            last_exc = TransportError("unrecognized response body")
        raise TransportError(f"completion failed after {ep.retries + 1} attempts: {last_exc}")


@dataclass
class LlmAgent:
    """Agent that renders a prompt, queries the endpoint and parses the answer."""

    client: CompletionClient
    kind: str
    audit: list = field(default_factory=list)

    def act(self, history, meta: EnvMeta):
        return llm_agent_act(self.client, self.kind, history, meta, self.audit)


def llm_agent_act(client: CompletionClient, kind: str, history, meta: EnvMeta, audit: list | None = None):
    prompt = render_prompt(kind, meta.periods, meta.budget, history)
    response = client.complete(prompt)
    log.debug("completion for %s prompt: %r", kind, response)
    if audit is not None:
        audit.append({"prompt": prompt, "response": response})
    return parse_answer(response, meta.periods)
