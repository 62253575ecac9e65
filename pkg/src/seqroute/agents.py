"""Execution backends behind one narrow contract.

respond(system_prompt, user_prompt, context_block) -> (text, Usage).

Shipped backends: a deterministic scripted world for offline verification,
a malicious variant for the robustness protocol, an HTTP client for
chat-completion endpoints, and a record/replay cassette wrapper.
"""

from __future__ import annotations

import json
import os
import re
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from hashlib import blake2b
from pathlib import Path

from .errors import ConfigError, InputError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def count_tokens(text: str) -> int:
    """Deterministic token count: alphanumeric runs plus single punctuation
    marks.  Used for offline usage accounting and as the prompt-size oracle."""
    return len(_TOKEN_RE.findall(text))


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


class TransportError(Exception):
    """Base for backend delivery failures."""


class AuthenticationError(TransportError):
    pass


class RetriesExhaustedError(TransportError):
    pass


class MalformedResponseError(TransportError):
    pass


class AgentBackend(ABC):
    @abstractmethod
    def respond(self, system_prompt: str, user_prompt: str, context_block: str):
        """Return (response_text, Usage)."""


# ---------------------------------------------------------------------------
# scripted verification world

# Forged clue emitted by the malicious role; stable across calls so the
# decision rule can detect corruption deterministically.
POISON = "poison-9f1c55e2d3a7"

_WRONG_PREFIX = "wrong-"


def _digest(material: str) -> str:
    return blake2b(material.encode("utf-8"), digest_size=6).hexdigest()


def derive_chain_answer(clues: tuple[str, ...]) -> str:
    """Ground-truth answer of a clue chain; a function of the complete
    ordered clue set and nothing else."""
    return _digest("|".join(clues))


@dataclass(frozen=True)
class SyntheticTask:
    """A task solvable only by relaying an ordered clue chain.

    `chains` holds one or more alternative solution chains as
    (role_ids, clues) pairs; completing any of them derives the answer.
    Roles may appear in at most one chain position across the task.
    """

    qid: str
    query: str
    chains: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]
    answer: str

    def __post_init__(self):
        seen = set()
        for roles, clues in self.chains:
            if len(roles) != len(clues):
                raise InputError(f"{self.qid}: chain and clue lengths differ")
            for r in roles:
                if r in seen:
                    raise InputError(f"{self.qid}: role {r!r} appears twice across chains")
                seen.add(r)

    @classmethod
    def single_chain(cls, qid, query, roles, clues):
        return cls(qid, query, ((tuple(roles), tuple(clues)),), derive_chain_answer(tuple(clues)))

    def chain_position(self, role_id: str):
        for roles, clues in self.chains:
            if role_id in roles:
                return roles.index(role_id), clues
        return None

    def decision_response(self, context_block: str) -> str:
        """Derive the answer from whatever clues reached the decision agent.

        Correct iff some chain's clues are all present and the context is not
        poisoned; otherwise a deterministic wrong answer (never equal to the
        ground truth, which is bare hex).
        """
        poisoned = POISON in context_block
        found_parts = []
        for roles, clues in self.chains:
            found = [c for c in clues if c in context_block]
            if not poisoned and len(found) == len(clues):
                return self.answer
            found_parts.append(",".join(found))
        material = ";".join(found_parts) + ("|" + POISON if poisoned else "")
        return _WRONG_PREFIX + _digest(material)


def scripted_respond(task: SyntheticTask, role, context_block: str) -> str:
    """Deterministic in-world behavior for one role.

    A chain role at position p emits its clue only when clues 1..p-1 are in
    its context; the decision role derives the answer; everyone else emits a
    clue-free filler line.
    """
    if role.is_decision:
        return task.decision_response(context_block)
    pos = task.chain_position(role.id)
    if pos is not None:
        p, clues = pos
        if all(c in context_block for c in clues[:p]):
            return f"Finding: {clues[p]}"
    return f"Role {role.id} reports nothing relevant here."


def malicious_respond(context_block: str) -> str:
    """A forged clue that corrupts any decision made from a context
    containing it."""
    return f"Critical fact: {POISON}"


class ScriptedBackend(AgentBackend):
    """Deterministic oracle world for one task.

    Resolves the acting role from the system prompt (longest role-prompt
    prefix match) so the orchestrator contract stays text-only.  Token usage
    comes from the shipped counter, keeping efficiency metrics meaningful
    offline.
    """

    def __init__(self, task: SyntheticTask, catalog, malicious_role_ids=()):
        self.task = task
        self.catalog = list(catalog)
        self.malicious_role_ids = frozenset(malicious_role_ids)

    def _resolve_role(self, system_prompt: str):
        match = None
        for role in self.catalog:
            if system_prompt.startswith(role.role_prompt):
                if match is None or len(role.role_prompt) > len(match.role_prompt):
                    match = role
        if match is None:
            raise InputError("system prompt does not match any catalog role")
        return match

    def respond(self, system_prompt, user_prompt, context_block):
        role = self._resolve_role(system_prompt)
        if role.id in self.malicious_role_ids:
            text = malicious_respond(context_block)
        else:
            text = scripted_respond(self.task, role, context_block)
        prompt = "\n\n".join(filter(None, [system_prompt, user_prompt, context_block]))
        return text, Usage(count_tokens(prompt), count_tokens(text))


# ---------------------------------------------------------------------------
# HTTP chat-completion backend


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "SEQROUTE_API_KEY"
    timeout: float = 60.0
    max_attempts: int = 3
    temperature: float = 1.0
    backoff_base: float = 0.5  # seconds; doubles per retry
    rate_limit_per_sec: float | None = None


class _TokenBucket:
    """Minimal token bucket; callers block until a slot frees up."""

    def __init__(self, rate_per_sec: float, burst: int = 1):
        self.rate = rate_per_sec
        self.capacity = float(burst)
        self.tokens = float(burst)
        self.stamp = time.monotonic()
        import threading

        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


class HttpChatBackend(AgentBackend):
    """Client for OpenAI-style chat-completion endpoints.

    Sends [system, user+context] messages; retries transient failures
    (connection errors, timeouts, 429, 5xx) with exponential backoff up to
    max_attempts; surfaces the provider's token usage unchanged.
    """

    def __init__(self, config: EndpointConfig):
        if not config.base_url:
            raise ConfigError("endpoint base_url is required")
        key = os.environ.get(config.api_key_env, "")
        if not key:
            raise ConfigError(f"credential env var {config.api_key_env} is not set")
        self.config = config
        self._key = key
        self._bucket = (
            _TokenBucket(config.rate_limit_per_sec)
            if config.rate_limit_per_sec
            else None
        )

    def respond(self, system_prompt, user_prompt, context_block):
        import requests

        content = user_prompt + (f"\n\n{context_block}" if context_block else "")
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": content},
            ],
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last_error = None
        for attempt in range(self.config.max_attempts):
            if self._bucket is not None:
                self._bucket.acquire()
            try:
                resp = requests.post(
                    url,
                    json=payload,
                    headers={"Authorization": f"Bearer {self._key}"},
                    timeout=self.config.timeout,
                )
            except requests.RequestException as e:
                last_error = e
                time.sleep(self.config.backoff_base * (2**attempt))
                continue
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"endpoint rejected credentials ({resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                time.sleep(self.config.backoff_base * (2**attempt))
                continue
            if resp.status_code != 200:
                raise MalformedResponseError(f"unexpected HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse(resp)
        raise RetriesExhaustedError(
            f"gave up after {self.config.max_attempts} attempts: {last_error}"
        )

    @staticmethod
    def _parse(resp):
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MalformedResponseError(f"cannot parse completion response: {e}") from e
        usage = data.get("usage") or {}
        return text, Usage(
            int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
        )


# ---------------------------------------------------------------------------
# record/replay cassette


def _request_key(system_prompt, user_prompt, context_block) -> str:
    return _digest("\x1f".join([system_prompt, user_prompt, context_block]))


class ReplayBackend(AgentBackend):
    """JSON cassette for offline tests of any backend's traffic.

    Recording wraps an inner backend and appends exchanges; replay serves
    recorded responses in order per distinct request.  save() writes the
    cassette.
    """

    def __init__(self, cassette_path, inner: AgentBackend | None = None):
        self.path = Path(cassette_path)
        self.inner = inner
        self._records: list[dict] = []
        self._queues: dict[str, list[dict]] = {}
        if inner is None:
            if not self.path.exists():
                raise ConfigError(f"cassette {self.path} not found")
            self._records = json.loads(self.path.read_text())
            for rec in self._records:
                self._queues.setdefault(rec["key"], []).append(rec)

    def respond(self, system_prompt, user_prompt, context_block):
        key = _request_key(system_prompt, user_prompt, context_block)
        if self.inner is None:
            queue = self._queues.get(key)
            if not queue:
                raise MalformedResponseError("cassette has no recorded response for request")
            rec = queue.pop(0)
            u = rec["response"]["usage"]
            return rec["response"]["text"], Usage(u["prompt_tokens"], u["completion_tokens"])
        text, usage = self.inner.respond(system_prompt, user_prompt, context_block)
        self._records.append(
            {
                "key": key,
                "request": {
                    "system": system_prompt,
                    "user": user_prompt,
                    "context": context_block,
                },
                "response": {
                    "text": text,
                    "usage": {
                        "prompt_tokens": usage.prompt_tokens,
                        "completion_tokens": usage.completion_tokens,
                    },
                },
            }
        )
        return text, usage

    def save(self):
        self.path.write_text(json.dumps(self._records, indent=2, sort_keys=True))
