import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from seqroute import agents
from seqroute.agents import (
    POISON,
    EndpointConfig,
    HttpChatBackend,
    ReplayBackend,
    ScriptedBackend,
    SyntheticTask,
    Usage,
    count_tokens,
    derive_chain_answer,
    malicious_respond,
    scripted_respond,
)
from seqroute.errors import ConfigError, InputError
from seqroute.orchestrator import RoleSpec
from seqroute.suites import make_catalog


def _task(chain=("alpha", "bravo"), qid="t-0"):
    clues = tuple(f"clue-{i}feed{i}" for i in range(len(chain)))
    return SyntheticTask.single_chain(qid, "q", chain, clues)


def _role(rid, decision=False):
    return RoleSpec(id=rid, role_prompt=f"You are {rid}.", is_decision=decision)


def test_count_tokens():
    assert count_tokens("hello world") == 2
    assert count_tokens("a, b.") == 4
    assert count_tokens("") == 0


def test_decision_with_full_chain_answers_correctly():
    t = _task()
    clue1, clue2 = t.chains[0][1]
    ctx = f"Response: Finding: {clue1}\n\nResponse: Finding: {clue2}"
    assert t.decision_response(ctx) == t.answer


def test_decision_missing_clue_gives_wrong_answer():
    t = _task()
    clue1, _ = t.chains[0][1]
    out = t.decision_response(f"Finding: {clue1}")
    assert out != t.answer
    # deterministic
    assert out == t.decision_response(f"Finding: {clue1}")


def test_role_not_in_chain_emits_clue_free_filler():
    t = _task()
    out = scripted_respond(t, _role("charlie"), "anything")
    for _, clues in t.chains:
        for c in clues:
            assert c not in out


def test_chain_role_needs_prefix():
    t = _task()
    clue1, clue2 = t.chains[0][1]
    bravo = _role("bravo")
    assert clue2 not in scripted_respond(t, bravo, "")
    assert clue2 in scripted_respond(t, bravo, f"Finding: {clue1}")
    # first chain role needs nothing
    assert clue1 in scripted_respond(t, _role("alpha"), "")


def test_poison_flips_answer():
    t = _task()
    clue1, clue2 = t.chains[0][1]
    full = f"{clue1} {clue2}"
    assert t.decision_response(full) == t.answer
    assert t.decision_response(full + " " + POISON) != t.answer


def test_poison_string_stable():
    assert malicious_respond("a") == malicious_respond("b")
    assert POISON in malicious_respond("")


def test_answer_is_function_of_ordered_clues():
    clues = ("clue-aa", "clue-bb")
    assert derive_chain_answer(clues) == derive_chain_answer(clues)
    assert derive_chain_answer(clues) != derive_chain_answer(tuple(reversed(clues)))


def test_task_rejects_duplicate_roles():
    with pytest.raises(InputError):
        SyntheticTask("q0", "q", ((("a", "a"), ("c1", "c2")),), "x")


def test_scripted_backend_resolves_roles_and_counts_tokens():
    catalog = make_catalog()
    t = _task(chain=("alpha", "bravo"))
    backend = ScriptedBackend(t, catalog)
    role = catalog[0]
    system = role.role_prompt
    user = "question text"
    text, usage = backend.respond(system, user, "")
    assert t.chains[0][1][0] in text
    assert usage.prompt_tokens == count_tokens(system + "\n\n" + user)
    assert usage.completion_tokens == count_tokens(text)
    with pytest.raises(InputError):
        backend.respond("You are nobody.", "q", "")


def test_scripted_backend_malicious_role():
    catalog = make_catalog(attack=True)
    t = _task()
    backend = ScriptedBackend(t, catalog, malicious_role_ids={"saboteur"})
    saboteur = next(r for r in catalog if r.id == "saboteur")
    text, _ = backend.respond(saboteur.role_prompt, "q", "")
    assert POISON in text


# --- scripted world soundness (exhaustive) ----------------------------------


def _simulate(task, catalog, sequence, mask_bits):
    """Direct clue-flow simulation for one role sequence and mask choice."""
    responses = []
    at = 0
    final = None
    for t_idx, role in enumerate(sequence):
        mask = mask_bits[at : at + t_idx]
        at += t_idx
        ctx = "\n".join(r for r, m in zip(responses, mask) if m)
        text = scripted_respond(task, role, ctx)
        responses.append(text)
        if role.is_decision:
            final = (text, ctx)
            break
    return final


def test_scripted_world_soundness_exhaustive():
    # catalog: two chain roles, one bystander, decision; all sequences <= 4
    roles = [_role("alpha"), _role("bravo"), _role("charlie"), _role("judge", True)]
    task = _task(chain=("alpha", "bravo"))
    clues = task.chains[0][1]
    import itertools

    for length in range(1, 5):
        for seq in itertools.product(roles, repeat=length):
            if any(r.is_decision for r in seq[:-1]) or not seq[-1].is_decision:
                continue  # episodes end at the first decision step
            n_bits = length * (length - 1) // 2
            for bits in itertools.product([False, True], repeat=n_bits):
                out = _simulate(task, roles, seq, list(bits))
                assert out is not None
                answer, decision_ctx = out
                should_be_correct = all(c in decision_ctx for c in clues)
                assert (answer == task.answer) == should_be_correct


# --- HTTP backend ------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    script = []  # list of (status, payload-dict or None)
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, body, self.headers.get("Authorization")))
        status, payload = type(self).script.pop(0)
        data = json.dumps(payload or {}).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server(monkeypatch):
    monkeypatch.setenv("SEQROUTE_API_KEY", "test-key")
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.script = []
    _Handler.seen = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def _ok_payload(text="hi", prompt=10, completion=5):
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": prompt, "completion_tokens": completion},
    }


def _backend(base_url, **kw):
    cfg = EndpointConfig(base_url=base_url, model="test-model", backoff_base=0.0, **kw)
    return HttpChatBackend(cfg)


def test_http_echo_and_usage_passthrough(http_server):
    _Handler.script = [(200, _ok_payload("fixed body", 10, 5))]
    text, usage = _backend(http_server).respond("sys", "usr", "ctx")
    assert text == "fixed body"
    assert usage == Usage(10, 5)
    path, body, auth = _Handler.seen[0]
    assert path == "/chat/completions"
    assert auth == "Bearer test-key"
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    assert body["messages"][1]["content"] == "usr\n\nctx"


def test_http_retries_after_two_500s(http_server):
    _Handler.script = [(500, None), (500, None), (200, _ok_payload("ok"))]
    text, _ = _backend(http_server).respond("s", "u", "")
    assert text == "ok"
    assert len(_Handler.seen) == 3


def test_http_retries_exhausted(http_server):
    _Handler.script = [(500, None)] * 3
    with pytest.raises(agents.RetriesExhaustedError):
        _backend(http_server).respond("s", "u", "")


def test_http_auth_error_no_retry(http_server):
    _Handler.script = [(401, None)]
    with pytest.raises(agents.AuthenticationError):
        _backend(http_server).respond("s", "u", "")
    assert len(_Handler.seen) == 1


def test_http_malformed_response(http_server):
    _Handler.script = [(200, {"nope": True})]
    with pytest.raises(agents.MalformedResponseError):
        _backend(http_server).respond("s", "u", "")


def test_http_missing_credential(monkeypatch):
    monkeypatch.delenv("SEQROUTE_API_KEY", raising=False)
    with pytest.raises(ConfigError):
        _backend("http://example.invalid")


# --- cassette ----------------------------------------------------------------


def test_replay_backend_round_trip(tmp_path):
    catalog = make_catalog()
    t = _task()
    cassette = tmp_path / "cassette.json"
    rec = ReplayBackend(cassette, inner=ScriptedBackend(t, catalog))
    args = (catalog[0].role_prompt, "user text", "")
    live = rec.respond(*args)
    rec.save()

    replay = ReplayBackend(cassette)
    assert replay.respond(*args) == live
    with pytest.raises(agents.MalformedResponseError):
        replay.respond(*args)  # queue consumed
