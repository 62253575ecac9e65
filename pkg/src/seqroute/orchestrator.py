"""Episode driver: encode -> predict -> execute, with history bookkeeping.

One episode runs the policy step by step until a decision-role agent
responds (its response is the final answer) or the step cap forces the
decision role.  Prompts are composed deterministically so that scripted
backends and cassette replay are byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import TransportError
from .encoding import HashingTrigramEncoder, embed_text
from .errors import InputError
from .router import StepDecision

TASK_INSTRUCTIONS = (
    "Use the findings quoted in your context, if any. Respond with your contribution."
)

_ROLE_SUMMARY_WIDTH = 80


@dataclass(frozen=True)
class RoleSpec:
    """One candidate agent role.  Tools are carried in prompts but never
    executed."""

    id: str
    role_prompt: str
    tools: tuple[str, ...] = ()
    is_decision: bool = False


def validate_catalog(catalog: list[RoleSpec]) -> int:
    """Check id uniqueness and the single-decision-role rule; returns the
    decision role's index."""
    ids = [r.id for r in catalog]
    if len(set(ids)) != len(ids):
        raise InputError("role ids must be unique within a catalog")
    decisions = [i for i, r in enumerate(catalog) if r.is_decision]
    if len(decisions) != 1:
        raise InputError(f"catalog needs exactly one decision role, found {len(decisions)}")
    return decisions[0]


@dataclass
class HistoryEntry:
    step: int  # 1-based, contiguous
    role_id: str
    response_text: str
    role_embedding: np.ndarray
    response_embedding: np.ndarray
    prompt_tokens_used: int
    context_mask_applied: np.ndarray  # over steps < step


@dataclass
class EpisodeResult:
    final_answer: str
    length: int
    steps: list[StepDecision]
    history: list[HistoryEntry]
    total_prompt_tokens: int


class EpisodeTransportError(Exception):
    """Backend failure mid-episode; carries the partial trajectory."""

    def __init__(self, cause, steps, history):
        super().__init__(f"episode aborted at step {len(history) + 1}: {cause}")
        self.cause = cause
        self.steps = steps
        self.history = history


@dataclass
class EpisodeConfig:
    t_max: int = 5
    full_visibility_referee: bool = False  # decision agent sees all history


def role_summary(role: RoleSpec) -> str:
    first_line = role.role_prompt.strip().splitlines()[0]
    return first_line[:_ROLE_SUMMARY_WIDTH]


def compose_prompt(
    role: RoleSpec, query: str, history: list[HistoryEntry], mask
) -> tuple[str, str, str]:
    """Render (system_prompt, user_prompt, context_block), byte-stable.

    The context block lists the selected history entries in step order as
    'Role: <summary>' / 'Response: <text>' paragraphs.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size != len(history):
        raise InputError(f"mask length {mask.size} != history length {len(history)}")
    system = role.role_prompt
    if role.tools:
        system += "\nTools available: " + ", ".join(role.tools)
    user = f"{query}\n\n{TASK_INSTRUCTIONS}"
    picked = [h for h, m in zip(history, mask) if m]
    blocks = [f"Role: {h.role_id}\nResponse: {h.response_text}" for h in picked]
    return system, user, "\n\n".join(blocks)


_FALLBACK_ENCODER = None


def _encoder_for(policy):
    enc = getattr(policy, "encoder", None)
    if enc is not None:
        return enc
    global _FALLBACK_ENCODER
    if _FALLBACK_ENCODER is None:
        _FALLBACK_ENCODER = HashingTrigramEncoder()
    return _FALLBACK_ENCODER


def run_episode(
    query: str,
    catalog: list[RoleSpec],
    policy,
    backend,
    config: EpisodeConfig,
    mode: str,
    rng: np.random.Generator,
) -> EpisodeResult:
    """Run one episode to completion.

    At each step the policy picks a role and a context mask; at step t_max
    the role choice is overridden to the decision role.  The episode ends
    immediately after any decision-role response.
    """
    if config.t_max < 1:
        raise InputError("t_max must be >= 1")
    if mode not in ("train", "infer"):
        raise InputError(f"unknown mode {mode!r}")
    decision_idx = validate_catalog(catalog)
    encoder = _encoder_for(policy)

    steps: list[StepDecision] = []
    history: list[HistoryEntry] = []
    total_prompt_tokens = 0
    final_answer = ""

    for t in range(1, config.t_max + 1):
        force = decision_idx if t == config.t_max else None
        decision = policy.decide(query, catalog, history, mode, rng, force_role=force)
        role = catalog[decision.role_index]

        if role.is_decision and config.full_visibility_referee:
            decision.mask = np.ones(len(history), dtype=bool)
            decision.ncs_logprob = None

        system, user, context = compose_prompt(role, query, history, decision.mask)
        try:
            text, usage = backend.respond(system, user, context)
        except TransportError as e:
            raise EpisodeTransportError(e, steps, history) from e

        steps.append(decision)
        history.append(
            HistoryEntry(
                step=t,
                role_id=role.id,
                response_text=text,
                role_embedding=embed_text(encoder, role.role_prompt),
                response_embedding=embed_text(encoder, text),
                prompt_tokens_used=usage.prompt_tokens,
                context_mask_applied=np.asarray(decision.mask, dtype=bool).copy(),
            )
        )
        total_prompt_tokens += usage.prompt_tokens

        if role.is_decision:
            final_answer = text
            break

    return EpisodeResult(
        final_answer=final_answer,
        length=len(history),
        steps=steps,
        history=history,
        total_prompt_tokens=total_prompt_tokens,
    )


def run_fixed_sequence(
    query: str,
    catalog: list[RoleSpec],
    role_ids: list[str],
    masks: list[list[int]],
    backend,
    encoder=None,
) -> EpisodeResult:
    """Replay a fixed role sequence with explicit per-step context masks.

    `masks[t]` lists the 1-based prior steps visible to step t+1 (the
    dag_to_sequence output format).  Used by fixed-topology baselines.
    """
    if len(role_ids) != len(masks):
        raise InputError("role_ids and masks must have equal length")
    by_id = {r.id: r for r in catalog}
    encoder = encoder or HashingTrigramEncoder()
    history: list[HistoryEntry] = []
    total_prompt_tokens = 0
    final_answer = ""
    for t, (rid, parents) in enumerate(zip(role_ids, masks), start=1):
        if rid not in by_id:
            raise InputError(f"sequence references unknown role {rid!r}")
        if any(p < 1 or p >= t for p in parents):
            raise InputError(f"step {t} mask references out-of-range steps {parents}")
        role = by_id[rid]
        mask = np.zeros(t - 1, dtype=bool)
        for p in parents:
            mask[p - 1] = True
        system, user, context = compose_prompt(role, query, history, mask)
        text, usage = backend.respond(system, user, context)
        history.append(
            HistoryEntry(
                step=t,
                role_id=rid,
                response_text=text,
                role_embedding=embed_text(encoder, role.role_prompt),
                response_embedding=embed_text(encoder, text),
                prompt_tokens_used=usage.prompt_tokens,
                context_mask_applied=mask,
            )
        )
        total_prompt_tokens += usage.prompt_tokens
        if role.is_decision:
            final_answer = text
            break
    return EpisodeResult(
        final_answer=final_answer,
        length=len(history),
        steps=[],
        history=history,
        total_prompt_tokens=total_prompt_tokens,
    )
