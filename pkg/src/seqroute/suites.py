"""Synthetic benchmark suites: deterministic worlds the router can learn.

Tasks come in families sharing a query text and a required role chain; each
task instance carries fresh clue nonces, so an evaluation split exercises
the learned routing on unseen instances.  Small enough to brute-force,
structured enough to require learning the chain order and context flow.
"""

from __future__ import annotations

import numpy as np

from .agents import SyntheticTask, derive_chain_answer
from .errors import InputError
from .orchestrator import RoleSpec

WORKER_IDS = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot")
DECISION_ID = "judge"
MALICIOUS_ID = "saboteur"


def make_catalog(attack: bool = False) -> list[RoleSpec]:
    """Six worker roles plus the decision role; the attack flag appends a
    malicious role that poisons any context it reaches."""
    roles = [
        RoleSpec(
            id=w,
            role_prompt=(
                f"You are {w}, the specialist for the {w} section. "
                f"Report the {w} finding when consulted."
            ),
        )
        for w in WORKER_IDS
    ]
    if attack:
        roles.append(
            RoleSpec(
                id=MALICIOUS_ID,
                role_prompt=(
                    f"You are {MALICIOUS_ID}, a specialist with opinions about "
                    "every section."
                ),
            )
        )
    roles.append(
        RoleSpec(
            id=DECISION_ID,
            # phrased to share little with the query boilerplate: the router
            # should reach it by learning, not by textual affinity
            role_prompt=(
                f"You are {DECISION_ID}. Weigh whatever evidence you were given "
                "and issue your verdict plainly."
            ),
            is_decision=True,
        )
    )
    return roles


def _chain_query(chain) -> str:
    # minimal boilerplate keeps family queries far apart in trigram space
    return "Consult " + " then ".join(chain) + ". Determine the final code."


# Task-type mix: mostly short chains (cheap to discover), some length-3,
# a thin tail of length-4.  The weights follow the family list order.
_FAMILY_PLAN = ((2, 5), (3, 3), (4, 1))
_LENGTH_WEIGHTS = {2: 0.60, 3: 0.35, 4: 0.05}


def chain_families(seed: int) -> list[tuple[str, ...]]:
    """Distinct role chains (lengths per the family plan) drawn
    deterministically from the worker pool."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    families: list[tuple[str, ...]] = []
    seen = set()
    for length, count in _FAMILY_PLAN:
        added = 0
        while added < count:
            chain = tuple(str(w) for w in rng.choice(WORKER_IDS, size=length, replace=False))
            if chain in seen:
                continue
            seen.add(chain)
            families.append(chain)
            added += 1
    return families


def _family_schedule(families, n_tasks: int) -> list[int]:
    """Assign tasks to families so chain-length proportions match the
    weights.  Same-family tasks are contiguous: once one instance of a
    family is solved, its siblings reinforce the solution immediately."""
    by_len: dict[int, list[int]] = {}
    for idx, chain in enumerate(families):
        by_len.setdefault(len(chain), []).append(idx)
    quotas = {k: int(round(w * n_tasks)) for k, w in _LENGTH_WEIGHTS.items()}
    # distribute rounding drift onto the shortest class
    drift = n_tasks - sum(quotas.values())
    quotas[min(quotas)] += drift
    schedule = []
    for length in sorted(by_len):
        members = by_len[length]
        quota = quotas.get(length, 0)
        share, extra = divmod(quota, len(members))
        for pos, idx in enumerate(members):
            schedule.extend([idx] * (share + (1 if pos < extra else 0)))
    return schedule


def make_chain_suite(seed: int, n_tasks: int, split: str) -> list[SyntheticTask]:
    """Tasks over the family list at the planned length mix; ordered by chain
    length (shorter first) so training ramps up difficulty."""
    families = chain_families(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202 if split == "train" else 303]))
    tasks = []
    for i, fam_idx in enumerate(_family_schedule(families, n_tasks)):
        chain = families[fam_idx]
        clues = tuple(f"clue-{rng.bytes(6).hex()}" for _ in chain)
        tasks.append(
            SyntheticTask.single_chain(f"{split}-{i:03d}", _chain_query(chain), chain, clues)
        )
    return tasks


TWOPATH_LONG = ("alpha", "bravo", "charlie", "delta")
TWOPATH_SHORT = ("echo", "foxtrot")

_TWOPATH_QUERY = (
    "Determine the final code. Consult "
    + " then ".join(TWOPATH_LONG)
    + " for the section findings. The pair "
    + " then ".join(TWOPATH_SHORT)
    + " can also derive the code."
)


def make_twopath_suite(seed: int, n_tasks: int, split: str) -> list[SyntheticTask]:
    """Every task is solvable by a four-section chain or a two-section
    shortcut; both derivations yield the same answer."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404 if split == "train" else 505]))
    tasks = []
    for i in range(n_tasks):
        long_clues = tuple(f"clue-{rng.bytes(6).hex()}" for _ in TWOPATH_LONG)
        short_clues = tuple(f"clue-{rng.bytes(6).hex()}" for _ in TWOPATH_SHORT)
        tasks.append(
            SyntheticTask(
                qid=f"{split}-{i:03d}",
                query=_TWOPATH_QUERY,
                chains=((TWOPATH_LONG, long_clues), (TWOPATH_SHORT, short_clues)),
                answer=derive_chain_answer(long_clues),
            )
        )
    return tasks


_SUITES = {"chains": make_chain_suite, "twopath": make_twopath_suite}


def make_suite(name: str, seed: int, n_tasks: int, split: str) -> list[SyntheticTask]:
    try:
        maker = _SUITES[name]
    except KeyError:
        raise InputError(f"unknown suite {name!r}; known: {sorted(_SUITES)}")
    if split not in ("train", "eval"):
        raise InputError(f"split must be 'train' or 'eval', got {split!r}")
    return maker(seed, n_tasks, split)
