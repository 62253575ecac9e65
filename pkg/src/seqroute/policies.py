"""Baseline policies sharing the learned router's decide() contract."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import InputError
from .router import StepDecision


class RandomPolicy:
    """Uniform role choice and fair-coin context masks; deterministic under
    the episode rng."""

    name = "random"
    encoder = None

    def decide(self, query, catalog, history, mode, rng, force_role: Optional[int] = None):
        n = len(catalog)
        k = force_role if force_role is not None else int(rng.integers(n))
        t_minus_1 = len(history)
        mask = rng.random(t_minus_1) < 0.5
        gates = np.full(t_minus_1, 0.5)
        decision = StepDecision(
            role_index=k,
            scores=np.zeros(n),
            gates=gates,
            mask=mask,
            forced=force_role is not None,
        )
        if mode == "train":
            if force_role is None:
                decision.nap_logprob = Tensor(np.log(1.0 / n))
            decision.ncs_logprob = Tensor(t_minus_1 * np.log(0.5))
            decision.gate_nodes = []
        return decision


class OraclePolicy:
    """Replays each task's true clue chain with exact context masks.

    Accuracy 1.0 on the scripted world by construction; used as the
    known-good reference row in evaluations.
    """

    name = "oracle"
    encoder = None

    def __init__(self, tasks):
        self._by_query = {t.query: t for t in tasks}

    def decide(self, query, catalog, history, mode, rng, force_role: Optional[int] = None):
        task = self._by_query.get(query)
        if task is None:
            raise InputError("oracle policy has no task for this query")
        chain = task.chains[0][0]
        index_of = {r.id: i for i, r in enumerate(catalog)}
        done = [h.role_id for h in history]
        todo = [rid for rid in chain if rid not in done]

        def steps_for(role_ids):
            return {h.step for h in history if h.role_id in role_ids}

        if force_role is not None:
            k = force_role
            visible = steps_for(set(chain))
        elif todo:
            rid = todo[0]
            k = index_of[rid]
            prefix = chain[: chain.index(rid)]
            visible = steps_for(set(prefix))
        else:
            k = next(i for i, r in enumerate(catalog) if r.is_decision)
            visible = steps_for(set(chain))

        mask = np.array([h.step in visible for h in history], dtype=bool)
        return StepDecision(
            role_index=k,
            scores=np.zeros(len(catalog)),
            gates=mask.astype(float),
            mask=mask,
            forced=force_role is not None,
        )
