"""Policy-gradient training with adaptive per-question sampling.

Rewards decay exponentially in sequence length; advantages are standardized
within each question so hard and easy questions contribute comparably; the
objective couples the policy-gradient term with a sparsity penalty on the
context gates.  One optimizer step per question group, with the policy
frozen while a group is collected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .agents import ScriptedBackend
from .autodiff import Tensor
from .errors import ConfigError
from .orchestrator import EpisodeConfig, EpisodeResult, run_episode
from .router import RouterParams, RouterPolicy


@dataclass
class TrainConfig:
    gamma: float = 1.0  # reward decay per step; 1 scores accuracy only
    sparsity_weight: float = 0.0  # lambda on the gate-magnitude penalty
    budget: int = 1000  # total trajectory samples
    questions: int = 80  # questions drawn from the head of the dataset
    threshold: int = 1  # required correct answers before moving on
    per_question_cap: int = 25  # stops starvation on unsolvable questions
    learning_rate: float = 0.01
    momentum: float = 0.0
    grad_clip: float = 5.0
    seed: int = 0
    variant: str = "standard"  # "standard" or "efficiency"
    checkpoint_every: int = 0  # batches between checkpoints; 0 = final only

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.sparsity_weight < 0.0:
            raise ConfigError("sparsity weight must be >= 0")
        if self.threshold < 1:
            raise ConfigError("threshold must be >= 1")
        if self.budget < self.questions:
            raise ConfigError("budget must cover at least one pass over the questions")
        if self.per_question_cap < 1:
            raise ConfigError("per-question cap must be >= 1")


def variant_settings(variant: str) -> dict:
    """The two shipped operating points: accuracy-only, and the efficiency
    setting (decayed reward, sparsity on, context window capped at 2,
    correctness threshold 4)."""
    if variant == "standard":
        return {"gamma": 1.0, "sparsity_weight": 0.0, "threshold": 1, "window_cap": None}
    if variant == "efficiency":
        return {"gamma": 0.9, "sparsity_weight": 1e-3, "threshold": 4, "window_cap": 2}
    raise ConfigError(f"unknown variant {variant!r}")


@dataclass
class Trajectory:
    qid: str
    step_records: list[dict]
    length: int
    final_answer: str
    correct: bool
    reward: float
    total_prompt_tokens: int
    advantage: float = 0.0
    logprob: Optional[Tensor] = None
    gate_nodes: list[Tensor] = field(default_factory=list)

    def release_graph(self):
        self.logprob = None
        self.gate_nodes = []


class TrainingDivergedError(Exception):
    """Non-finite loss or gradient; carries a diagnostic dump of the batch."""

    def __init__(self, message, dump: dict):
        super().__init__(message)
        self.dump = dump


def compute_reward(correct: bool, length: int, gamma: float) -> float:
    """gamma**length when correct, else 0."""
    if length < 1:
        raise ConfigError("sequence length must be >= 1")
    if not 0.0 < gamma <= 1.0:
        raise ConfigError("gamma must lie in (0, 1]")
    return gamma**length if correct else 0.0


def normalize_advantages(rewards) -> np.ndarray:
    """Standardize one question's rewards (population std); a degenerate
    group gets all-zero advantages and its update is skipped."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return r
    sigma = r.std()
    if sigma < 1e-12:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def trajectory_logprob(result: EpisodeResult) -> Optional[Tensor]:
    """Sum the sampled decisions' log-probabilities (agent choices and
    context masks).  Forced steps contribute no agent term."""
    node = None
    for step in result.steps:
        for part in (step.nap_logprob, step.ncs_logprob):
            if part is None:
                continue
            node = part if node is None else ad.add(node, part)
    return node


def make_trajectory(task, result: EpisodeResult, catalog, gamma: float) -> Trajectory:
    correct = result.final_answer == task.answer
    records = []
    for step, entry in zip(result.steps, result.history):
        records.append(
            {
                "role_id": catalog[step.role_index].id,
                "scores": [float(v) for v in step.scores],
                "gates": [float(v) for v in step.gates],
                "mask": [bool(b) for b in step.mask],
                "prompt_tokens": entry.prompt_tokens_used,
                "forced": bool(step.forced),
            }
        )
    gate_nodes = [g for step in result.steps for g in (step.gate_nodes or [])]
    return Trajectory(
        qid=task.qid,
        step_records=records,
        length=result.length,
        final_answer=result.final_answer,
        correct=correct,
        reward=compute_reward(correct, result.length, gamma),
        total_prompt_tokens=result.total_prompt_tokens,
        logprob=trajectory_logprob(result),
        gate_nodes=gate_nodes,
    )


def pg_loss(trajectories: list[Trajectory]) -> Tensor:
    """-sum_t A_t * log P(trajectory_t); zero-advantage trajectories drop out."""
    loss = None
    for traj in trajectories:
        if traj.advantage == 0.0 or traj.logprob is None:
            continue
        term = ad.mul(traj.logprob, -traj.advantage)
        loss = term if loss is None else ad.add(loss, term)
    return loss if loss is not None else Tensor(0.0)


def sparsity_loss(gate_nodes: list[Tensor], weight: float) -> Tensor:
    """weight * sum of gate magnitudes (gates are strictly positive, so the
    magnitude is the gate itself)."""
    if weight == 0.0 or not gate_nodes:
        return Tensor(0.0)
    return ad.mul(ad.total(ad.stack(gate_nodes)), weight)


def total_loss(pg: Tensor, sparse: Tensor) -> Tensor:
    """Combined objective; the sparsity weight is already inside `sparse`."""
    return ad.add(pg, sparse)


class SGD:
    """Plain gradient descent with global-norm clipping and an optional
    momentum term."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 grad_clip: float = 5.0):
        self.items = sorted(params.items())
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self._velocity = {name: np.zeros_like(t.data) for name, t in self.items}

    def step(self):
        sq = 0.0
        for _, t in self.items:
            if t.grad is not None:
                sq += float((t.grad**2).sum())
        norm = np.sqrt(sq)
        if not np.isfinite(norm):
            raise ad.NonFiniteError("non-finite gradient norm")
        scale = 1.0 if norm <= self.grad_clip else self.grad_clip / norm
        for name, t in self.items:
            if t.grad is None:
                continue
            g = t.grad * scale
            if self.momentum:
                v = self._velocity[name]
                v *= self.momentum
                v += g
                g = v
            t.data -= self.lr * g

    def zero(self):
        for _, t in self.items:
            t.grad = None


def question_groups(
    tasks,
    policy,
    catalog,
    backend_factory,
    tconfig: TrainConfig,
    econfig: EpisodeConfig,
    rng: np.random.Generator,
) -> Iterator[tuple[object, list[Trajectory]]]:
    """Yield per-question trajectory groups under the adaptive budget.

    Questions are visited in dataset order; each is sampled until the
    required-correct threshold or the per-question cap, whichever first.
    Epochs repeat while budget remains; the in-flight trajectory always
    completes, so exactly min(budget, demand) trajectories are drawn.
    """
    questions = list(tasks[: tconfig.questions])
    if not questions:
        return
    used = 0
    while used < tconfig.budget:
        for task in questions:
            if used >= tconfig.budget:
                return
            group: list[Trajectory] = []
            corrects = 0
            while (
                corrects < tconfig.threshold
                and len(group) < tconfig.per_question_cap
                and used < tconfig.budget
            ):
                result = run_episode(
                    task.query, catalog, policy, backend_factory(task), econfig, "train", rng
                )
                traj = make_trajectory(task, result, catalog, tconfig.gamma)
                group.append(traj)
                used += 1
                corrects += int(traj.correct)
            if group:
                yield task, group


def adaptive_sample(
    tasks, policy, catalog, backend_factory, tconfig: TrainConfig,
    econfig: EpisodeConfig, rng: np.random.Generator,
) -> list[Trajectory]:
    """Collect trajectories without updating the policy (simulation and
    test entry point for the sampling schedule)."""
    out: list[Trajectory] = []
    for _, group in question_groups(
        tasks, policy, catalog, backend_factory, tconfig, econfig, rng
    ):
        out.extend(group)
    return out


@dataclass
class TrainResult:
    batches: list[dict]
    trajectory_records: list[dict]
    consumed: int


def scripted_backend_factory(catalog, malicious_role_ids=()):
    ids = frozenset(malicious_role_ids)

    def factory(task):
        return ScriptedBackend(task, catalog, malicious_role_ids=ids)

    return factory


def train(
    tasks,
    catalog,
    router_params: RouterParams,
    encoder,
    tconfig: TrainConfig,
    econfig: EpisodeConfig,
    backend_factory=None,
    malicious_role_ids=(),
    checkpoint_dir=None,
) -> TrainResult:
    """Run the full loop: sample a question group, standardize its rewards,
    take one clipped gradient step, free the group's graph, repeat until the
    trajectory budget is spent."""
    from .checkpoint import save_params  # local import keeps module load light

    policy = RouterPolicy(router_params, encoder)
    if backend_factory is None:
        backend_factory = scripted_backend_factory(catalog, malicious_role_ids)
    opt = SGD(router_params.params(), tconfig.learning_rate, tconfig.momentum,
              tconfig.grad_clip)
    rng = np.random.default_rng(np.random.SeedSequence([tconfig.seed, 7001]))

    batches: list[dict] = []
    records: list[dict] = []
    consumed = 0

    for batch_index, (task, group) in enumerate(
        question_groups(tasks, policy, catalog, backend_factory, tconfig, econfig, rng)
    ):
        advantages = normalize_advantages([t.reward for t in group])
        for traj, adv in zip(group, advantages):
            traj.advantage = float(adv)
        updated = bool(np.any(advantages != 0.0))
        loss_value = None
        if updated:
            try:
                gate_nodes = [g for t in group for g in t.gate_nodes]
                loss = total_loss(
                    pg_loss(group), sparsity_loss(gate_nodes, tconfig.sparsity_weight)
                )
                loss_value = float(loss.data)
                ad.backward(loss)
                opt.step()
            except ad.NonFiniteError as e:
                dump = {
                    "qid": task.qid,
                    "batch": batch_index,
                    "rewards": [t.reward for t in group],
                    "advantages": [t.advantage for t in group],
                    "trajectories": [t.step_records for t in group],
                }
                raise TrainingDivergedError(f"diverged on {task.qid}: {e}", dump) from e
            finally:
                opt.zero()

        mean_selected = _mean_selected(group)
        batches.append(
            {
                "batch": batch_index,
                "qid": task.qid,
                "trajectories": len(group),
                "corrects": sum(t.correct for t in group),
                "mean_reward": float(np.mean([t.reward for t in group])),
                "mean_length": float(np.mean([t.length for t in group])),
                "mean_selected_contexts": mean_selected,
                "updated": updated,
                "loss": loss_value,
            }
        )
        for traj in group:
            records.append(trajectory_record(traj))
            traj.release_graph()
        consumed += len(group)

        if checkpoint_dir and tconfig.checkpoint_every and (
            (batch_index + 1) % tconfig.checkpoint_every == 0
        ):
            save_params(
                f"{checkpoint_dir}/checkpoint_{batch_index + 1:05d}.json",
                router_params.params(),
            )

    return TrainResult(batches=batches, trajectory_records=records, consumed=consumed)


def _mean_selected(group) -> float:
    counts = [sum(r["mask"]) for t in group for r in t.step_records]
    return float(np.mean(counts)) if counts else 0.0


def trajectory_record(traj: Trajectory) -> dict:
    """JSONL row: per-step routing decisions plus reward fields."""
    return {
        "qid": traj.qid,
        "steps": traj.step_records,
        "final_answer": traj.final_answer,
        "correct": traj.correct,
        "length": traj.length,
        "reward": traj.reward,
        "advantage": traj.advantage,
        "total_prompt_tokens": traj.total_prompt_tokens,
    }
