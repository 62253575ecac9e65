"""The learnable routing policy.

Three stages per step: contextual encoding of the tagged input sequence by a
small transformer encoder (full attention, pre-norm residual blocks, learned
positional embeddings), agent selection by normalized inner-product scores
against the agent-select token, and context gating by scaled cosine
similarity against the context-select token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import (
    HIST,
    NAP,
    NCS,
    ROLE,
    InputSequence,
    ProjectionSet,
    Slot,
    build_input_sequence,
    embed_text,
    encode_history_entry,
)
from .errors import InputError


@dataclass
class RouterConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    d_ff: int = 256
    alpha: float = 1.5  # normalized score spread for agent selection
    beta: float = 3.0  # cosine scaling before the sigmoid gate
    eta: float = 0.5  # inference gate threshold
    temperature: float = 1.0  # sampling temperature during training
    window_cap: Optional[int] = None  # context limited to the newest k responses
    embed_dim: int = 384
    encoder: str = "hash"
    max_roles: int = 16
    max_steps: int = 5
    shared_role_position: bool = False  # all role slots share one position id
    open_gate_init: float = 4.0  # shared-bias norm tying history/context tokens;
    # makes initial gates lean inclusive (0 = neutral start at 0.5)
    tied_projection_init: bool = True  # one shared initial draw for the
    # text-width projections, preserving text similarity across token types

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise InputError("d_model must be divisible by heads")
        if not 0.0 < self.eta < 1.0:
            raise InputError("eta must lie in (0, 1)")
        if self.temperature <= 0.0:
            raise InputError("temperature must be positive")
        if self.window_cap is not None and self.window_cap < 1:
            raise InputError("window_cap must be >= 1 (or null for unlimited)")


class EncoderLayer:
    """Pre-norm transformer block: x + Attn(LN(x)), then x + FF(LN(x)).

    With all block weights at zero the layer is the identity, which keeps the
    residual path auditable.
    """

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.heads = heads
        self.d_head = d_model // heads
        bound = 1.0 / np.sqrt(d_model)

        def w(shape_in, shape_out):
            return Tensor(
                rng.uniform(-bound, bound, size=(shape_in, shape_out)), requires_grad=True
            )

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        self.wq, self.bq = w(d_model, d_model), b(d_model)
        self.wk, self.bk = w(d_model, d_model), b(d_model)
        self.wv, self.bv = w(d_model, d_model), b(d_model)
        self.wo, self.bo = w(d_model, d_model), b(d_model)
        self.ln1_g = Tensor(np.ones(d_model), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d_model), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d_model), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d_model), requires_grad=True)
        bound_ff = 1.0 / np.sqrt(d_ff)
        self.w1, self.b1 = w(d_model, d_ff), b(d_ff)
        self.w2 = Tensor(rng.uniform(-bound_ff, bound_ff, size=(d_ff, d_model)), requires_grad=True)
        self.b2 = b(d_model)

    def params(self, prefix: str) -> dict[str, Tensor]:
        names = (
            "wq bq wk bk wv bv wo bo ln1_g ln1_b ln2_g ln2_b w1 b1 w2 b2"
        ).split()
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def forward(self, x: Tensor) -> Tensor:
        h = ad.layer_norm(x, self.ln1_g, self.ln1_b)
        q = ad.add(ad.matmul(h, self.wq), self.bq)
        k = ad.add(ad.matmul(h, self.wk), self.bk)
        v = ad.add(ad.matmul(h, self.wv), self.bv)
        scale = 1.0 / np.sqrt(self.d_head)
        head_outs = []
        for i in range(self.heads):
            lo, hi = i * self.d_head, (i + 1) * self.d_head
            qh, kh, vh = ad.cols(q, lo, hi), ad.cols(k, lo, hi), ad.cols(v, lo, hi)
            attn = ad.softmax(ad.mul(ad.matmul(qh, ad.transpose(kh)), scale))
            head_outs.append(ad.matmul(attn, vh))
        merged = ad.add(ad.matmul(ad.concat_cols(head_outs), self.wo), self.bo)
        x = ad.add(x, merged)
        h2 = ad.layer_norm(x, self.ln2_g, self.ln2_b)
        ff = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(h2, self.w1), self.b1)), self.w2), self.b2)
        return ad.add(x, ff)


class RouterParams:
    """All learnable state: projections, positional table, encoder stack."""

    def __init__(self, config: RouterConfig, rng: np.random.Generator):
        self.config = config
        self.proj = ProjectionSet(
            config.embed_dim, config.d_model, rng, tied_init=config.tied_projection_init
        )
        if config.open_gate_init > 0.0:
            # Start from an inclusive context policy: history tokens and the
            # context-select token share a bias direction, so initial cosines
            # are positive and gates lean open.  Training prunes from there.
            shared = rng.normal(size=config.d_model)
            shared *= config.open_gate_init / np.linalg.norm(shared)
            self.proj.f_h.b.data[...] = shared
            self.proj.f_ncs.b.data[...] = shared
        if config.shared_role_position:
            n_pos = config.max_steps + 3
        else:
            n_pos = 1 + config.max_roles + (config.max_steps - 1) + 2
        bound = 1.0 / np.sqrt(config.d_model)
        self.pos = Tensor(
            rng.uniform(-bound, bound, size=(n_pos, config.d_model)), requires_grad=True
        )
        self.layers = [
            EncoderLayer(config.d_model, config.heads, config.d_ff, rng)
            for _ in range(config.layers)
        ]

    def params(self) -> dict[str, Tensor]:
        out = dict(self.proj.params())
        out["pos"] = self.pos
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"layer{i}"))
        return out


def position_ids(slots: list[Slot], config: RouterConfig) -> list[int]:
    """Map slots to rows of the positional table.

    Default: plain sequence positions.  With shared_role_position, all role
    slots share one id and history slots are positioned by step index, so
    catalog size does not shift downstream positions.
    """
    if not config.shared_role_position:
        return list(range(len(slots)))
    ids = []
    for slot in slots:
        if slot.kind == ROLE:
            ids.append(1)
        elif slot.kind == HIST:
            ids.append(2 + (slot.index - 1))
        elif slot.kind == NAP:
            ids.append(2 + (config.max_steps - 1))
        elif slot.kind == NCS:
            ids.append(3 + (config.max_steps - 1))
        else:
            ids.append(0)
    return ids


@dataclass
class EncodedSequence:
    slots: list[Slot]
    starred: list[Tensor]  # contextualized token per slot, same length as input

    def token(self, kind: str, index: int = 0) -> Tensor:
        for slot, t in zip(self.slots, self.starred):
            if slot.kind == kind and slot.index == index:
                return t
        raise InputError(f"no slot {kind}({index}) in encoded sequence")

    def role_tokens(self) -> list[Tensor]:
        return [t for slot, t in zip(self.slots, self.starred) if slot.kind == ROLE]

    def hist_tokens(self) -> list[Tensor]:
        return [t for slot, t in zip(self.slots, self.starred) if slot.kind == HIST]


def contextual_encode(params: RouterParams, iseq: InputSequence) -> EncodedSequence:
    """Run the encoder stack over the tagged input; output length equals
    input length and every slot attends to every slot."""
    config = params.config
    ids = position_ids(iseq.slots, config)
    if max(ids) >= params.pos.shape[0]:
        raise InputError(
            f"sequence needs position {max(ids)} but the table has "
            f"{params.pos.shape[0]} rows (check max_roles/max_steps)"
        )
    x = ad.add(ad.stack(iseq.tokens), ad.take_rows(params.pos, ids))
    for layer in params.layers:
        x = layer.forward(x)
    starred = [ad.row(x, i) for i in range(len(iseq.tokens))]
    return EncodedSequence(iseq.slots, starred)


def normalize_scores(raw: Tensor, alpha: float) -> tuple[Tensor, bool]:
    """Center raw scores and rescale to population std alpha.

    Returns (scores, degenerate).  Degenerate (all raw scores equal) yields
    all-zero scores, which downstream turns into a uniform choice.  A single
    candidate skips normalization and scores [0].
    """
    n = raw.data.size
    if n == 1:
        return Tensor([0.0]), False
    sigma = float(raw.data.std())
    if sigma < 1e-12:
        return Tensor(np.zeros(n)), True
    mu = ad.mean(raw)
    centered = ad.sub(raw, mu)
    var = ad.mean(ad.mul(centered, centered))
    scores = ad.mul(ad.mul(centered, ad.pow_const(var, -0.5)), alpha)
    return scores, False


def nap_scores(encoded: EncodedSequence, alpha: float) -> tuple[Tensor, bool]:
    """Inner-product compatibility of the agent-select token with each role
    token, normalized to zero mean and std alpha."""
    t_nap = encoded.token(NAP)
    roles = encoded.role_tokens()
    if not roles:
        raise InputError("no role slots present")
    raw = ad.stack([ad.dot(t_nap, r) for r in roles])
    return normalize_scores(raw, alpha)


def select_agent_inference(scores) -> int:
    """Highest score wins; ties break to the lowest index."""
    values = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if values.size == 0:
        raise InputError("empty score vector")
    return int(np.argmax(values))


def select_agent_training(
    scores: Tensor,
    temperature: float,
    rng: np.random.Generator,
    noise: Optional[np.ndarray] = None,
) -> tuple[int, Tensor]:
    """Gumbel-max sample over scores/temperature.

    Equivalent to sampling from softmax(scores/temperature); returns the
    sampled index and its differentiable log-probability.  `noise` overrides
    the Gumbel draw (zero noise reduces to argmax), for tests.
    """
    scaled = ad.mul(scores, 1.0 / temperature)
    if noise is None:
        noise = rng.gumbel(size=scores.data.size)
    k = int(np.argmax(scaled.data + noise))
    logprob = ad.element(ad.log_softmax(scaled), k)
    return k, logprob


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    na, nb = ad.dot(a, a), ad.dot(b, b)
    if na.data == 0.0 or nb.data == 0.0:
        raise ad.ContractError("cosine of a zero-norm vector")
    return ad.mul(ad.dot(a, b), ad.pow_const(ad.mul(na, nb), -0.5))


def ncs_gates(encoded: EncodedSequence, beta: float) -> list[Tensor]:
    """Sigmoid(beta * cosine) gate for each history token; empty history
    yields an empty list.  Each gate lies strictly inside (0, 1)."""
    t_ncs = encoded.token(NCS)
    return [ad.sigmoid(ad.mul(_cosine(t_ncs, h), beta)) for h in encoded.hist_tokens()]


def _in_window(length: int, window_cap: Optional[int]) -> np.ndarray:
    keep = np.ones(length, dtype=bool)
    if window_cap is not None and length > window_cap:
        keep[: length - window_cap] = False
    return keep


def select_context_inference(
    gate_values: np.ndarray, eta: float, window_cap: Optional[int] = None
) -> np.ndarray:
    """mask[j] = gate >= eta, restricted to the newest window_cap entries."""
    g = np.asarray(gate_values, dtype=np.float64)
    return (g >= eta) & _in_window(g.size, window_cap)


def select_context_training(
    gates: list[Tensor],
    rng: np.random.Generator,
    window_cap: Optional[int] = None,
) -> tuple[np.ndarray, Tensor]:
    """Bernoulli(g_j) mask over in-window entries plus its differentiable
    log-probability; out-of-window entries are forced off and excluded."""
    length = len(gates)
    window = _in_window(length, window_cap)
    mask = np.zeros(length, dtype=bool)
    logprob = Tensor(0.0)
    for j, g in enumerate(gates):
        if not window[j]:
            continue
        include = bool(rng.random() < float(g.data))
        mask[j] = include
        term = ad.log(g) if include else ad.log(ad.add(ad.mul(g, -1.0), 1.0))
        logprob = ad.add(logprob, term)
    return mask, logprob


@dataclass
class StepDecision:
    """One routing step: the chosen role, score/gate values, the applied
    context mask, and (in training mode) differentiable log-prob nodes."""

    role_index: int
    scores: np.ndarray
    gates: np.ndarray
    mask: np.ndarray
    nap_logprob: Optional[Tensor] = None
    ncs_logprob: Optional[Tensor] = None
    gate_nodes: Optional[list[Tensor]] = None
    degenerate_scores: bool = False
    forced: bool = False


class RouterPolicy:
    """Learned policy: encode, score roles, gate history."""

    name = "learned"

    def __init__(self, params: RouterParams, encoder, config: Optional[RouterConfig] = None):
        self.params = params
        self.encoder = encoder
        self.config = config or params.config

    def decide(
        self,
        query: str,
        catalog,
        history,
        mode: str,
        rng: np.random.Generator,
        force_role: Optional[int] = None,
    ) -> StepDecision:
        cfg = self.config
        if len(catalog) > cfg.max_roles:
            raise InputError(f"catalog has {len(catalog)} roles; max_roles={cfg.max_roles}")
        q = embed_text(self.encoder, query)
        role_embs = [embed_text(self.encoder, role.role_prompt) for role in catalog]
        hist_embs = [encode_history_entry(h) for h in history]
        iseq = build_input_sequence(q, role_embs, hist_embs, self.params.proj)
        encoded = contextual_encode(self.params, iseq)

        scores, degenerate = nap_scores(encoded, cfg.alpha)
        nap_lp = None
        if force_role is not None:
            k, forced = force_role, True
        elif mode == "train":
            k, nap_lp = select_agent_training(scores, cfg.temperature, rng)
            forced = False
        else:
            k, forced = select_agent_inference(scores), False

        gates = ncs_gates(encoded, cfg.beta)
        gate_values = np.array([float(g.data) for g in gates])
        if mode == "train":
            mask, ncs_lp = select_context_training(gates, rng, cfg.window_cap)
            return StepDecision(
                k, scores.data.copy(), gate_values, mask,
                nap_logprob=nap_lp, ncs_logprob=ncs_lp, gate_nodes=gates,
                degenerate_scores=degenerate, forced=forced,
            )
        mask = select_context_inference(gate_values, cfg.eta, cfg.window_cap)
        return StepDecision(
            k, scores.data.copy(), gate_values, mask,
            degenerate_scores=degenerate, forced=forced,
        )
