"""Text embedding and projection into the router's input sequence.

The router consumes a tagged token sequence

    [query, role_1..role_N, hist_1..hist_{t-1}, agent-select token,
     context-select token]

where every token is an affine projection of a fixed-width text embedding.
The two trailing tokens are derived from the query embedding so that both
selection heads are conditioned on the task.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError

DEFAULT_EMBED_DIM = 384

# slot kinds
QUERY = "query"
ROLE = "role"
HIST = "hist"
NAP = "nap"
NCS = "ncs"


@dataclass(frozen=True)
class Slot:
    """Tag for one position of the router input: kind plus the role catalog
    index (0-based) or history step (1-based)."""

    kind: str
    index: int = 0


class TextEncoder(ABC):
    """Deterministic text -> unit-norm float64 vector of width output_dim.

    Implementations must be safe for concurrent read-only use.
    """

    output_dim: int

    @abstractmethod
    def encode(self, text: str) -> np.ndarray:
        ...


class HashingTrigramEncoder(TextEncoder):
    """Feature-hashed bag of character trigrams, L2-normalized.

    Fully deterministic across processes (blake2b, not Python's salted hash)
    and dependency-free, so tests and offline runs need no external model.
    Encodings are cached per instance; cached arrays are read-only views.
    """

    def __init__(self, output_dim: int = DEFAULT_EMBED_DIM):
        if output_dim < 1:
            raise InputError("output_dim must be positive")
        self.output_dim = output_dim
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        padded = f"^^{text}$$"
        vec = np.zeros(self.output_dim)
        for i in range(len(padded) - 2):
            h = int.from_bytes(
                hashlib.blake2b(padded[i : i + 3].encode("utf-8"), digest_size=8).digest(),
                "little",
            )
            sign = 1.0 if h & (1 << 63) else -1.0
            vec[h % self.output_dim] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:  # only reachable through exact sign cancellation
            vec[0] = 1.0
            norm = 1.0
        vec /= norm
        vec.setflags(write=False)
        self._cache[text] = vec
        return vec


class CallableEncoder(TextEncoder):
    """Adapter putting any external sentence-embedding service behind the
    TextEncoder interface.  The wrapped callable maps text to a vector; the
    adapter enforces width and L2 normalization."""

    def __init__(self, fn, output_dim: int = DEFAULT_EMBED_DIM):
        self.output_dim = output_dim
        self._fn = fn
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        vec = np.asarray(self._fn(text), dtype=np.float64).reshape(-1)
        if vec.shape != (self.output_dim,):
            raise InputError(
                f"embedding service returned width {vec.shape}, expected {self.output_dim}"
            )
        norm = np.linalg.norm(vec)
        if norm == 0.0 or not np.isfinite(norm):
            raise InputError("embedding service returned a zero or non-finite vector")
        vec = vec / norm
        vec.setflags(write=False)
        self._cache[text] = vec
        return vec


_ENCODERS = {"hash": HashingTrigramEncoder}


def register_encoder(name: str, factory) -> None:
    _ENCODERS[name] = factory


def make_encoder(name: str, output_dim: int = DEFAULT_EMBED_DIM) -> TextEncoder:
    try:
        factory = _ENCODERS[name]
    except KeyError:
        raise InputError(f"unknown encoder {name!r}; known: {sorted(_ENCODERS)}")
    return factory(output_dim)


def embed_text(encoder: TextEncoder, text: str) -> np.ndarray:
    """Encode one text, enforcing the non-empty and unit-norm contracts."""
    if not text or not text.strip():
        raise InputError("cannot embed empty text")
    vec = encoder.encode(text)
    if vec.shape != (encoder.output_dim,):
        raise InputError("encoder violated its output_dim contract")
    return vec


def encode_history_entry(entry) -> np.ndarray:
    """Concatenate a history entry's role embedding with its response
    embedding (width 2 * output_dim)."""
    if entry.response_text is None or entry.response_embedding is None:
        raise InputError(f"history step {entry.step} is missing its response")
    return np.concatenate([entry.role_embedding, entry.response_embedding])


class Affine:
    """One learnable linear projection (weight [d_in, d_out] plus bias)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.w = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, size=d_out), requires_grad=True)

    def __call__(self, vec: np.ndarray) -> Tensor:
        x = Tensor(vec[None, :])
        return ad.row(ad.add(ad.matmul(x, self.w), self.b), 0)


class ProjectionSet:
    """The five input projections: query, roles, history (double width),
    and the two query-derived selection tokens.

    With tied_init the text-width projections (and the role half of the
    history projection) start from one shared weight draw, so text
    similarity carries across token types at initialization; training
    specializes them from there.
    """

    def __init__(
        self,
        embed_dim: int,
        d_model: int,
        rng: np.random.Generator,
        tied_init: bool = True,
    ):
        self.embed_dim = embed_dim
        self.d_model = d_model
        self.f_q = Affine(embed_dim, d_model, rng)
        self.f_r = Affine(embed_dim, d_model, rng)
        self.f_h = Affine(2 * embed_dim, d_model, rng)
        self.f_nap = Affine(embed_dim, d_model, rng)
        self.f_ncs = Affine(embed_dim, d_model, rng)
        if tied_init:
            shared = self.f_q.w.data
            for aff in (self.f_r, self.f_nap, self.f_ncs):
                aff.w.data[...] = shared
            self.f_h.w.data[:embed_dim] = shared

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name in ("f_q", "f_r", "f_h", "f_nap", "f_ncs"):
            aff = getattr(self, name)
            out[f"proj.{name}.w"] = aff.w
            out[f"proj.{name}.b"] = aff.b
        return out


@dataclass
class InputSequence:
    slots: list[Slot]
    tokens: list[Tensor]  # each of width d_model

    def __len__(self):
        return len(self.tokens)


def build_input_sequence(
    query_emb: np.ndarray,
    role_embs: list[np.ndarray],
    hist_embs: list[np.ndarray],
    proj: ProjectionSet,
) -> InputSequence:
    """Assemble the tagged router input for step t = len(hist_embs) + 1.

    Order is fixed: query, the N roles in catalog order, history in step
    order, then the agent-select and context-select tokens (both projected
    from the query embedding alone).
    """
    if not role_embs:
        raise InputError("need at least one candidate role")
    slots = [Slot(QUERY)]
    tokens = [proj.f_q(query_emb)]
    for i, r in enumerate(role_embs):
        slots.append(Slot(ROLE, i))
        tokens.append(proj.f_r(r))
    for j, h in enumerate(hist_embs, start=1):
        slots.append(Slot(HIST, j))
        tokens.append(proj.f_h(h))
    slots.append(Slot(NAP))
    tokens.append(proj.f_nap(query_emb))
    slots.append(Slot(NCS))
    tokens.append(proj.f_ncs(query_emb))
    return InputSequence(slots, tokens)
