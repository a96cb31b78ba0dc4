"""The full model: causal attention encoder, output item embeddings and SMLayer heads.

Parameters live in a flat ``dict[str, Tensor]`` so optimizers, checkpoints
and the gradient checker can treat them uniformly. Sequences are processed
in padded batches; see `Batch`.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import smlayer
from .attention import AttentionOutput, causal_attention, embed, positional_encoding
from .autodiff import Tensor
from .data import EventSequence
from .errors import ConfigError

MODULATION_MODES = ("learned", "constant")


@dataclass
class ModelConfig:
    n_items: int
    d_item: int = 24
    d_pos: int = 26
    d_model: int = 50
    d_mod: int | None = None
    groups: tuple[int, ...] | None = None
    blocks: int = 1
    residual: bool = False
    qkv_bias: bool = False
    pe_convention: str = "position"
    modulation: str = "learned"
    constant_intensity: float = 1.0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.groups is not None:
            self.groups = tuple(int(g) for g in self.groups)
            if len(self.groups) != self.n_items:
                raise ConfigError("group map length must equal n_items")
        if self.modulation not in MODULATION_MODES:
            raise ConfigError(f"modulation must be one of {MODULATION_MODES}")
        if self.d_pos % 2:
            raise ConfigError("d_pos must be even")
        if self.residual and self.d_item + self.d_pos != self.d_model:
            raise ConfigError("residual connections need d_item + d_pos == d_model")
        if self.constant_intensity <= 0:
            raise ConfigError("constant_intensity must be positive")

    @property
    def n_heads(self) -> int:
        return self.n_items if self.groups is None else max(self.groups) + 1

    @property
    def feature_width(self) -> int:
        return self.d_mod or self.d_model

    @property
    def head_of(self) -> np.ndarray:
        if self.groups is None:
            return np.arange(self.n_items)
        return np.asarray(self.groups, dtype=np.intp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = None if self.groups is None else list(self.groups)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if d.get("groups") is not None:
            d["groups"] = tuple(d["groups"])
        return cls(**d)


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter, so adding or removing a parameter group never
    # shifts the initial values of the others
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    d_in = cfg.d_item + cfg.d_pos
    d, dg, K = cfg.d_model, cfg.feature_width, cfg.n_heads
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "Y": ((cfg.n_items, cfg.d_item), "normal"),
        "B": ((cfg.n_items, d), "normal"),
    }
    for b in range(cfg.blocks):
        pre = "" if b == 0 else f"block{b}."
        width = d_in if b == 0 else d
        for w in ("Wq", "Wk", "Wv"):
            shapes[pre + w] = ((width, d), "fan_in")
        if cfg.qkv_bias:
            for w in ("bq", "bk", "bv"):
                shapes[pre + w] = ((d,), "zeros")
    shapes.update({
        "WG": ((K, dg, d), "uniform"),
        "bG": ((K, dg), "uniform"),
        "w": ((K, dg), "uniform"),
        "mu": ((K,), "zeros"),
        "log_phi": ((K,), "zeros"),
    })
    params = {}
    for name, (shape, kind) in shapes.items():
        rng = _rng_for(seed, name)
        if kind == "normal":
            value = rng.normal(0.0, cfg.init_scale, shape)
        elif kind == "fan_in":
            value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        elif kind == "uniform":
            value = rng.uniform(-0.1, 0.1, shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


@dataclass
class Batch:
    """Right-padded stack of sequences.

    Padding repeats the last real time (zero-length intervals) and item 0;
    `valid` marks real events.
    """

    items: np.ndarray
    times: np.ndarray
    valid: np.ndarray
    users: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def from_sequences(cls, seqs: Sequence[EventSequence]) -> "Batch":
        L = max(len(s) for s in seqs)
        items = np.zeros((len(seqs), L), dtype=np.intp)
        times = np.zeros((len(seqs), L))
        valid = np.zeros((len(seqs), L), dtype=bool)
        for b, s in enumerate(seqs):
            n = len(s)
            items[b, :n] = s.items
            times[b, :n] = s.times
            times[b, n:] = s.times[-1]
            valid[b, :n] = True
        return cls(items, times, valid, tuple(s.user_id for s in seqs))

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)


class SMAttnModel:
    def __init__(self, cfg: ModelConfig, params: Mapping[str, Tensor]):
        self.cfg = cfg
        self.params = dict(params)
        self.head_of = cfg.head_of
        self._pe_cache: dict[int, np.ndarray] = {}

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "SMAttnModel":
        return cls(cfg, init_params(cfg, seed))

    def with_params(self, params: Mapping[str, Tensor]) -> "SMAttnModel":
        m = SMAttnModel(self.cfg, params)
        m._pe_cache = self._pe_cache
        return m

    def pe(self, length: int) -> np.ndarray:
        # tables are cached at a rounded-up length; rows do not depend on it
        size = max(16, 1 << (length - 1).bit_length())
        if size not in self._pe_cache:
            self._pe_cache[size] = positional_encoding(size, self.cfg.d_pos, self.cfg.pe_convention)
        return self._pe_cache[size][:length]

    # -- encoder -----------------------------------------------------------------

    def encode(self, batch: Batch) -> AttentionOutput:
        X = embed(batch.items, self.params["Y"], self.pe(batch.items.shape[-1]))
        out = None
        for b in range(self.cfg.blocks):
            pre = "" if b == 0 else f"block{b}."
            out = causal_attention(X, self.params, batch.valid, prefix=pre)
            X = out.H + X if self.cfg.residual else out.H
        return AttentionOutput(X, out.P)

    # -- intensities ---------------------------------------------------------------

    def head_intensities(self, h, elapsed) -> Tensor:
        if self.cfg.modulation == "constant":
            shape = np.broadcast_shapes(ad.value_of(h).shape[:-1], np.shape(elapsed))
            return Tensor(np.full(shape + (self.cfg.n_heads,), self.cfg.constant_intensity))
        return smlayer.head_intensities(h, elapsed, self.params)

    def event_intensities(self, batch: Batch, H: Tensor) -> Tensor:
        """lambda_k(t_j | events before j) for every position j and head k: (B, L, K).

        Position 0 has an empty history: zero representation, zero elapsed time.
        """
        Bsz, L, d = H.shape
        prev = ad.concat([Tensor(np.zeros((Bsz, 1, d))), H[:, :-1]], axis=1)
        elapsed = np.concatenate([np.zeros((Bsz, 1)), np.diff(batch.times, axis=1)], axis=1)
        return self.head_intensities(prev, elapsed)

    def sample_intensities(self, batch: Batch, H: Tensor, fractions: np.ndarray) -> Tensor:
        """lambda_k at v = t_{j-1} + u (t_j - t_{j-1}) anchored at event j-1: (B, L-1, N, K)."""
        Bsz, L, d = H.shape
        anchors = H[:, :-1].reshape(Bsz, L - 1, 1, d)
        elapsed = fractions * np.diff(batch.times, axis=1)[..., None]
        return self.head_intensities(anchors, elapsed)

    # -- scoring ---------------------------------------------------------------------

    def logits(self, h: Tensor, candidates: np.ndarray) -> Tensor:
        """h . B_k for candidate items; h (..., d), candidates (..., C) -> (..., C)."""
        Bk = ad.take_rows(self.params["B"], candidates)
        return (Bk * h.reshape(h.shape[:-1] + (1, h.shape[-1]))).sum(axis=-1)

    def last_states(self, contexts: Sequence[EventSequence]) -> tuple[np.ndarray, np.ndarray, AttentionOutput, Batch]:
        batch = Batch.from_sequences(contexts)
        out = self.encode(batch)
        last = batch.lengths - 1
        rows = np.arange(len(contexts))
        return out.H.value[rows, last], batch.times[rows, last], out, batch

    def catalog_scores(
        self, contexts: Sequence[EventSequence], t_query: Sequence[float], plain: bool = False,
        candidates: np.ndarray | None = None,
    ) -> np.ndarray:
        """Modulated scores p_k * lambda_k at each context's query time.

        Returns (users, n_items) or (users, C) for explicit per-user
        candidate lists. p_k is the softmax over the scored candidates.
        """
        h, t_last, _, _ = self.last_states(contexts)
        t_query = np.asarray(t_query, dtype=np.float64)
        if np.any(t_query < t_last):
            raise ConfigError("query time precedes the last context event")
        if candidates is None:
            candidates = np.broadcast_to(np.arange(self.cfg.n_items), (len(contexts), self.cfg.n_items))
        candidates = np.asarray(candidates, dtype=np.intp)
        z = self.logits(Tensor(h), candidates).value
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p = p / p.sum(axis=-1, keepdims=True)
        if plain:
            return p
        lam = self.head_intensities(h, t_query - t_last).value
        return p * np.take_along_axis(lam, self.head_of[candidates], axis=-1)

    def intensity_grid(self, seq: EventSequence, grid, strict: bool = False) -> np.ndarray:
        """Per-head intensities along a time grid for one sequence: (len(grid), K)."""
        out = self.encode(Batch.from_sequences([seq]))
        H = out.H.value[0]
        if self.cfg.modulation == "constant":
            return np.full((len(grid), self.cfg.n_heads), self.cfg.constant_intensity)
        return smlayer.intensity_matrix(H, seq.times, self.params, grid, strict=strict)
