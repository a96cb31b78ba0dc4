"""Item embedding, positional encoding and masked causal self-attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, VocabularyError

PE_CONVENTIONS = ("position", "dimension")


def positional_encoding(length: int, d_pe: int, convention: str = "position") -> np.ndarray:
    """Sinusoidal table of shape (length, d_pe).

    With ``convention="position"`` the sin/cos choice follows the parity of
    the position index i (rows alternate between all-sine and all-cosine);
    ``"dimension"`` is the usual transformer layout where parity of the
    feature index decides.
    """
    if convention not in PE_CONVENTIONS:
        raise ConfigError(f"unknown positional-encoding convention {convention!r}")
    if d_pe % 2 or d_pe <= 0:
        raise ConfigError(f"positional-encoding width must be a positive even number, got {d_pe}")
    if length < 1:
        raise ConfigError("positional encoding needs length >= 1")
    i = np.arange(length, dtype=np.float64)[:, None]
    j = np.arange(d_pe, dtype=np.float64)[None, :]
    sin_part = np.sin(i / 10000.0 ** (j / d_pe))
    cos_part = np.cos(i / 10000.0 ** ((j - 1.0) / d_pe))
    parity = i if convention == "position" else j
    return np.where(parity % 2 == 0, sin_part, cos_part)


def embed(items, table: Tensor, Z: np.ndarray) -> Tensor:
    """Rows ``concat(table[items[j]], Z[j])``; `items` may carry a leading batch axis."""
    items = np.asarray(items, dtype=np.intp)
    n = table.shape[0]
    if items.size and (items.min() < 0 or items.max() >= n):
        raise VocabularyError(f"item index outside embedding table of {n} rows")
    L = items.shape[-1]
    Y = ad.take_rows(table, items)
    Zb = np.broadcast_to(Z[:L], items.shape + (Z.shape[1],))
    return ad.concat([Y, Zb], axis=-1)


@dataclass
class AttentionOutput:
    H: Tensor  # (..., L, d), row j = h(t_j)
    P: Tensor  # (..., L, L), lower-triangular row-stochastic


def causal_mask(length: int, key_valid: np.ndarray | None = None) -> np.ndarray:
    mask = np.tril(np.ones((length, length), dtype=bool))
    if key_valid is not None:
        mask = mask & np.asarray(key_valid, dtype=bool)[..., None, :]
    return mask


def causal_attention(
    X: Tensor, params: Mapping[str, Tensor], key_valid: np.ndarray | None = None, prefix: str = ""
) -> AttentionOutput:
    """Single-head scaled dot-product attention with the future masked out.

    `key_valid` (batch, L) marks padding when sequences of unequal length are
    stacked; padding only ever sits after the last real event.
    """
    Q = X @ params[prefix + "Wq"]
    K = X @ params[prefix + "Wk"]
    V = X @ params[prefix + "Wv"]
    if prefix + "bq" in params:
        Q = Q + params[prefix + "bq"]
        K = K + params[prefix + "bk"]
        V = V + params[prefix + "bv"]
    d = Q.shape[-1]
    scores = (Q @ K.T) / np.sqrt(d)
    P = ad.masked_softmax_rows(scores, causal_mask(X.shape[-2], key_valid))
    return AttentionOutput(P @ V, P)
