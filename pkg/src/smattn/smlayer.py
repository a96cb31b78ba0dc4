"""Self-modulating layer: time-aware conditional intensities per item (or group) head.

For head k, anchored at the representation h(t_j) of the latest event:

    g_k(t)      = tanh(W^G_k h(t_j) + b^G_k (t - t_j))
    lambda_k(t) = phi_k * log(1 + exp((w_k . g_k(t) + mu_k) / phi_k))

Parameter layout (K heads, feature width d_g, representation width d)::

    WG (K, d_g, d)   bG (K, d_g)   w (K, d_g)   mu (K,)   log_phi (K,)

phi_k is stored through its logarithm so it stays positive under gradient steps.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, TemporalOrderError

MODULATOR_KEYS = ("WG", "bG", "w", "mu", "log_phi")


def modulator_features(h, elapsed, params: Mapping[str, Tensor]) -> Tensor:
    """g for every head at once.

    `h` has shape (..., d); `elapsed` must broadcast against ``h.shape[:-1]``
    (a trailing sample axis is allowed when h carries a matching singleton).
    Returns (..., K, d_g).
    """
    WG = params["WG"]
    K, dg, d = WG.shape
    h = ad.as_tensor(h)
    lead = h.shape[:-1]
    A = (h.reshape(-1, d) @ WG.reshape(K * dg, d).T).reshape(lead + (K, dg))
    elapsed = np.asarray(elapsed, dtype=np.float64)
    return ad.tanh(A + params["bG"] * elapsed[..., None, None])


def head_intensities(h, elapsed, params: Mapping[str, Tensor]) -> Tensor:
    """lambda_k for all heads, shape (..., K)."""
    g = modulator_features(h, elapsed, params)
    pre = (g * params["w"]).sum(axis=-1) + params["mu"]
    return ad.scaled_softplus(pre, ad.exp(params["log_phi"]))


def _single_head(params: Mapping[str, Tensor], k: int) -> dict[str, Tensor]:
    K = params["WG"].shape[0]
    if not 0 <= k < K:
        raise ConfigError(f"head {k} outside [0, {K})")
    sl = slice(k, k + 1)
    return {name: params[name][sl] for name in MODULATOR_KEYS}


def modulator_features_at(h_j, t: float, t_j: float, params, k: int) -> Tensor:
    """g_k(t) for a single head anchored at (h_j, t_j); returns a d_g vector."""
    if t < t_j:
        raise TemporalOrderError(f"query time {t} precedes anchor time {t_j}")
    g = modulator_features(h_j, t - t_j, _single_head(params, k))
    return g.reshape(g.shape[-1])


def intensity(h_j, t: float, t_j: float, params, k: int) -> Tensor:
    if t < t_j:
        raise TemporalOrderError(f"query time {t} precedes anchor time {t_j}")
    lam = head_intensities(h_j, t - t_j, _single_head(params, k))
    return lam.reshape(())


def modulated_scores(
    h_last,
    t_last: float,
    t_query: float,
    params: Mapping[str, Tensor],
    candidates: Sequence[int],
    head_of: np.ndarray | None = None,
    plain: bool = False,
    constant_intensity: float | None = None,
) -> Tensor:
    """score_k = p_k * lambda_k(t_query) over a candidate set.

    p is the softmax over candidates of h(t_L) . B_k with B the output item
    embeddings (``params["B"]``, one row per item). `plain` drops the
    intensity factor; `constant_intensity` replaces every lambda_k by one
    shared constant.
    """
    cand = np.asarray(candidates, dtype=np.intp)
    if cand.size == 0:
        raise ConfigError("empty candidate set")
    if t_query < t_last:
        raise TemporalOrderError(f"query time {t_query} precedes last event {t_last}")
    h = ad.as_tensor(h_last).reshape(1, -1)
    z = (ad.take_rows(params["B"], cand) @ h.T).reshape(1, cand.size)
    p = ad.masked_softmax_rows(z, np.ones(z.shape, dtype=bool)).reshape(cand.size)
    if plain:
        return p
    if constant_intensity is not None:
        return p * float(constant_intensity)
    head_of = np.arange(params["WG"].shape[0]) if head_of is None else np.asarray(head_of)
    lam = head_intensities(h.reshape(-1), t_query - t_last, params)
    return p * ad.take_rows(lam, head_of[cand])


def anchors_for(times: np.ndarray, grid: np.ndarray, strict: bool = False) -> np.ndarray:
    """Index of the latest event <= t (or < t when `strict`); -1 means empty history."""
    side = "left" if strict else "right"
    return np.searchsorted(times, grid, side=side) - 1


def intensity_matrix(
    H, times: np.ndarray, params: Mapping[str, Tensor], grid, heads: Sequence[int] | None = None,
    strict: bool = False,
) -> np.ndarray:
    """lambda_k(grid_g | history) for every grid time, shape (len(grid), len(heads)).

    Each grid time is anchored at the latest event at or before it; with
    `strict` the anchor must lie strictly before, and an empty history uses a
    zero representation with zero elapsed time.
    """
    times = np.asarray(times, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size and grid.min() < times[0]:
        raise DomainError("grid starts before the first event")
    Hv = ad.value_of(H)
    anchor = anchors_for(times, grid, strict)
    reps = np.where(anchor[:, None] >= 0, Hv[np.maximum(anchor, 0)], 0.0)
    elapsed = np.where(anchor >= 0, grid - times[np.maximum(anchor, 0)], 0.0)
    lam = head_intensities(reps, elapsed, params).value
    if heads is not None:
        lam = lam[:, np.asarray(heads, dtype=np.intp)]
    return lam
