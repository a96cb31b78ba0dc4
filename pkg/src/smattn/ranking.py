"""Ranking loss, negative sampling, candidate ranking and top-K metrics."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EventSequence
from .errors import ConfigError, SamplingError
from .model import Batch


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def bce_from_logits(logits) -> Tensor:
    """-log s(x_0) - sum_c log(1 - s(x_c)) over the last axis; column 0 is the positive."""
    logits = ad.as_tensor(logits)
    sign = np.ones(logits.shape[-1])
    sign[0] = -1.0
    # -log sigmoid(x) = softplus(-x), -log(1 - sigmoid(x)) = softplus(x)
    return ad.scaled_softplus(logits * sign, 1.0).sum(axis=-1)


def ranking_loss(context: EventSequence, target: int, negatives: Sequence[int], model, t_query: float,
                 plain: bool = False) -> Tensor:
    """Binary cross-entropy of one next-item prediction at `t_query`.

    The modulated logit of candidate k is h(t_L) . B_k + log lambda_k(t_query),
    whose ordering matches the modulated score p_k * lambda_k. With `plain`
    the intensity term is dropped.
    """
    negatives = [int(x) for x in negatives]
    if int(target) in negatives:
        raise ConfigError("target item appears among the negatives")
    batch = Batch.from_sequences([context])
    out = model.encode(batch)
    L = len(context)
    h = out.H[0, L - 1]
    cand = np.array([int(target)] + negatives, dtype=np.intp)
    z = model.logits(h, cand)
    if not plain:
        lam = model.head_intensities(h, t_query - float(context.times[-1]))
        z = z + ad.log(ad.take_rows(lam, model.head_of[cand]))
    return bce_from_logits(z)


def sample_negatives(n_items: int, exclude: Iterable[int], count: int, seed=None) -> list[int]:
    """Uniform draw without replacement from items outside `exclude`."""
    exclude = set(int(x) for x in exclude)
    eligible = np.array([k for k in range(n_items) if k not in exclude], dtype=np.int64)
    if count < 0 or count > eligible.size:
        raise SamplingError(f"cannot draw {count} negatives from {eligible.size} eligible items")
    if count == 0:
        return []
    return [int(x) for x in _rng(seed).choice(eligible, size=count, replace=False)]


def sample_position_negatives(items: np.ndarray, valid: np.ndarray, n_items: int, count: int, rng):
    """Negatives for every next-item target of a padded batch.

    For target position j+1 the excluded set is the prefix up to j plus the
    target itself. Returns (negatives (B, L-1, count), feasible (B, L-1)).
    """
    rng = _rng(rng)
    Bsz, L = items.shape
    onehot = np.zeros((Bsz, L, n_items), dtype=np.int32)
    np.put_along_axis(onehot, items[..., None], valid[..., None].astype(np.int32), axis=-1)
    seen = np.cumsum(onehot, axis=1) > 0
    excluded = seen[:, 1:]
    keys = rng.random((Bsz, L - 1, n_items))
    keys[excluded] = np.inf
    negs = np.argsort(keys, axis=-1, kind="stable")[..., :count]
    feasible = (~excluded).sum(axis=-1) >= count
    return negs, feasible


def rank_candidates(scores, candidates) -> list[int]:
    """Candidates by descending score; ties go to the smaller item index."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ConfigError("empty candidate set")
    order = np.lexsort((candidates, -scores))
    return [int(c) for c in candidates[order]]


def rank_of_target(scores, candidates, target: int) -> int:
    """1-based rank of `target` under the `rank_candidates` ordering, without sorting."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.int64)
    pos = np.flatnonzero(candidates == target)
    if pos.size != 1:
        raise ConfigError("target must appear exactly once among the candidates")
    s = scores[pos[0]]
    ahead = (scores > s) | ((scores == s) & (candidates < target))
    return int(ahead.sum()) + 1


def hit_rate_at_k(rank: int, k: int = 10) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int = 10) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0
