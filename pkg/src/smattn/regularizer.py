"""Continuous-time regularizer: event log-likelihood minus the compensator integral.

    R(u) = sum_j log lambda_{k_j}(t_j | H_j) - integral_{t_1}^{t_L} lambda(t) dt

where lambda(t) sums the intensities of all heads. The integral is
approximated per inter-event interval, either by Monte Carlo with N uniform
draws per interval or by the trapezoid rule on event-time intensities.

Every function here works on padded batches and returns per-user values;
the single-sequence helpers wrap a batch of one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EventSequence
from .errors import ConfigError, NumericError
from .model import Batch
from .ranking import bce_from_logits, sample_position_negatives

log = logging.getLogger(__name__)

INTEGRATORS = ("trapezoid", "monte_carlo")


@dataclass
class IntegratorConfig:
    method: str = "trapezoid"
    mc_samples: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.method not in INTEGRATORS:
            raise ConfigError(f"integrator must be one of {INTEGRATORS}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")


@dataclass
class RegularizerValue:
    log_likelihood: float
    compensator: float

    @property
    def total(self) -> float:
        return self.log_likelihood - self.compensator


# -- batched building blocks -------------------------------------------------------------

def loglik_terms(event_int: Tensor, heads: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-user sum of log lambda_{k_j}(t_j) over real events: (B,)."""
    lam = ad.take_along_last(event_int, heads[..., None])
    lam = lam.reshape(lam.shape[:-1])
    return (ad.log(lam) * valid.astype(np.float64)).sum(axis=-1)


def trapezoid_terms(times: np.ndarray, totals) -> Tensor:
    """sum_j (t_j - t_{j-1})/2 * (lambda(t_j|H_j) + lambda(t_{j-1}|H_{j-1})) per user.

    `totals` (B, L) holds the all-head intensity at each event time.
    """
    dt = np.diff(times, axis=-1)
    totals = ad.as_tensor(totals)
    return ((totals[:, 1:] + totals[:, :-1]) * (0.5 * dt)).sum(axis=-1)


def mc_terms(times: np.ndarray, sample_totals) -> Tensor:
    """sum_j (t_j - t_{j-1}) * mean_i lambda(v_i | H_j) per user; samples (B, L-1, N)."""
    dt = np.diff(times, axis=-1)
    return (ad.as_tensor(sample_totals).mean(axis=-1) * dt).sum(axis=-1)


def draw_fractions(shape: tuple[int, ...], seed) -> np.ndarray:
    """Uniform positions inside each interval, as fractions of its length."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.random(shape)


def compensator_terms(model, batch: Batch, H, event_int: Tensor, integrator: IntegratorConfig,
                      fractions: np.ndarray | None = None) -> Tensor:
    if batch.times.shape[1] < 2:
        return Tensor(np.zeros(batch.times.shape[0]))
    if integrator.method == "trapezoid":
        return trapezoid_terms(batch.times, event_int.sum(axis=-1))
    if fractions is None:
        Bsz, L = batch.times.shape
        fractions = draw_fractions((Bsz, L - 1, integrator.mc_samples), integrator.seed)
    samples = model.sample_intensities(batch, H, fractions)
    return mc_terms(batch.times, samples.sum(axis=-1))


# -- single-sequence API -----------------------------------------------------------------

def _prepare(seq: EventSequence, model):
    batch = Batch.from_sequences([seq])
    out = model.encode(batch)
    H = out.H if out is not None else None
    return batch, H, model.event_intensities(batch, H)


def event_loglik(seq: EventSequence, model) -> Tensor:
    batch, H, ev = _prepare(seq, model)
    return loglik_terms(ev, model.head_of[batch.items], batch.valid).reshape(())


def integrate_trapezoid(seq: EventSequence, model) -> Tensor:
    if len(seq) < 2:
        log.warning("sequence of length %d has no interval to integrate", len(seq))
        return Tensor(0.0)
    batch, H, ev = _prepare(seq, model)
    return trapezoid_terms(batch.times, ev.sum(axis=-1)).reshape(())


def integrate_mc(seq: EventSequence, model, n_samples: int = 5, seed=0) -> Tensor:
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if len(seq) < 2:
        log.warning("sequence of length %d has no interval to integrate", len(seq))
        return Tensor(0.0)
    batch, H, _ = _prepare(seq, model)
    fractions = draw_fractions((1, len(seq) - 1, n_samples), seed)
    samples = model.sample_intensities(batch, H, fractions)
    return mc_terms(batch.times, samples.sum(axis=-1)).reshape(())


def regularizer(seq: EventSequence, model, integrator: IntegratorConfig | None = None) -> RegularizerValue:
    integrator = integrator or IntegratorConfig()
    ll = float(event_loglik(seq, model).value)
    if integrator.method == "trapezoid":
        comp = integrate_trapezoid(seq, model)
    else:
        comp = integrate_mc(seq, model, integrator.mc_samples, integrator.seed)
    return RegularizerValue(ll, float(ad.value_of(comp)))


# -- training objective --------------------------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    ranking: Tensor
    reg: Tensor | None
    n_predictions: int


def position_logits(model, H: Tensor, event_int: Tensor | None, batch: Batch, negatives: np.ndarray,
                    plain: bool) -> Tensor:
    """Logits for every next-item prediction: position j scores target items[j+1] and its negatives.

    Column 0 is the target. The modulated logit adds log lambda_k(t_{j+1})
    anchored at event j, which is exactly event_int[:, j+1].
    """
    cand = np.concatenate([batch.items[:, 1:, None], negatives], axis=-1)
    z = model.logits(H[:, :-1], cand)
    if plain:
        return z
    lam = ad.take_along_last(event_int[:, 1:], model.head_of[cand])
    return z + ad.log(lam)


def total_loss(
    batch: Batch,
    model,
    gamma: float,
    negatives: np.ndarray,
    integrator: IntegratorConfig | None = None,
    plain: bool = False,
    feasible: np.ndarray | None = None,
    fractions: np.ndarray | None = None,
) -> LossParts:
    """Mean BCE over next-item predictions minus gamma times the batch-mean regularizer.

    `negatives` has shape (B, L-1, C). With gamma == 0 the regularizer is not
    evaluated at all, so the objective is the ranking loss exactly.
    """
    if gamma < 0:
        raise ConfigError("gamma must be >= 0")
    integrator = integrator or IntegratorConfig()
    out = model.encode(batch)
    H = out.H
    need_int = (not plain) or gamma > 0
    event_int = model.event_intensities(batch, H) if need_int else None

    weight = batch.valid[:, 1:].astype(np.float64)
    if feasible is not None:
        weight = weight * feasible
    count = int(weight.sum())
    if count == 0:
        raise ConfigError("batch has no next-item prediction to score")
    per_pos = bce_from_logits(position_logits(model, H, event_int, batch, negatives, plain))
    ranking = (per_pos * weight).sum() / float(count)

    reg = None
    loss = ranking
    if gamma > 0:
        ll = loglik_terms(event_int, model.head_of[batch.items], batch.valid)
        comp = compensator_terms(model, batch, H, event_int, integrator, fractions)
        reg = (ll - comp).mean()
        loss = ranking - gamma * reg
    if not np.isfinite(loss.value):
        raise NumericError("objective is not finite")
    return LossParts(loss, ranking, reg, count)


def batch_negatives(batch: Batch, n_items: int, count: int, rng):
    return sample_position_negatives(batch.items, batch.valid, n_items, count, rng)


# -- base-rate fitting -----------------------------------------------------------------------

def fit_constant_rate(sequences, steps: int = 300, lr: float = 0.05, integrator: IntegratorConfig | None = None,
                      seed: int = 0) -> tuple[float, list[float]]:
    """Maximize the mean regularizer over `sequences` with the modulator readout w frozen at 0.

    Only mu moves (phi stays 1), so every head has the same constant
    intensity softplus(mu). Returns the fitted rate and the objective trace.
    """
    from .model import ModelConfig, SMAttnModel
    from .train import Adam

    integrator = integrator or IntegratorConfig()
    n_items = int(max(int(s.items.max()) for s in sequences)) + 1
    cfg = ModelConfig(n_items=n_items, d_item=4, d_pos=4, d_model=8, groups=(0,) * n_items)
    model = SMAttnModel.initialize(cfg, seed)
    params = dict(model.params)
    params["w"] = Tensor(np.zeros(params["w"].shape), name="w")
    batch = Batch.from_sequences(sequences)
    heads = model.head_of[batch.items]
    # attention parameters are frozen, so the states are computed once off the tape
    H = Tensor(model.encode(batch).H.value)
    opt = Adam(lr)
    trace = []
    for _ in range(steps):
        with ad.Tape() as tape:
            m = model.with_params(params)
            ev = m.event_intensities(batch, H)
            reg = (loglik_terms(ev, heads, batch.valid) - compensator_terms(m, batch, H, ev, integrator)).mean()
            objective = -reg
        grad = tape.gradient(objective, {"mu": params["mu"]})
        params.update(opt.step({"mu": params["mu"]}, grad))
        trace.append(float(reg.value))
    mu = params["mu"].value[0]
    return float(np.logaddexp(0.0, mu)), trace
