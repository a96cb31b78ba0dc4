"""Training loop, strong-generalization evaluation and the three-arm ablation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .data import EventSequence, Holdout, SplitPlan, split_strong_generalization
from .errors import ConfigError, NumericError
from .model import Batch, ModelConfig, SMAttnModel
from .ranking import hit_rate_at_k, ndcg_at_k, rank_of_target, sample_negatives
from .regularizer import IntegratorConfig, batch_negatives, draw_fractions, total_loss

log = logging.getLogger(__name__)

ARMS = ("origin", "smlayer", "smlayer+ctreg")
ARM_LABELS = {"origin": "origin", "smlayer": "+SMLayer", "smlayer+ctreg": "+SMLayer+CTReg"}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    negatives: int = 1
    gamma: float = 1e-5
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    arm: str = "smlayer+ctreg"
    seed: int = 0
    eval_k: int = 10
    select_best: bool = True

    def __post_init__(self):
        if isinstance(self.integrator, dict):
            self.integrator = IntegratorConfig(**self.integrator)
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}")
        if self.batch_size < 1 or self.epochs < 0 or self.negatives < 1:
            raise ConfigError("batch_size and negatives must be >= 1, epochs >= 0")

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.arm == "smlayer+ctreg" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def arm_model_config(cfg: ModelConfig, arm: str) -> ModelConfig:
    """The origin arm is the same network with every intensity pinned to 1."""
    if arm == "origin":
        return replace(cfg, modulation="constant", constant_intensity=1.0)
    return cfg


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        new = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[name] = Tensor(p.value - upd, requires_grad=True, name=name)
        return new


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        return {k: Tensor(p.value - self.lr * grads[k], requires_grad=True, name=k) for k, p in params.items()}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(cfg.lr)


@dataclass
class MetricsReport:
    hr: float
    ndcg: float
    k: int
    n_users: int
    per_user: list[dict] = field(default_factory=list)
    per_seed: list[dict] = field(default_factory=list)

    def to_dict(self, with_users: bool = False) -> dict:
        d = {"k": self.k, f"HR@{self.k}": self.hr, f"NDCG@{self.k}": self.ndcg,
             "evaluated_users": self.n_users}
        if self.per_seed:
            d["per_seed"] = self.per_seed
        if with_users:
            d["per_user"] = self.per_user
        return d

    def to_text(self) -> str:
        return (f"{'metric':<10}{'value':>10}\n"
                f"{'HR@' + str(self.k):<10}{self.hr:>10.5f}\n"
                f"{'NDCG@' + str(self.k):<10}{self.ndcg:>10.5f}\n"
                f"{'users':<10}{self.n_users:>10d}\n")


def evaluate(
    model: SMAttnModel,
    holdouts: Sequence[Holdout],
    k: int = 10,
    sampled_negatives: int = 0,
    seed: int = 0,
    chunk: int = 256,
) -> MetricsReport:
    """Rank each holdout target at its timestamp against the catalog (or sampled negatives)."""
    if not holdouts:
        raise ConfigError("no holdout users to evaluate")
    hrs, ndcgs, rows = [], [], []
    for start in range(0, len(holdouts), chunk):
        part = holdouts[start:start + chunk]
        contexts = [h.context for h in part]
        tq = [h.target_time for h in part]
        if sampled_negatives:
            cands = []
            for i, h in enumerate(part):
                negs = sample_negatives(model.cfg.n_items, set(h.context.items.tolist()) | {h.target_item},
                                        sampled_negatives, seed=[seed, start + i])
                cands.append([h.target_item] + negs)
            cands = np.asarray(cands)
            scores = model.catalog_scores(contexts, tq, candidates=cands)
        else:
            cands = np.broadcast_to(np.arange(model.cfg.n_items), (len(part), model.cfg.n_items))
            scores = model.catalog_scores(contexts, tq)
        for i, h in enumerate(part):
            r = rank_of_target(scores[i], cands[i], h.target_item)
            hrs.append(hit_rate_at_k(r, k))
            ndcgs.append(ndcg_at_k(r, k))
            rows.append({"user": h.context.user_id, "rank": r})
    return MetricsReport(float(np.mean(hrs)), float(np.mean(ndcgs)), k, len(hrs), rows)


@dataclass
class TrainResult:
    model: SMAttnModel
    loss_trace: list[float]
    step_losses: list[float]
    val_trace: list[float]
    best_epoch: int
    wall_time: float


def _param_norms(params):
    return {k: float(np.linalg.norm(p.value)) for k, p in params.items()}


def train(
    train_seqs: Sequence[EventSequence],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    val_holdouts: Sequence[Holdout] = (),
    init_params: dict[str, Tensor] | None = None,
    on_epoch: Callable[[int, float, float | None], None] | None = None,
) -> TrainResult:
    """Mini-batch descent on the ranking loss minus gamma times the regularizer.

    Every position j < L of a training sequence predicts item j+1 at its
    timestamp. Validation HR@K is computed after each epoch and the best
    epoch's parameters are returned (epoch 0 is the initialization).
    """
    seqs = [s for s in train_seqs if len(s) >= 2]
    if not seqs:
        raise ConfigError("training needs at least one user with two or more events")
    model_cfg = arm_model_config(model_cfg, cfg.arm)
    plain = cfg.arm == "origin"
    gamma = cfg.effective_gamma
    model = SMAttnModel(model_cfg, init_params) if init_params else SMAttnModel.initialize(model_cfg, cfg.seed)
    params = model.params
    opt = make_optimizer(cfg)
    started = time.perf_counter()

    def validate(m):
        if not val_holdouts:
            return None
        return evaluate(m, val_holdouts, cfg.eval_k).hr

    best_val = validate(model)
    best_params, best_epoch = params, 0
    loss_trace, step_losses, val_trace = [], [], []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(seqs))
        epoch_losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = Batch.from_sequences([seqs[i] for i in order[start:start + cfg.batch_size]])
            negs, feasible = batch_negatives(batch, model_cfg.n_items, cfg.negatives,
                                             np.random.default_rng([cfg.seed, 2, epoch, b]))
            fractions = None
            if gamma > 0 and cfg.integrator.method == "monte_carlo":
                Bsz, L = batch.items.shape
                fractions = draw_fractions((Bsz, L - 1, cfg.integrator.mc_samples),
                                           np.random.default_rng([cfg.seed, 3, epoch, b]))
            cur = model.with_params(params)
            try:
                with Tape() as tape:
                    parts = total_loss(batch, cur, gamma, negs, cfg.integrator, plain, feasible, fractions)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {b}: {exc}; "
                    f"parameter norms {_param_norms(params)}") from exc
            grads = tape.gradient(parts.total, params)
            params = opt.step(params, grads)
            step_losses.append(float(parts.total.value))
            epoch_losses.append(float(parts.total.value))
        loss_trace.append(float(np.mean(epoch_losses)))
        model = model.with_params(params)
        val = validate(model)
        val_trace.append(val if val is not None else float("nan"))
        if val is not None and cfg.select_best:
            if val > best_val:
                best_val, best_params, best_epoch = val, params, epoch
        else:
            best_params, best_epoch = params, epoch
        if on_epoch:
            on_epoch(epoch, loss_trace[-1], val)
        log.info("epoch %d loss %.6f val HR %s", epoch, loss_trace[-1], val)
    return TrainResult(
        model=model.with_params(best_params),
        loss_trace=loss_trace,
        step_losses=step_losses,
        val_trace=val_trace,
        best_epoch=best_epoch,
        wall_time=time.perf_counter() - started,
    )


@dataclass
class AblationTable:
    k: int
    rows: dict[str, dict]
    per_seed: dict[str, list[dict]]

    def to_dict(self) -> dict:
        return {"k": self.k, "arms": self.rows, "per_seed": self.per_seed}

    def to_text(self) -> str:
        k = self.k
        head = f"{'arm':<18}{'HR@%d mean' % k:>13}{'HR std':>10}{'NDCG@%d mean' % k:>15}{'NDCG std':>10}\n"
        lines = [head]
        for arm, r in self.rows.items():
            lines.append(f"{ARM_LABELS[arm]:<18}{r['hr_mean']:>13.5f}{r['hr_std']:>10.5f}"
                         f"{r['ndcg_mean']:>15.5f}{r['ndcg_std']:>10.5f}\n")
        return "".join(lines)


def ablate(
    sequences: Sequence[EventSequence],
    model_cfg: ModelConfig,
    base: TrainConfig,
    seeds: Sequence[int],
    ratios=(8, 1, 1),
    arms: Sequence[str] = ARMS,
    on_result: Callable[[int, str, MetricsReport, TrainResult], None] | None = None,
) -> AblationTable:
    """Train each arm on the same split and seed; report test HR/NDCG mean and std over seeds.

    Each seed draws its own user split, initialization and negatives; all
    arms share them.
    """
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    by_user = {s.user_id: s for s in sequences}
    per_seed: dict[str, list[dict]] = {a: [] for a in arms}
    for seed in seeds:
        plan = split_strong_generalization(sequences, ratios, seed)
        train_seqs = [by_user[u] for u in plan.train]
        for arm in arms:
            cfg = replace(base, arm=arm, seed=seed)
            res = train(train_seqs, model_cfg, cfg, plan.holdouts_for("validation"))
            rep = evaluate(res.model, plan.holdouts_for("test"), cfg.eval_k)
            per_seed[arm].append({"seed": seed, "hr": rep.hr, "ndcg": rep.ndcg,
                                  "users": rep.n_users, "best_epoch": res.best_epoch})
            if on_result:
                on_result(seed, arm, rep, res)
    rows = {}
    for arm in arms:
        hr = np.array([r["hr"] for r in per_seed[arm]])
        nd = np.array([r["ndcg"] for r in per_seed[arm]])
        rows[arm] = {"hr_mean": float(hr.mean()), "hr_std": float(hr.std()),
                     "ndcg_mean": float(nd.mean()), "ndcg_std": float(nd.std())}
    return AblationTable(base.eval_k, rows, per_seed)


def split_train_sequences(sequences: Sequence[EventSequence], plan: SplitPlan) -> list[EventSequence]:
    by_user = {s.user_id: s for s in sequences}
    return [by_user[u] for u in plan.train]
