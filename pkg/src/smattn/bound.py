"""Generalization-bound diagnostics: row sparsity rho, term magnitude mu, capacity C.

    C    = d (m + n) log(48 e m n)
    term = L mu sqrt(C rho ln|Omega| / |Omega|) + sqrt(ln(1/delta) / |Omega|)

The value is reported as a diagnostic only; the hidden constant factors make
a pass/fail comparison against a measured generalization gap meaningless.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Holdout
from .errors import DomainError
from .model import Batch, SMAttnModel

LOG_BASES = {"e": math.log, "2": math.log2, "10": math.log10}


@dataclass
class BoundInputs:
    lipschitz: float
    mu: float
    rho: float
    omega_size: int
    delta: float
    d: int
    m: int
    n: int

    def validate(self):
        if not 0.0 < self.delta < 1.0:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        if self.omega_size < 1:
            raise DomainError("sample set must be nonempty")
        if self.lipschitz <= 0 or min(self.d, self.m, self.n) < 1:
            raise DomainError("Lipschitz constant, d, m and n must be positive")
        if self.mu < 0 or self.rho < 0:
            raise DomainError("mu and rho must be nonnegative")
        count = self.rho * self.omega_size
        if abs(count - round(count)) > 1e-9 * max(1.0, count):
            raise DomainError(f"rho * |Omega| = {count} is not an integer count")


@dataclass
class BoundResult:
    complexity_term: float
    C: float
    capacity_term: float
    confidence_term: float


def empirical_rho(rows: Sequence[Sequence[float]], epsilon: float = 0.0) -> float:
    """Mean number of entries with |value| > epsilon per sampled row."""
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    if len(rows) == 0:
        raise DomainError("empty sample set")
    total = sum(int(np.count_nonzero(np.abs(np.asarray(r, dtype=np.float64)) > epsilon)) for r in rows)
    return total / len(rows)


def empirical_mu(P, V, B, samples: Sequence[tuple[int, int]]) -> float:
    """max over sampled (u, i) and all k of |P[u, k] * (V B)[k, i]|."""
    if len(samples) == 0:
        raise DomainError("empty sample set")
    P, V, B = (np.asarray(x, dtype=np.float64) for x in (P, V, B))
    if P.shape[1] != V.shape[0] or V.shape[1] != B.shape[0]:
        raise DomainError(f"inconsistent shapes P{P.shape} V{V.shape} B{B.shape}")
    VB = V @ B
    u = np.array([s[0] for s in samples])
    i = np.array([s[1] for s in samples])
    return float(np.max(np.abs(P[u, :] * VB[:, i].T)))


def bound_complexity_term(inputs: BoundInputs, log_base: str = "e") -> BoundResult:
    inputs.validate()
    if log_base not in LOG_BASES:
        raise DomainError(f"log base must be one of {sorted(LOG_BASES)}")
    m, n, omega = inputs.m, inputs.n, inputs.omega_size
    C = inputs.d * (m + n) * LOG_BASES[log_base](48.0 * math.e * m * n)
    capacity = inputs.lipschitz * inputs.mu * math.sqrt(C * inputs.rho * math.log(omega) / omega)
    confidence = math.sqrt(math.log(1.0 / inputs.delta) / omega)
    return BoundResult(capacity + confidence, C, capacity, confidence)


def model_bound_report(
    model: SMAttnModel,
    holdouts: Sequence[Holdout],
    n_users: int,
    epsilon: float = 0.01,
    delta: float = 0.05,
    lipschitz: float = 1.0,
    log_base: str = "e",
) -> dict:
    """Bound quantities for a trained model over the holdout users.

    Each sample is (user, held-out item). P is the user's last-position
    attention row, V the value rows of its context and B the output item
    embeddings, so P V B reproduces the unmodulated score of the target.
    """
    if not holdouts:
        raise DomainError("no holdout users")
    rows, mus = [], []
    B = model.params["B"].value.T
    for h in holdouts:
        batch = Batch.from_sequences([h.context])
        out = model.encode(batch)
        L = len(h.context)
        P = out.P.value[0, L - 1:L, :L]
        V = _value_rows(model, batch)[:L]
        rows.append(P[0])
        mus.append(empirical_mu(P, V, B, [(0, h.target_item)]))
    rho = empirical_rho(rows, epsilon)
    inputs = BoundInputs(lipschitz, max(mus), rho, len(holdouts), delta,
                         model.cfg.d_model, n_users, model.cfg.n_items)
    res = bound_complexity_term(inputs, log_base)
    return {
        "rho": rho,
        "mu": inputs.mu,
        "C": res.C,
        "complexity_term": res.complexity_term,
        "epsilon": epsilon,
        "omega_size": inputs.omega_size,
        "delta": delta,
        "inputs": asdict(inputs),
        "log_base": log_base,
        "P_rows": "last-position attention row of each holdout user's context",
    }


def _value_rows(model: SMAttnModel, batch: Batch) -> np.ndarray:
    """V = X W^V of the last attention block for a single-sequence batch."""
    from .attention import embed

    X = embed(batch.items, model.params["Y"], model.pe(batch.items.shape[-1])).value
    for b in range(model.cfg.blocks):
        pre = "" if b == 0 else f"block{b}."
        V = X @ model.params[pre + "Wv"].value
        if pre + "bv" in model.params:
            V = V + model.params[pre + "bv"].value
        if b + 1 < model.cfg.blocks:
            from .attention import causal_attention

            H = causal_attention(X, model.params, batch.valid, prefix=pre).H.value
            X = H + X if model.cfg.residual else H
    return V[0]
