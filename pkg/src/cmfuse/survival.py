"""Discrete-time survival: binning, hazards, censored NLL, risk and c-index."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .tensor import (
    ContractError,
    Tensor,
    add,
    clamp,
    cumprod,
    mul,
    scale,
    sigmoid,
    softplus,
    sub,
    take,
    total,
)

N_BINS = 4
HAZARD_EPS = 1e-7


class InsufficientEventsError(ValueError):
    pass


class DegenerateEdgesError(ValueError):
    pass


class UndefinedCIndexError(ValueError):
    pass


@dataclass(frozen=True)
class SurvivalLabel:
    time_days: float
    censored: bool
    bin: int | None = None

    def with_bin(self, edges: BinEdges) -> SurvivalLabel:
        return replace(self, bin=edges.assign(self.time_days))


@dataclass(frozen=True)
class BinEdges:
    """Three interior cut points; bins are [0,e1), [e1,e2), [e2,e3), [e3,inf)."""

    cuts: tuple[float, float, float]

    def __post_init__(self):
        c = self.cuts
        if len(c) != N_BINS - 1 or not all(a < b for a, b in zip(c, c[1:])):
            raise DegenerateEdgesError(f"bin edges must be 3 strictly increasing values, got {c}")

    def assign(self, time_days: float) -> int:
        return int(np.searchsorted(np.asarray(self.cuts), time_days, side="right"))


def compute_bin_edges(labels: Sequence[SurvivalLabel]) -> BinEdges:
    """Quartiles of the uncensored event times (numpy's linear interpolation rule)."""
    times = np.array([lab.time_days for lab in labels if not lab.censored], dtype=np.float64)
    if times.size < N_BINS:
        raise InsufficientEventsError(
            f"need at least {N_BINS} uncensored patients to place bin edges, got {times.size}")
    cuts = np.percentile(times, [25.0, 50.0, 75.0], method="linear")
    return BinEdges(tuple(float(c) for c in cuts))


@dataclass
class HazardOutput:
    logits: Tensor
    hazards: Tensor
    survival: Tensor

    @property
    def risk(self) -> float:
        return risk_score(self)


def hazard_output(logits: Tensor) -> HazardOutput:
    """Map classifier logits (1x4) to clamped hazards and survival ``S_j = prod_{k<=j} (1-h_k)``."""
    if logits.shape != (1, N_BINS):
        raise ContractError(f"expected (1, {N_BINS}) logits, got {logits.shape}")
    hazards = clamp(sigmoid(logits), HAZARD_EPS, 1.0 - HAZARD_EPS)
    one = Tensor(np.ones((1, N_BINS)))
    survival = cumprod(sub(one, hazards))
    return HazardOutput(logits, hazards, survival)


def nll_survival_loss(output: HazardOutput, label: SurvivalLabel, alpha: float = 0.0) -> Tensor:
    """Censored negative log-likelihood for one patient.

    Uncensored in bin j: ``-(log S_{j-1} + log h_j)`` with ``S_{-1} = 1``.
    Censored in bin j: ``-log S_j``, scaled by ``1 - alpha``.

    Evaluated from the logits as ``-log h = softplus(-l)`` and
    ``-log(1 - h) = softplus(l)``, so the loss stays finite and keeps a
    useful gradient even when a hazard saturates.
    """
    j = label.bin
    if j is None or not 0 <= j < N_BINS:
        raise ContractError(f"label bin must be in [0, {N_BINS - 1}], got {j}")
    logits = output.logits
    survived = softplus(logits)  # -log(1 - h_k)
    if label.censored:
        mask = np.zeros((1, N_BINS))
        mask[0, : j + 1] = 1.0
        return scale(total(mul(survived, Tensor(mask))), 1.0 - alpha)
    died = take(softplus(scale(logits, -1.0)), 0, j)  # -log h_j
    if j == 0:
        return died
    mask = np.zeros((1, N_BINS))
    mask[0, :j] = 1.0
    return add(total(mul(survived, Tensor(mask))), died)


def risk_score(output: HazardOutput) -> float:
    """``-sum_j S_j``; larger means shorter predicted survival."""
    return -float(output.survival.data.sum())


def concordance_index(risks: Sequence[float], labels: Sequence[SurvivalLabel]) -> float:
    """Harrell's c-index.

    A pair (i, j) is comparable when ``t_i < t_j`` and i had the event; it is
    concordant when ``risk_i > risk_j`` and half-credited on a risk tie.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.array([lab.time_days for lab in labels], dtype=np.float64)
    event = np.array([not lab.censored for lab in labels])
    if r.size != t.size:
        raise ValueError(f"{r.size} risks for {t.size} labels")
    if r.size < 2:
        raise UndefinedCIndexError("c-index needs at least two patients")
    comparable = (t[:, None] < t[None, :]) & event[:, None]
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise UndefinedCIndexError("no comparable pairs")
    conc = int((comparable & (r[:, None] > r[None, :])).sum())
    ties = int((comparable & (r[:, None] == r[None, :])).sum())
    return (conc + 0.5 * ties) / n_comp
