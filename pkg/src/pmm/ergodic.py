"""Weighted running averages of solver iterates and complexity certificates.

The averages use weights rho_j * gamma_j and are maintained as O(1)-memory
running sums, so long image runs never retain per-iteration fields.  The
epsilon terms quantify how approximately the averaged iterates satisfy
the two subgradient inclusions; together with the averaged residuals
they obey explicit O(1/k) bounds in terms of the initial distance to the
dual solution set, which the certificate helpers evaluate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .linops import Array, inner, norm

if TYPE_CHECKING:  # pragma: no cover - typing only, avoids an import cycle
    from .core import IterationRecord

#: eps values this far below zero are treated as rounding and clamped;
#: anything more negative raises (it would falsify the averaging algebra).
EPS_NEGATIVITY_TOLERANCE = 1e-10


@dataclass
class ErgodicState:
    """Running sums defining the weighted averages after ``count`` steps.

    With w_j = rho_j * gamma_j: ``big_gamma`` = sum w_j; ``Su``..``Sy``
    are sum w_j (u_j, v_j, x_j, y_j); ``SMu``/``SCv`` the operator-image
    sums; ``s_uy``/``s_vx`` the scalar sums of w_j <M u_j, y_j> and
    w_j <C v_j, x_j> feeding the eps rearrangement.
    """

    d: Array
    big_gamma: float = 0.0
    count: int = 0
    Su: Optional[Array] = None
    Sv: Optional[Array] = None
    Sx: Optional[Array] = None
    Sy: Optional[Array] = None
    SMu: Optional[Array] = None
    SCv: Optional[Array] = None
    s_uy: float = 0.0
    s_vx: float = 0.0


def accumulate(es: ErgodicState, record: "IterationRecord") -> ErgodicState:
    """Fold one iteration into the running sums (O(1) memory, in place)."""
    weight = record.rho * record.gamma
    Mu = -record.a
    Cv = es.d - record.b
    if es.count == 0:
        es.Su = np.zeros_like(record.u)
        es.Sv = np.zeros_like(record.v)
        es.Sx = np.zeros_like(record.x)
        es.Sy = np.zeros_like(record.y)
        es.SMu = np.zeros_like(Mu)
        es.SCv = np.zeros_like(Cv)
    es.big_gamma += weight
    es.count += 1
    es.Su += weight * record.u
    es.Sv += weight * record.v
    es.Sx += weight * record.x
    es.Sy += weight * record.y
    es.SMu += weight * Mu
    es.SCv += weight * Cv
    es.s_uy += weight * inner(Mu, record.y)
    es.s_vx += weight * inner(Cv, record.x)
    return es


@dataclass(frozen=True)
class ErgodicReport:
    """Averaged iterates with their residuals and inclusion errors."""

    u_bar: Array
    v_bar: Array
    x_bar: Array
    y_bar: Array
    r_primal: Array
    r_dual: Array
    eps_u: float
    eps_v: float

    @property
    def r_primal_norm(self) -> float:
        return norm(self.r_primal)

    @property
    def r_dual_norm(self) -> float:
        return norm(self.r_dual)

    @property
    def eps_total(self) -> float:
        return self.eps_u + self.eps_v


def ergodic_report(es: ErgodicState) -> ErgodicReport:
    """Evaluate averages, averaged residuals and eps values from the sums.

    The eps values use the exact algebraic rearrangement

        eps_u = -s_uy / Gamma + <SMu / Gamma, Sy / Gamma>
        eps_v = -s_vx / Gamma + <SCv / Gamma, Sx / Gamma>,

    equal to the defining weighted sums of <u_j - u_bar, -M* y_j> and
    <v_j - v_bar, -C* x_j>.  Both are nonnegative in exact arithmetic;
    values within EPS_NEGATIVITY_TOLERANCE below zero are clamped to 0,
    anything lower raises ValueError.
    """
    if es.count == 0 or not es.big_gamma > 0:
        raise ValueError("no iterations accumulated")
    G = es.big_gamma
    u_bar = es.Su / G
    v_bar = es.Sv / G
    x_bar = es.Sx / G
    y_bar = es.Sy / G
    Mu_bar = es.SMu / G
    Cv_bar = es.SCv / G
    eps_u = -es.s_uy / G + inner(Mu_bar, y_bar)
    eps_v = -es.s_vx / G + inner(Cv_bar, x_bar)
    for label, value in (("eps_u", eps_u), ("eps_v", eps_v)):
        if value < -EPS_NEGATIVITY_TOLERANCE:
            raise ValueError(f"{label} = {value:.3e} is negative beyond "
                             f"rounding tolerance {EPS_NEGATIVITY_TOLERANCE}")
    return ErgodicReport(u_bar=u_bar, v_bar=v_bar, x_bar=x_bar, y_bar=y_bar,
                         r_primal=Mu_bar + Cv_bar - es.d,
                         r_dual=x_bar - y_bar,
                         eps_u=max(eps_u, 0.0), eps_v=max(eps_v, 0.0))


@dataclass(frozen=True)
class BoundCertificate:
    """Inputs of the complexity bounds.

    ``d0_bound`` must upper-bound the distance from the initial dual
    pair to the dual solution set; any upper bound is accepted, so a
    passing certificate is a necessary-condition check (a failing one is
    a genuine violation whenever ``d0_bound`` really is an upper bound).
    """

    d0_bound: float
    lam: float
    rho_bar: float

    def __post_init__(self):
        if self.d0_bound < 0:
            raise ValueError("d0_bound must be nonnegative")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0.0 <= self.rho_bar < 1.0:
            raise ValueError("rho_bar must lie in [0, 1)")

    @property
    def tau(self) -> float:
        """min(lam, 1/lam); every gamma_k is >= tau / 2."""
        return min(self.lam, 1.0 / self.lam)

    @property
    def theta(self) -> float:
        """1 / (tau^2 (1 - rho_bar)^2) + 1, the eps-bound prefactor."""
        return 1.0 / (self.tau * (1.0 - self.rho_bar)) ** 2 + 1.0


def pointwise_bound(cert: BoundCertificate, k) -> float:
    """2 d0 / ((1 - rho_bar) tau sqrt(k)): the best-so-far residual bound."""
    return 2.0 * cert.d0_bound / ((1.0 - cert.rho_bar) * cert.tau * np.sqrt(k))


def big_gamma_lower_bound(cert: BoundCertificate, k) -> float:
    """(1 - rho_bar) (tau / 2) k, a lower bound on sum rho_j gamma_j."""
    return (1.0 - cert.rho_bar) * 0.5 * cert.tau * np.asarray(k, dtype=float)


def ergodic_residual_bound(cert: BoundCertificate, k) -> float:
    """4 d0 / (k (1 - rho_bar) tau): bound on each averaged residual norm."""
    return 4.0 * cert.d0_bound / (np.asarray(k, dtype=float)
                                  * (1.0 - cert.rho_bar) * cert.tau)


def ergodic_eps_bound(cert: BoundCertificate, k) -> float:
    """8 d0^2 theta / (k (1 - rho_bar) tau): bound on eps_u + eps_v."""
    return 8.0 * cert.d0_bound ** 2 * cert.theta / (
        np.asarray(k, dtype=float) * (1.0 - cert.rho_bar) * cert.tau)


@dataclass(frozen=True)
class CertificateResult:
    """Outcome of a bound check; margins are min over k of bound - observed."""

    passed: bool
    margins: dict[str, float] = field(default_factory=dict)


def pointwise_certificate(min_primal, min_dual, cert: BoundCertificate,
                          k: Optional[int] = None) -> CertificateResult:
    """Check the best-so-far residual bounds at every iteration count.

    ``min_primal[j]`` / ``min_dual[j]`` must be the minimum residual
    norms over iterations 1..j+1 (running minima).  The check covers
    k = 1..len (or the ``k`` prefix when given).
    """
    min_primal = np.asarray(min_primal, dtype=float)
    min_dual = np.asarray(min_dual, dtype=float)
    if k is not None:
        min_primal = min_primal[:k]
        min_dual = min_dual[:k]
    if min_primal.shape != min_dual.shape or min_primal.ndim != 1:
        raise ValueError("running-minimum arrays must be 1-D with equal length")
    if min_primal.size == 0:
        raise ValueError("no iterations to certify")
    ks = np.arange(1, min_primal.size + 1, dtype=float)
    bounds = pointwise_bound(cert, ks)
    margins = {"primal": float(np.min(bounds - min_primal)),
               "dual": float(np.min(bounds - min_dual))}
    return CertificateResult(passed=all(m >= 0.0 for m in margins.values()),
                             margins=margins)


def ergodic_certificate(es: ErgodicState, cert: BoundCertificate,
                        k: Optional[int] = None) -> CertificateResult:
    """Check the averaged-iterate bounds at the state's iteration count."""
    if k is None:
        k = es.count
    elif k != es.count:
        raise ValueError(f"k={k} does not match the accumulated count {es.count}")
    report = ergodic_report(es)
    res_bound = ergodic_residual_bound(cert, k)
    margins = {
        "primal": float(res_bound - report.r_primal_norm),
        "dual": float(res_bound - report.r_dual_norm),
        "eps": float(ergodic_eps_bound(cert, k) - report.eps_total),
        "big_gamma": float(es.big_gamma - big_gamma_lower_bound(cert, k)),
    }
    return CertificateResult(passed=all(m >= 0.0 for m in margins.values()),
                             margins=margins)
