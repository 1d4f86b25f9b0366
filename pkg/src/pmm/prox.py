"""Shrinkage and the subproblem oracles evaluated inside the solver loop.

Each outer iteration minimizes, for one of the two blocks,

    theta(nu) + <carrier, A nu - c> + (lam/2) ||A nu - c||^2,

where ``carrier`` aggregates the current multiplier information.  An
oracle returns the minimizer together with its operator image ``A nu``
so the solver core never re-applies operators.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linops import Array, CgConfig, LinearMap, cg_solve, identity_map, inner, norm

#: (carrier, lam) -> (nu, A nu)
OracleFn = Callable[[Array, float], tuple[Array, Array]]
#: (carrier, lam, nu, A nu) -> (inclusion residual norm, solve tolerance)
InclusionFn = Callable[[Array, float, Array, Array], tuple[float, float]]


@dataclass(frozen=True)
class SubproblemOracle:
    """Minimizer oracle for one block of the splitting.

    ``solve(carrier, lam)`` returns ``(nu, A nu)``.  ``operator`` and
    ``offset`` expose the block's A and c so callers can form residuals.
    ``inclusion_residual``, when present, measures how far the returned
    point is from satisfying the first-order optimality inclusion
    ``0 in d_theta(nu) + A*(carrier + lam (A nu - c))`` and reports the
    tolerance the subproblem was solved to.
    """

    solve: OracleFn
    operator: LinearMap
    offset: Array
    inclusion_residual: Optional[InclusionFn] = None
    name: str = "oracle"

    def __call__(self, carrier: Array, lam: float) -> tuple[Array, Array]:
        return self.solve(carrier, lam)


def shrink(z: Array, mu: float) -> Array:
    """Soft threshold: entrywise ``max(|z| - mu, 0) * sign(z)``, sign(0) = 0.

    This is the resolvent of ``mu * ||.||_1``.
    """
    if not mu > 0:
        raise ValueError("shrink threshold mu must be positive")
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(np.abs(z) - mu, 0.0) * np.sign(z)


def l1_g_oracle(ztilde: Array, lam: float, zeta: float) -> tuple[Array, Array]:
    """Solve ``min_v zeta ||v||_1 - <ztilde, v> + (lam/2) ||v||^2``.

    This is the l1 block with A = -I and c = 0; returns ``(v, -v)``.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    v = shrink(np.asarray(ztilde, dtype=np.float64) / lam, zeta / lam)
    return v, -v


def make_l1_oracle(zeta: float, shape: tuple[int, ...]) -> SubproblemOracle:
    """SubproblemOracle for ``theta = zeta ||.||_1`` with A = -I, c = 0."""
    if not zeta > 0:
        raise ValueError("zeta must be positive")

    def solve(carrier, lam):
        return l1_g_oracle(carrier, lam, zeta)

    def inclusion_residual(carrier, lam, v, Av):
        # Need s := carrier - lam v in zeta * subdiff ||.||_1 at v.
        s = np.asarray(carrier, dtype=np.float64) - lam * v
        on = v != 0
        defect = np.where(on, np.abs(s - zeta * np.sign(v)),
                          np.maximum(np.abs(s) - zeta, 0.0))
        return norm(defect), 1e-14 * (1.0 + norm(carrier))

    return SubproblemOracle(solve=solve, operator=identity_map(shape, -1.0, "neg_identity"),
                            offset=np.zeros(shape), inclusion_residual=inclusion_residual,
                            name=f"l1(zeta={zeta})")


def quad_f_oracle(ztilde: Array, lam: float, system: LinearMap,
                  rhs_builder: Callable[[Array], Array], cg: CgConfig,
                  image_map: LinearMap, warm_start: Optional[Array] = None):
    """Solve a quadratic block by CG on its SPD normal equations.

    ``system`` must be the self-adjoint positive definite operator of the
    normal equations for this ``lam`` and ``rhs_builder(ztilde)`` their
    right-hand side.  Returns ``(u, image_map(u), CgResult)``.
    """
    rhs = rhs_builder(ztilde)
    result = cg_solve(system, rhs, cg, warm_start)
    u = result.x
    return u, image_map.forward(u), result


class _WarmStartCell(threading.local):
    """Per-thread warm-start slot, so one oracle instance can be shared
    across concurrent solver runs without cross-talk."""

    def __init__(self):
        self.x = None


def make_cg_quadratic_oracle(system_for: Callable[[float], LinearMap],
                             rhs_builder: Callable[[Array], Array],
                             image_map: LinearMap, cg: CgConfig,
                             name: str = "quadratic") -> SubproblemOracle:
    """SubproblemOracle wrapping :func:`quad_f_oracle` with warm starts.

    ``system_for(lam)`` builds the normal-equations operator for a given
    lam (cached, since a run uses a single lam).  Successive calls warm
    start CG from the previous solution.
    """
    systems: dict[float, LinearMap] = {}
    cell = _WarmStartCell()

    def system(lam):
        op = systems.get(lam)
        if op is None:
            op = systems.setdefault(lam, system_for(lam))
        return op

    def solve(carrier, lam):
        u, image, _ = quad_f_oracle(carrier, lam, system(lam), rhs_builder,
                                    cg, image_map, warm_start=cell.x)
        cell.x = u
        return u, image

    def inclusion_residual(carrier, lam, u, image):
        rhs = rhs_builder(carrier)
        defect = norm(system(lam).forward(u) - rhs)
        return defect, cg.tolerance * max(norm(rhs), 1e-30)

    return SubproblemOracle(solve=solve, operator=image_map,
                            offset=np.zeros(image_map.out_shape),
                            inclusion_residual=inclusion_residual, name=name)
