"""Projective method of multipliers for  min f(u) + g(v)  s.t.  M u + C v = d.

Each iteration solves the two regularized subproblems (v first, then u),
builds a separating affine function phi_k of the dual pair (z, w) from
the subproblem outputs, and moves (z, w) by a relaxed projection onto
its nonpositive half-space:

    v_k = argmin_v g(v) + <z + lam w, C v - d> + (lam/2) ||C v - d||^2
    u_k = argmin_u f(u) + <z + lam (C v_k - d), M u> + (lam/2) ||M u||^2
    gamma_k = phi_k(z, w) / ||grad phi_k||^2
    z <- z + rho_k gamma_k (M u_k + C v_k - d)
    w <- w - rho_k gamma_k lam (w - M u_k)

With rho_k = 1 the dual update is the exact orthogonal projection onto
{phi_k <= 0}; rho_k may range over [1 - rho_bar, 1 + rho_bar].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import ergodic as _ergodic
from .linops import Array, LinearMap, inner, norm
from .prox import SubproblemOracle

DEFAULT_GAMMA_DENOMINATOR_FLOOR = 1e-30
_RHO_WINDOW_SLACK = 1e-12


class GammaAnomalyError(RuntimeError):
    """Step-length denominator collapsed although the exact-stop test did
    not fire; the iteration cannot continue meaningfully."""


@dataclass(frozen=True)
class ProblemSpec:
    """A split problem instance handed to the solver.

    ``g_oracle`` solves the (g, C, d) block, ``f_oracle`` the (M, f)
    block; both return their operator images alongside the minimizer.
    ``f_value``/``g_value`` are optional objective evaluators used only
    for reporting.
    """

    g_oracle: SubproblemOracle
    f_oracle: SubproblemOracle
    M: LinearMap
    C: LinearMap
    d: Array
    f_value: Optional[Callable[[Array], float]] = None
    g_value: Optional[Callable[[Array], float]] = None

    def __post_init__(self):
        if self.M.out_shape != self.C.out_shape:
            raise ValueError(f"M.out_shape {self.M.out_shape} != "
                             f"C.out_shape {self.C.out_shape}")
        if tuple(self.d.shape) != tuple(self.M.out_shape):
            raise ValueError(f"d.shape {self.d.shape} != operator range "
                             f"{self.M.out_shape}")

    @property
    def dual_shape(self) -> tuple[int, ...]:
        return tuple(self.d.shape)

    def objective(self, u: Array, v: Array) -> float:
        if self.f_value is None or self.g_value is None:
            return math.nan
        return float(self.f_value(u)) + float(self.g_value(v))


@dataclass(frozen=True)
class KktStop:
    """Stop when ||r_primal|| <= eps_primal and ||r_dual|| <= eps_dual."""

    eps_primal: float
    eps_dual: float


@dataclass(frozen=True)
class RelativeChangeStop:
    """Stop when ||u_k - u_{k-1}|| / ||u_k|| <= eps (never on iteration 1)."""

    eps: float = 1e-3


@dataclass(frozen=True)
class DualScaledStop:
    """Stop when ||r_dual|| / (m n) <= eps, with m n the pixel count of u."""

    eps: float = 1e-6


StopRule = Union[KktStop, RelativeChangeStop, DualScaledStop]


def _constant_one(_k: int) -> float:
    return 1.0


@dataclass(frozen=True)
class SolverConfig:
    """Solver parameters.

    ``rho_schedule`` maps the 1-based iteration index to the relaxation
    factor; every emitted value must lie in [1 - rho_bar, 1 + rho_bar].
    ``stop_floor`` overrides the exact-stop threshold, which defaults to
    1e-14 * (1 + ||d||).
    """

    lam: float
    rho_bar: float = 0.0
    rho_schedule: Callable[[int], float] = _constant_one
    max_iterations: int = 1000
    stopping: tuple[StopRule, ...] = ()
    stop_floor: Optional[float] = None
    gamma_denominator_floor: float = DEFAULT_GAMMA_DENOMINATOR_FLOOR

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0.0 <= self.rho_bar < 1.0:
            raise ValueError("rho_bar must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def rho_at(self, k: int) -> float:
        rho = float(self.rho_schedule(k))
        lo = 1.0 - self.rho_bar - _RHO_WINDOW_SLACK
        hi = 1.0 + self.rho_bar + _RHO_WINDOW_SLACK
        if not lo <= rho <= hi:
            raise ValueError(f"rho schedule emitted {rho} at k={k}, outside "
                             f"[1 - rho_bar, 1 + rho_bar] = "
                             f"[{1.0 - self.rho_bar}, {1.0 + self.rho_bar}]")
        return rho


@dataclass(frozen=True)
class SolverState:
    """Dual pair (z, w) after k iterations."""

    z: Array
    w: Array
    k: int = 0


@dataclass(frozen=True)
class IterationRecord:
    """Everything produced by one iteration.

    ``a = -M u_k`` and ``b = d - C v_k`` are the subgradients certified
    at ``y`` and ``x`` respectively; ``r_primal = M u_k + C v_k - d``
    and ``r_dual = lam (w_{k-1} - M u_k) = x - y``.  ``phi_value`` is
    phi_k at the pre-update dual pair and ``grad_phi_sq = ||grad
    phi_k||^2``, so ``gamma = phi_value / grad_phi_sq``.
    """

    k: int
    u: Array
    v: Array
    x: Array
    y: Array
    a: Array
    b: Array
    gamma: float
    rho: float
    r_primal: Array
    r_dual: Array
    phi_value: float
    grad_phi_sq: float
    r_primal_norm: float
    r_dual_norm: float


@dataclass(frozen=True)
class Stopped:
    """Exact-stop outcome: (u, v, x) is a KKT point (up to the floor)."""

    u: Array
    v: Array
    x: Array
    k: int


StepOutcome = Union[tuple[SolverState, IterationRecord], Stopped]


def compute_gamma(Mu: Array, Cv: Array, d: Array, w_prev: Array, lam: float,
                  denominator_floor: float = DEFAULT_GAMMA_DENOMINATOR_FLOOR
                  ) -> tuple[float, float, float]:
    """Projection step length from the current subproblem outputs.

    Returns ``(gamma, phi_value, grad_phi_sq)`` where ``phi_value`` is
    the separating function evaluated at the pre-update dual pair and
    ``grad_phi_sq`` its squared gradient norm, so ``gamma = phi_value /
    grad_phi_sq``.  Algebraically ``phi_value`` also equals
    ``(lam/2) ||Cv - d + w||^2 + (lam/2)(||d - Cv - Mu||^2 + ||w - Mu||^2)``,
    which is why ``gamma >= min(lam, 1/lam) / 2`` regardless of how
    accurately the subproblems were solved.

    Raises :class:`GammaAnomalyError` when the denominator falls at or
    below ``denominator_floor`` (the exact-stop test should have fired).
    """
    Cv_minus_d = Cv - d
    dual_gap = w_prev - Mu
    phi_value = lam * norm(Cv_minus_d + w_prev) ** 2 \
        + lam * inner(-Cv_minus_d - Mu, dual_gap)
    grad_phi_sq = norm(Mu + Cv_minus_d) ** 2 + lam * lam * norm(dual_gap) ** 2
    if grad_phi_sq <= denominator_floor:
        raise GammaAnomalyError(
            f"||grad phi||^2 = {grad_phi_sq:.3e} <= floor "
            f"{denominator_floor:.3e} while the exact-stop test did not fire")
    return phi_value / grad_phi_sq, phi_value, grad_phi_sq


def pmm_step(state: SolverState, problem: ProblemSpec,
             config: SolverConfig) -> StepOutcome:
    """Run one iteration from ``state``.

    Returns ``(next_state, record)``, or :class:`Stopped` if the exact
    KKT stop test ``||r_primal|| + ||M u - w|| <= floor`` fires.
    """
    lam = config.lam
    k = state.k + 1

    v, Cv = problem.g_oracle(state.z + lam * state.w, lam)
    Cv_minus_d = Cv - problem.d
    u, Mu = problem.f_oracle(state.z + lam * Cv_minus_d, lam)

    r_primal = Mu + Cv_minus_d
    dual_gap = state.w - Mu
    dual_gap_norm = norm(dual_gap)

    floor = config.stop_floor
    if floor is None:
        floor = 1e-14 * (1.0 + norm(problem.d))
    if norm(r_primal) + dual_gap_norm <= floor:
        x = state.z + lam * state.w + lam * Cv_minus_d
        return Stopped(u=u, v=v, x=x, k=k)

    gamma, phi_value, grad_phi_sq = compute_gamma(
        Mu, Cv, problem.d, state.w, lam, config.gamma_denominator_floor)
    rho = config.rho_at(k)

    x = state.z + lam * state.w + lam * Cv_minus_d
    r_dual = lam * dual_gap
    y = x - r_dual
    record = IterationRecord(
        k=k, u=u, v=v, x=x, y=y, a=-Mu, b=problem.d - Cv,
        gamma=gamma, rho=rho, r_primal=r_primal, r_dual=r_dual,
        phi_value=phi_value, grad_phi_sq=grad_phi_sq,
        r_primal_norm=norm(r_primal), r_dual_norm=lam * dual_gap_norm)

    step = rho * gamma
    next_state = SolverState(z=state.z + step * r_primal,
                             w=state.w - step * r_dual, k=k)
    return next_state, record


def phi_value_at(record: IterationRecord, z: Array, w: Array) -> float:
    """Evaluate the iteration's separating affine function at (z, w).

    phi_k(z, w) = <z - x_k, b_k - w> + <z - y_k, a_k + w>.  At the
    pre-update dual pair this reproduces ``record.phi_value``; at any
    dual solution pair it is <= 0.
    """
    return inner(z - record.x, record.b - w) + inner(z - record.y, record.a + w)


def check_stop(state: SolverState, record: IterationRecord,
               config: SolverConfig,
               prev_u: Optional[Array] = None) -> Optional[str]:
    """Evaluate the configured stop rules; return the firing rule's name.

    ``prev_u`` is the previous iteration's u (None on the first
    iteration, in which case relative-change cannot fire).
    """
    for rule in config.stopping:
        if isinstance(rule, KktStop):
            if (record.r_primal_norm <= rule.eps_primal
                    and record.r_dual_norm <= rule.eps_dual):
                return "kkt"
        elif isinstance(rule, RelativeChangeStop):
            if prev_u is None:
                continue
            denom = norm(record.u)
            diff = norm(record.u - prev_u)
            if (diff <= rule.eps * denom) if denom > 0 else (diff == 0.0):
                return "relative_change"
        elif isinstance(rule, DualScaledStop):
            if record.r_dual_norm / record.u.size <= rule.eps:
                return "dual_scaled"
        else:
            raise TypeError(f"unknown stop rule {rule!r}")
    return None


def fejer_gap(state_prev: SolverState, state_next: SolverState,
              record: IterationRecord, reference: tuple[Array, Array]) -> float:
    """Slack in the per-iteration distance-decrease inequality.

    For any dual solution pair ``reference = (z*, w*)``,

        ||(z_k, w_k) - (z*, w*)||^2 <= ||(z_{k-1}, w_{k-1}) - (z*, w*)||^2
            - rho_k (2 - rho_k) gamma_k^2 ||grad phi_k||^2,

    and the returned value (lhs minus rhs) is <= 0 up to rounding.
    """
    z_star, w_star = reference
    before = norm(state_prev.z - z_star) ** 2 + norm(state_prev.w - w_star) ** 2
    after = norm(state_next.z - z_star) ** 2 + norm(state_next.w - w_star) ** 2
    drop = record.rho * (2.0 - record.rho) * record.gamma ** 2 * record.grad_phi_sq
    return after - (before - drop)


@dataclass
class RunResult:
    """Outcome of :func:`solve`.

    ``history`` maps metric names to per-iteration arrays; full
    per-iteration fields are only retained when ``keep_records`` was
    set (long image runs must not hold them).
    """

    u: Array
    v: Array
    x: Optional[Array]
    y: Optional[Array]
    state: SolverState
    iterations: int
    stop_reason: str
    stopped_exact: bool
    history: dict[str, np.ndarray]
    records: Optional[list[IterationRecord]]
    ergodic: Optional["_ergodic.ErgodicState"]


_HISTORY_KEYS = ("gamma", "rho", "primal_residual", "dual_residual",
                 "relative_change", "objective", "elapsed",
                 "ergodic_primal_residual", "ergodic_dual_residual",
                 "eps_u", "eps_v", "big_gamma")


def solve(problem: ProblemSpec, config: SolverConfig, *,
          state0: Optional[SolverState] = None, track_ergodic: bool = True,
          keep_records: bool = False,
          on_record: Optional[Callable[[SolverState, SolverState,
                                        IterationRecord], None]] = None
          ) -> RunResult:
    """Run the solver loop from ``state0`` (default: the zero dual pair).

    Per-iteration scalars are collected into ``history``; when
    ``track_ergodic`` is set the weighted running averages are updated
    each iteration and their residuals/eps values recorded alongside.
    ``on_record(state_prev, state_next, record)`` is invoked after every
    completed iteration.
    """
    import time

    if state0 is None:
        zero = np.zeros(problem.dual_shape)
        state = SolverState(z=zero, w=zero.copy(), k=0)
    else:
        state = state0

    es = _ergodic.ErgodicState(d=problem.d) if track_ergodic else None
    history: dict[str, list[float]] = {key: [] for key in _HISTORY_KEYS}
    records: Optional[list[IterationRecord]] = [] if keep_records else None

    prev_u = None
    last = None
    stop_reason = "max_iterations"
    stopped_exact = False
    final_u = final_v = final_x = final_y = None
    iterations = 0
    t0 = time.perf_counter()

    for _ in range(config.max_iterations):
        outcome = pmm_step(state, problem, config)
        if isinstance(outcome, Stopped):
            stop_reason = "kkt_exact"
            stopped_exact = True
            iterations = outcome.k
            final_u, final_v, final_x = outcome.u, outcome.v, outcome.x
            state = SolverState(z=state.z, w=state.w, k=outcome.k)
            break
        state_next, record = outcome
        iterations = record.k

        history["gamma"].append(record.gamma)
        history["rho"].append(record.rho)
        history["primal_residual"].append(record.r_primal_norm)
        history["dual_residual"].append(record.r_dual_norm)
        if prev_u is None:
            history["relative_change"].append(math.nan)
        else:
            denom = norm(record.u)
            history["relative_change"].append(
                norm(record.u - prev_u) / denom if denom > 0 else math.nan)
        history["objective"].append(problem.objective(record.u, record.v))
        history["elapsed"].append(time.perf_counter() - t0)

        if es is not None:
            _ergodic.accumulate(es, record)
            report = _ergodic.ergodic_report(es)
            history["ergodic_primal_residual"].append(report.r_primal_norm)
            history["ergodic_dual_residual"].append(report.r_dual_norm)
            history["eps_u"].append(report.eps_u)
            history["eps_v"].append(report.eps_v)
            history["big_gamma"].append(es.big_gamma)

        if keep_records:
            records.append(record)
        if on_record is not None:
            on_record(state, state_next, record)

        reason = check_stop(state_next, record, config, prev_u)
        prev_u = record.u
        state = state_next
        last = record
        if reason is not None:
            stop_reason = reason
            break

    if last is not None and final_u is None:
        final_u, final_v = last.u, last.v
        final_x, final_y = last.x, last.y

    return RunResult(
        u=final_u, v=final_v, x=final_x, y=final_y, state=state,
        iterations=iterations, stop_reason=stop_reason,
        stopped_exact=stopped_exact,
        history={key: np.asarray(val) for key, val in history.items()},
        records=records, ergodic=es)
