"""Dense fields, matrix-free linear maps, image operators, and a CG solver.

All solver-facing arrays are float64 numpy arrays.  Image fields are 2-D
(m rows, n cols; n = 1 covers vectors); gradient-space quantities are
stacked as (2, m, n) arrays holding the row- and column-difference
channels.  Linear operators carry explicit adjoints so the adjoint
identity <A x, y> = <x, A* y> can be checked directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

REFLEXIVE = "reflexive"
PERIODIC = "periodic"
_BOUNDARY_CONDITIONS = (REFLEXIVE, PERIODIC)

#: p'Ap at or below this multiple of ||p||^2 means A is not usably positive
#: definite for CG.
INDEFINITE_FLOOR = 1e-14


def as_field(x, copy: bool = False) -> Array:
    """Coerce ``x`` to a 2-D float64 field; 1-D input becomes a column."""
    # copy=False must still allow conversion copies (asarray semantics).
    if copy:
        arr = np.array(x, dtype=np.float64, copy=True)
    else:
        arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D field, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains non-finite entries")
    return arr


def norm(x) -> float:
    """Euclidean norm of the flattened array (real or complex)."""
    return float(np.linalg.norm(np.ravel(x)))


def inner(x, y) -> float:
    """Euclidean inner product of two real arrays, flattened."""
    return float(np.dot(np.ravel(x), np.ravel(y)))


@dataclass(frozen=True)
class LinearMap:
    """Matrix-free linear operator with an explicit adjoint.

    ``forward`` maps arrays of shape ``in_shape`` to ``out_shape``;
    ``adjoint`` maps the other way and must satisfy the adjoint identity
    ``<forward(x), y> == <x, adjoint(y)>`` for all real x, y.
    """

    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    forward: Callable[[Array], Array]
    adjoint: Callable[[Array], Array]
    name: str = "operator"

    def __call__(self, x: Array) -> Array:
        return self.forward(x)


def identity_map(shape: tuple[int, ...], scale: float = 1.0,
                 name: str = "identity") -> LinearMap:
    """`scale * I` on arrays of the given shape (self-adjoint)."""
    def apply(x):
        return scale * np.asarray(x, dtype=np.float64)

    return LinearMap(shape, shape, apply, apply, name=name)


def _check_bc(bc: str) -> None:
    if bc not in _BOUNDARY_CONDITIONS:
        raise ValueError(f"unknown boundary condition {bc!r}; "
                         f"expected one of {_BOUNDARY_CONDITIONS}")


def grad2(u: Array, bc: str = REFLEXIVE) -> tuple[Array, Array]:
    """Forward-difference gradient of a 2-D field.

    Returns ``(p, q)`` with ``p[i, j] = u[i+1, j] - u[i, j]`` and
    ``q[i, j] = u[i, j+1] - u[i, j]``.  Under reflexive boundaries the
    last row of ``p`` and last column of ``q`` are zero (the field is
    extended by repetition); periodic boundaries wrap around.
    """
    _check_bc(bc)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"grad2 expects a 2-D field, got ndim={u.ndim}")
    p = np.zeros_like(u)
    q = np.zeros_like(u)
    if bc == REFLEXIVE:
        p[:-1, :] = u[1:, :] - u[:-1, :]
        q[:, :-1] = u[:, 1:] - u[:, :-1]
    else:
        p = np.roll(u, -1, axis=0) - u
        q = np.roll(u, -1, axis=1) - u
    return p, q


def div2(p: Array, q: Array, bc: str = REFLEXIVE) -> Array:
    """Adjoint of :func:`grad2` under the same boundary condition.

    Note the sign convention: this is the exact adjoint of the
    forward-difference gradient, i.e. the *negative* of the usual
    discrete divergence.
    """
    _check_bc(bc)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"channel shapes differ: {p.shape} vs {q.shape}")
    if p.ndim != 2:
        raise ValueError(f"div2 expects 2-D channels, got ndim={p.ndim}")
    out = np.zeros_like(p)
    if bc == REFLEXIVE:
        # Last row of p / last column of q lie outside the range of grad2
        # and must not contribute.
        out[:-1, :] -= p[:-1, :]
        out[1:, :] += p[:-1, :]
        out[:, :-1] -= q[:, :-1]
        out[:, 1:] += q[:, :-1]
    else:
        out = (np.roll(p, 1, axis=0) - p) + (np.roll(q, 1, axis=1) - q)
    return out


def gradient_map(shape: tuple[int, int], bc: str = REFLEXIVE) -> LinearMap:
    """The gradient as a LinearMap from (m, n) fields to (2, m, n) stacks."""
    _check_bc(bc)
    m, n = shape

    def forward(u):
        return np.stack(grad2(u, bc))

    def adjoint(g):
        return div2(g[0], g[1], bc)

    return LinearMap((m, n), (2, m, n), forward, adjoint, name=f"grad2[{bc}]")


def dft2(u: Array) -> Array:
    """Unitary 2-D DFT (any m x n); the adjoint equals the inverse."""
    return np.fft.fft2(np.asarray(u), norm="ortho")


def idft2(uhat: Array) -> Array:
    """Unitary 2-D inverse DFT; exact inverse and adjoint of :func:`dft2`."""
    return np.fft.ifft2(np.asarray(uhat), norm="ortho")


def apply_mask(uhat: Array, mask: Array) -> Array:
    """Entrywise sampling mask; ``mask`` must be 0/1-valued."""
    mask = np.asarray(mask)
    uhat = np.asarray(uhat)
    if mask.shape != uhat.shape:
        raise ValueError(f"mask shape {mask.shape} != field shape {uhat.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be exactly 0 or 1")
    return uhat * mask


def laplacian_symbol(shape: tuple[int, int]) -> Array:
    """Fourier multiplier of div2(grad2(.)) under periodic boundaries.

    Real, nonnegative, zero only at the DC entry.
    """
    m, n = shape
    w1 = 2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(m) / m)
    w2 = 2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return w1[:, None] + w2[None, :]


class IndefiniteOperatorError(RuntimeError):
    """CG met a search direction with p'Ap <= INDEFINITE_FLOOR * ||p||^2."""


@dataclass(frozen=True)
class CgConfig:
    """Conjugate-gradient settings.

    ``fixed_iterations`` switches from run-to-tolerance to an exact inner
    iteration count (used by the experimental inexact solver mode); the
    residual test is then skipped except for an early exit on an exactly
    zero residual.
    """

    tolerance: float = 1e-5
    max_iterations: int = 500
    fixed_iterations: Optional[int] = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("CG tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("CG max_iterations must be >= 1")
        if self.fixed_iterations is not None and self.fixed_iterations < 1:
            raise ValueError("CG fixed_iterations must be >= 1 when set")


@dataclass(frozen=True)
class CgResult:
    x: Array
    iterations: int
    residual_norm: float
    converged: bool


def cg_solve(op, rhs: Array, cfg: CgConfig = CgConfig(),
             warm_start: Optional[Array] = None) -> CgResult:
    """Conjugate gradients for a self-adjoint positive definite operator.

    Parameters
    ----------
    op : LinearMap or callable
        The operator A; only its forward action is used.
    rhs : array
        Right-hand side b of A x = b.
    cfg : CgConfig
        Tolerance is relative to ||b|| (absolute when b = 0).
    warm_start : array, optional
        Initial iterate; defaults to zeros.

    Returns
    -------
    CgResult
        Iterate, iterations actually run, final residual norm, and
        whether the tolerance test holds at exit.

    Raises
    ------
    IndefiniteOperatorError
        If a search direction certifies the operator is not positive
        definite (names the operator).
    """
    apply = op.forward if isinstance(op, LinearMap) else op
    opname = op.name if isinstance(op, LinearMap) else getattr(op, "__name__", "operator")
    b = np.asarray(rhs, dtype=np.float64)
    if warm_start is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(warm_start, dtype=np.float64, copy=True)
        if x.shape != b.shape:
            raise ValueError(f"warm start shape {x.shape} != rhs shape {b.shape}")
        r = b - apply(x)

    ref = norm(b)
    if ref == 0.0:
        ref = 1.0
    rs = inner(r, r)
    rnorm = np.sqrt(rs)
    budget = cfg.fixed_iterations if cfg.fixed_iterations is not None else cfg.max_iterations
    to_tolerance = cfg.fixed_iterations is None

    p = r.copy()
    steps = 0
    while steps < budget:
        if rnorm == 0.0:
            break
        if to_tolerance and rnorm <= cfg.tolerance * ref:
            break
        Ap = apply(p)
        pAp = inner(p, Ap)
        if pAp <= INDEFINITE_FLOOR * inner(p, p):
            raise IndefiniteOperatorError(
                f"operator {opname!r} is not positive definite along a CG "
                f"direction (p'Ap = {pAp:.3e})")
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_next = inner(r, r)
        p = r + (rs_next / rs) * p
        rs = rs_next
        rnorm = np.sqrt(rs)
        steps += 1

    return CgResult(x=x, iterations=steps, residual_norm=float(rnorm),
                    converged=bool(rnorm <= cfg.tolerance * ref))


def to_dense(op: LinearMap) -> Array:
    """Materialize ``op`` as a dense matrix (columns = basis images)."""
    n_in = int(np.prod(op.in_shape))
    n_out = int(np.prod(op.out_shape))
    mat = np.zeros((n_out, n_in))
    for j in range(n_in):
        e = np.zeros(op.in_shape)
        e.flat[j] = 1.0
        mat[:, j] = np.ravel(op.forward(e))
    return mat


def adjoint_defect(op: LinearMap, rng: np.random.Generator,
                   trials: int = 100) -> float:
    """Largest normalized violation of <A x, y> = <x, A* y> over random pairs."""
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.in_shape)
        y = rng.standard_normal(op.out_shape)
        lhs = inner(op.forward(x), y)
        rhs = inner(x, op.adjoint(y))
        worst = max(worst, abs(lhs - rhs) / (1.0 + norm(x) * norm(y)))
    return worst
