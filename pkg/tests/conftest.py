"""Shared instances, reference runs, and independent oracles for the suite.

The tight references here are solver self-runs driven to 1e-12 KKT
residuals with a near-machine-precision inner tolerance; their dual
pairs serve as the known solution points for Fejer and certificate
checks, with a small pad absorbing the reference's own inaccuracy.
"""

import numpy as np
import pytest

from pmm import apps, core, linops


# ---------------------------------------------------------------------------
# instance builders

def make_two_pixel(zeta, lam=1.0, cg_tol=1e-13):
    """The 2x1 denoising instance with b = (0, 1)."""
    tv = apps.TvProblem(np.array([[0.0], [1.0]]), zeta=zeta)
    return apps.build_tv_problem(
        tv, lam, linops.CgConfig(tolerance=cg_tol, max_iterations=50))


def two_pixel_solution(b1, b2, zeta):
    """Closed-form minimizer of zeta |u2 - u1| + half the squared misfit."""
    if abs(b2 - b1) > 2.0 * zeta:
        s = np.sign(b2 - b1)
        return np.array([[b1 + zeta * s], [b2 - zeta * s]])
    mean = 0.5 * (b1 + b2)
    return np.array([[mean], [mean]])


def make_small_tv(shape=(8, 8), zeta=0.1, seed=5, lam=1.0, cg_tol=1e-13,
                  variance=0.02):
    """Seeded noisy-blocks denoising instance at reference-grade inner
    tolerance (loose CG floors the reachable KKT residual)."""
    truth = apps.blocks_phantom(*shape)
    noisy = apps.add_gaussian_noise(truth, variance, seed)
    tv = apps.TvProblem(noisy, zeta=zeta)
    return apps.build_tv_problem(
        tv, lam, linops.CgConfig(tolerance=cg_tol, max_iterations=2000))


def constant_schedule(rho):
    def schedule(_k, _rho=rho):
        return _rho
    return schedule


# ---------------------------------------------------------------------------
# reference runs and distance bounds

def tight_reference(problem, lam=1.0, eps=1e-12, max_iterations=20000):
    """Run to ||r_p||, ||r_d|| <= eps; returns the full RunResult."""
    cfg = core.SolverConfig(lam=lam, max_iterations=max_iterations,
                            stopping=(core.KktStop(eps, eps),))
    result = core.solve(problem, cfg, track_ergodic=False)
    assert result.stop_reason in ("kkt", "kkt_exact"), \
        f"reference run did not converge: {result.stop_reason}"
    return result


def d0_from_reference(reference, pad=1e-6):
    """Upper bound on the zero start's distance to the dual solution set,
    padded for the reference pair's own residual-level inaccuracy."""
    dist = np.sqrt(linops.norm(reference.state.z) ** 2
                   + linops.norm(reference.state.w) ** 2)
    return dist * (1.0 + 1e-9) + pad


class StepTrace:
    """on_record collector keeping (state_prev, state_next, record)."""

    def __init__(self):
        self.triples = []

    def __call__(self, state_prev, state_next, record):
        self.triples.append((state_prev, state_next, record))


# ---------------------------------------------------------------------------
# independent dense oracles

def dense_grad_matrix(shape, bc):
    """Dense matrix of the forward-difference gradient, built entry by
    entry from the stencil definition (independent of pmm.linops).

    Rows are ordered as the raveled (2, m, n) stack: the row-difference
    channel first, then the column-difference channel.
    """
    m, n = shape
    size = m * n
    P = np.zeros((size, size))
    Q = np.zeros((size, size))
    for i in range(m):
        for j in range(n):
            r = i * n + j
            if i + 1 < m:
                P[r, (i + 1) * n + j] += 1.0
                P[r, r] -= 1.0
            elif bc == linops.PERIODIC:
                P[r, ((i + 1) % m) * n + j] += 1.0
                P[r, r] -= 1.0
            if j + 1 < n:
                Q[r, i * n + (j + 1)] += 1.0
                Q[r, r] -= 1.0
            elif bc == linops.PERIODIC:
                Q[r, i * n + ((j + 1) % n)] += 1.0
                Q[r, r] -= 1.0
    return np.vstack([P, Q])


def to_dense_adjoint(op):
    """Dense matrix of op.adjoint (columns = adjoint images of basis)."""
    n_in = int(np.prod(op.in_shape))
    n_out = int(np.prod(op.out_shape))
    mat = np.zeros((n_in, n_out))
    for j in range(n_out):
        e = np.zeros(op.out_shape)
        e.flat[j] = 1.0
        mat[:, j] = np.ravel(op.adjoint(e))
    return mat


def tv_two_pixel_grid_argmin(b1, b2, zeta, lo=-1.0, hi=2.0):
    """Brute-force minimizer on the 1e-4 grid over [lo, hi]^2.

    Staged refinement: each pass scans a full grid at its resolution,
    and the next pass re-scans a window around the incumbent whose
    radius provably contains the continuous minimizer (the objective is
    1-strongly convex, and the value gap to the best grid point is at
    most the subgradient bound times half a grid diagonal).
    """
    assert lo <= b1 <= hi and lo <= b2 <= hi
    slope = zeta + (hi - lo)
    grad_bound = np.sqrt(2.0) * slope
    c1 = c2 = 0.5 * (lo + hi)
    radius = 0.5 * (hi - lo)
    for step in (1e-2, 1e-3, 1e-4):
        u1s = np.arange(c1 - radius, c1 + radius + 0.5 * step, step)
        u2s = np.arange(c2 - radius, c2 + radius + 0.5 * step, step)
        values = (zeta * np.abs(u2s[None, :] - u1s[:, None])
                  + 0.5 * ((u1s - b1) ** 2)[:, None]
                  + 0.5 * ((u2s - b2) ** 2)[None, :])
        i, j = np.unravel_index(np.argmin(values), values.shape)
        c1, c2 = float(u1s[i]), float(u2s[j])
        radius = np.sqrt(np.sqrt(2.0) * grad_bound * step) + step
    return np.array([[c1], [c2]])


def ergodic_direct_from_records(records, d):
    """Ergodic quantities evaluated directly from stored history.

    Recomputes the weighted averages and the defining eps sums
    term by term; the running-sum implementation must reproduce these.
    """
    weights = np.array([rec.rho * rec.gamma for rec in records])
    G = float(np.sum(weights))
    u_bar = sum(w * rec.u for w, rec in zip(weights, records)) / G
    v_bar = sum(w * rec.v for w, rec in zip(weights, records)) / G
    x_bar = sum(w * rec.x for w, rec in zip(weights, records)) / G
    y_bar = sum(w * rec.y for w, rec in zip(weights, records)) / G
    Mu = [-rec.a for rec in records]
    Cv = [d - rec.b for rec in records]
    Mu_bar = sum(w * img for w, img in zip(weights, Mu)) / G
    Cv_bar = sum(w * img for w, img in zip(weights, Cv)) / G
    eps_u = sum(w * linops.inner(Mu_bar - img, rec.y)
                for w, img, rec in zip(weights, Mu, records)) / G
    eps_v = sum(w * linops.inner(Cv_bar - img, rec.x)
                for w, img, rec in zip(weights, Cv, records)) / G
    return {
        "big_gamma": G, "u_bar": u_bar, "v_bar": v_bar,
        "x_bar": x_bar, "y_bar": y_bar,
        "r_primal": Mu_bar + Cv_bar - d, "r_dual": x_bar - y_bar,
        "eps_u": eps_u, "eps_v": eps_v,
    }


# ---------------------------------------------------------------------------
# session fixtures

@pytest.fixture(scope="session")
def two_pixel_tight():
    """{zeta: (problem, tight RunResult)} for the two closed-form cases."""
    out = {}
    for zeta in (0.2, 0.6):
        problem = make_two_pixel(zeta)
        out[zeta] = (problem, tight_reference(problem))
    return out


@pytest.fixture(scope="session")
def small_tv_tight():
    """(problem, tight RunResult) for the seeded 8x8 blocks instance."""
    problem = make_small_tv()
    return problem, tight_reference(problem)
