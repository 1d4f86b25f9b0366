"""Projective method of multipliers for  min f(u) + g(v)  s.t.  M u + C v = d.

The solver core (``pmm.core``) runs relaxed projections of the dual
pair onto separating half-spaces built from the two subproblem oracles;
``pmm.ergodic`` maintains weighted iterate averages and evaluates the
O(1/sqrt(k)) / O(1/k) complexity certificates; ``pmm.apps`` assembles
TV-denoising and Fourier-sampling instances and a relaxed ADMM
baseline; ``pmm.cli`` runs config-driven experiments.
"""

from . import apps, cli, core, ergodic, linops, prox
from .apps import (AdmmConfig, CsProblem, TvProblem, admm_run,
                   build_cs_problem, build_tv_problem, shepp_logan)
from .core import (DualScaledStop, KktStop, ProblemSpec, RelativeChangeStop,
                   SolverConfig, SolverState, pmm_step, solve)
from .ergodic import BoundCertificate, ErgodicState, accumulate, ergodic_report
from .linops import CgConfig, LinearMap, cg_solve, dft2, div2, grad2, idft2
from .prox import SubproblemOracle, shrink

__version__ = "0.1.0"

__all__ = [
    "apps", "cli", "core", "ergodic", "linops", "prox",
    "AdmmConfig", "CsProblem", "TvProblem", "admm_run", "build_cs_problem",
    "build_tv_problem", "shepp_logan",
    "DualScaledStop", "KktStop", "ProblemSpec", "RelativeChangeStop",
    "SolverConfig", "SolverState", "pmm_step", "solve",
    "BoundCertificate", "ErgodicState", "accumulate", "ergodic_report",
    "CgConfig", "LinearMap", "cg_solve", "dft2", "div2", "grad2", "idft2",
    "SubproblemOracle", "shrink",
    "__version__",
]
