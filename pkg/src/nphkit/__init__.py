"""nphkit: weighted log-rank combination tests, survival estimands, and
trial design under non-proportional hazards.

Submodules:
    data        survival datasets, risk tables, Kaplan-Meier
    ranktests   weighted log-rank tests, combination test, weighted HR
    estimands   treatment-effect summaries (Cox, RMST, milestones, ...)
    mvnorm      multivariate normal rectangles and critical values
    simulation  piecewise-exponential trial simulation
    design      sample size and boundary derivation
    groupseq    group-sequential spending and boundary recomputation
    cli         command-line entry points

Set NPHKIT_BACKEND=numpy to force the pure-numpy compute path (numba is
used by default when importable).
"""

from ._backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
