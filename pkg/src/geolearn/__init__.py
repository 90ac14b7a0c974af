"""Simulation toolkit for geometric learning dynamics.

Submodules
----------
spd           SPD matrices, eigen-decomposition and the metric family g(kappa)
landscape     analytic losses and Gaussian gradient-noise models
langevin      Euler-Maruyama ensembles of the covariant Langevin equation
fokker_planck finite-volume Fokker-Planck solver and entropy bookkeeping
evolution     jump-and-acceptance chains and the mean-trait ODE
quantum       effective/quantum/neural potentials and a 1D Schrödinger solver
optimizer     covariant gradient descent with online noise estimation
cli           experiment runner
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .spd import Interp12, Interp123, PowerLaw, SpdMatrix, metric_from_kappa  # noqa: E402
from .fokker_planck import GridDensity, GridSpec  # noqa: E402
