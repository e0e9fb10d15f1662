"""Simulation and numerical certification for a two-component branching
predator-prey system with state-proportional diffusion and jumps.

Subsystems
----------
``levy``
    Jump measure families with closed-form partial moments and tail sampling.
``model``
    Parameter container, standing-assumption validation, derived scalars.
``lyapunov``
    Lyapunov-type functions, generator quadrature, drift certificates.
``paths``
    Euler-type path engines for the system, its Markovian coupling, and the
    one-dimensional comparison processes, with shared-noise overlap coupling.
``ergodicity``
    Monte Carlo tail estimation, rate fits, comparison audits, bounds.
``cli``
    Config-driven experiment runner writing JSON summaries and CSV tables.
"""

from . import cli, ergodicity, errors, levy, lyapunov, model, paths  # noqa: F401

__version__ = "0.1.0"
