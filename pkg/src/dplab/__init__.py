"""Simulation and verification lab for log-optimal investment with default.

Subpackages by concern:

* :mod:`dplab.paths` — grids, Brownian/jump path sampling, refinement.
* :mod:`dplab.random_times` — default-time models and their closed forms.
* :mod:`dplab.market` — asset and wealth simulation, admissibility.
* :mod:`dplab.optimizer` — first-order-condition solvers, strategy builders.
* :mod:`dplab.verifier` — statistical checks of optimality and structure.
* :mod:`dplab.chaos`, :mod:`dplab.poisson_chaos` — symbolic chaos algebra.
* :mod:`dplab.cli` — scenario runner.
"""

__version__ = "0.1.0"

__all__ = ["paths", "random_times", "market", "optimizer", "verifier",
           "chaos", "poisson_chaos", "rng"]
