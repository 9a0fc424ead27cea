"""sphax: a task-based SPH engine.

Density/force/integration pipeline over a hierarchical cell grid, executed
by a dependency/conflict-aware work-stealing scheduler, distributed across
simulated ranks via a work-balancing graph partition with fully
asynchronous per-cell messages.
"""

from . import backend
from .harness import RunConfig, generate_ics, run_simulation
from .sph import ParticleSet, SphaxError, SphConfig

__version__ = "0.1.0"

__all__ = [
    "backend", "ParticleSet", "RunConfig", "SphaxError", "SphConfig",
    "generate_ics", "run_simulation", "__version__",
]
