"""Two-scale numerics for conservative Kawasaki dynamics: lattice, spline and continuum levels."""

__version__ = "0.1.0"

from .core import (ConfigurationError, MultiscaleGrid, SingleSitePotential, cosine_potential,  # noqa: E402
                   gaussian_potential, make_potential)
from .operators import OperatorCache, assemble, get_cache  # noqa: E402
from .splines import SplineField  # noqa: E402

__all__ = ["__version__", "ConfigurationError", "MultiscaleGrid", "SingleSitePotential", "cosine_potential",
           "gaussian_potential", "make_potential", "OperatorCache", "assemble", "get_cache", "SplineField"]
