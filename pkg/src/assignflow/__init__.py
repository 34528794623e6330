"""Contextual data labeling on graphs via assignment flows.

The package is organized around what each layer does:

- ``geometry``: the information geometry of the probability simplex
- ``graph``: neighborhood structure and row-stochastic averaging
- ``flows``: likelihood/similarity maps, the flows, and their calculus
- ``variational``: the nonconvex grid functional and its PALM solver
- ``data``: images, prototypes, distances, labelings, and their files
- ``cli``: the ``assignflow`` command
"""

from . import cli, data, flows, geometry, graph, report, variational
from .errors import (
    ConvergenceError,
    ImageFormatError,
    NotApplicableError,
    SingularityError,
)

__version__ = "0.1.0"

__all__ = [
    "geometry",
    "graph",
    "flows",
    "variational",
    "data",
    "report",
    "cli",
    "SingularityError",
    "NotApplicableError",
    "ConvergenceError",
    "ImageFormatError",
    "__version__",
]
