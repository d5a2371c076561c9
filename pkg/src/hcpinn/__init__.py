"""Hard- and soft-constraint PINN solvers for elliptic and parabolic interface optimal control."""

__version__ = "0.1.0"

from .problems import build_example  # noqa: F401
