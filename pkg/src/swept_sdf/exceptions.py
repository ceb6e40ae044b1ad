"""
Exception hierarchy shared by every swept_sdf module.

Library code raises these; only :mod:`swept_sdf.cli` turns them into exit codes.
"""


class SweptSdfError(Exception):
    """Base class for all errors raised by swept_sdf."""


class InputError(SweptSdfError, ValueError):
    """Invalid user input: files, shapes, parameter ranges."""


class MeshError(InputError):
    """Mesh could not be parsed or is not a closed, consistently oriented surface."""


class TrajectoryError(InputError):
    """Invalid trajectory data or a query outside the time horizon."""


class CollisionError(InputError):
    """Start or goal state places the robot inside an obstacle."""


class FlatnessSingularityError(SweptSdfError, ValueError):
    """Mass-normalized thrust vanishes, so the attitude is undefined (free fall)."""


class SolverError(SweptSdfError):
    """The optimizer could not start (non-finite objective or gradient)."""
