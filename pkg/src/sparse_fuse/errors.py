# Copyright 2026 sparse-fuse contributors

"""Exception families raised by sparse-fuse.

The CLI maps each family to an exit code, see `sparse_fuse.cli`.
"""


class SparseFuseError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(SparseFuseError, ValueError):
    """A configuration file, override or RunConfig is invalid."""


class ShapeError(SparseFuseError, ValueError):
    """Array ranks or dimensions do not fit together."""


class DivergenceError(SparseFuseError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, components: dict[str, float]):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{k}={v!r}" for k, v in sorted(self.components.items()))
        super().__init__(f"non-finite loss at step {step}: {detail}")


class PropertyFailure(SparseFuseError):
    """A verification property did not hold."""

    def __init__(self, name: str, message: str, case: dict | None = None):
        self.name = name
        self.case = case or {}
        super().__init__(f"{name}: {message}")


class NonFiniteError(SparseFuseError, ArithmeticError):
    """A value that must be finite (sample point, objective) is NaN or infinite."""


class GeometryError(SparseFuseError, ValueError):
    """An anchor, rotation, motion or camera violates its geometric constraints."""
