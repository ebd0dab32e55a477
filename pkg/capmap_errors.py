#!/usr/bin/env python3
"""
Error types shared by every capmap module.

Each error knows the CLI exit code it maps to, and pipelines attach the
name of the stage that raised it so batch logs point at the failing step.
"""

from typing import Dict, List, Optional, Sequence, Tuple

# Stable CLI exit-code table
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TOPOLOGY = 3
EXIT_SOLVER = 4
EXIT_FLIP = 5
EXIT_ILL_POSED = 6


class CapMapError(Exception):
    """Base class for all capmap failures."""

    exit_code = EXIT_SOLVER

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def with_stage(self, stage: str) -> "CapMapError":
        """Tag the error with a pipeline stage unless it already has one."""
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class ArgumentError(CapMapError, ValueError):
    """Invalid argument or option value."""

    exit_code = EXIT_USAGE


class PoleError(ArgumentError):
    """Point too close to the projection pole."""


class MeshFormatError(CapMapError):
    """Mesh file could not be parsed."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        location = ""
        if path:
            location += f"{path}"
        if line is not None:
            location += f":{line}"
        super().__init__(f"{location}: {message}" if location else message)
        self.line = line
        self.path = path


class TopologyError(CapMapError):
    """Mesh violates a connectivity invariant."""

    exit_code = EXIT_TOPOLOGY


class DegenerateGeometryError(CapMapError):
    """A face (or vertex) has vanishing area."""

    exit_code = EXIT_TOPOLOGY

    def __init__(self, message: str, faces: Sequence[int] = (), stage: Optional[str] = None):
        super().__init__(message, stage)
        self.faces = [int(f) for f in faces]


class SolverError(CapMapError):
    """Numerical solver failed."""

    exit_code = EXIT_SOLVER


class SingularMapError(SolverError):
    """Map has a vanishing f_z on some face."""


class InvalidCoefficientError(SolverError):
    """Beltrami coefficient with modulus >= 1."""


class ConstraintError(SolverError):
    """Constraint set does not pin down the solution."""


class EmptyCellError(SolverError):
    """Power cell stayed empty, or below the mass floor, after all backtracking attempts."""

    def __init__(self, message: str, site: int, stage: Optional[str] = None):
        super().__init__(message, stage)
        self.site = int(site)


class CoverageError(SolverError):
    """Too many pullback points fell outside the planar mesh."""


class PipelineError(SolverError):
    """Every radius evaluation of the search failed."""

    def __init__(self, message: str, failures: List[Tuple[float, str]], stage: Optional[str] = None):
        super().__init__(message, stage)
        self.failures = failures

    def failure_table(self) -> Dict[str, str]:
        return {f"{r:.6g}": reason for r, reason in self.failures}


class FlipError(CapMapError):
    """Output map contains faces with reversed orientation."""

    exit_code = EXIT_FLIP

    def __init__(self, message: str, faces: Sequence[int] = (), stage: Optional[str] = None):
        super().__init__(message, stage)
        self.faces = [int(f) for f in faces]


class IllPosedFitError(CapMapError):
    """Least-squares problem is rank deficient."""

    exit_code = EXIT_ILL_POSED


class DegenerateShapeError(IllPosedFitError):
    """Best-fit linear transform is (nearly) singular."""
