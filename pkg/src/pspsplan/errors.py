"""Exception types shared across the package."""

from __future__ import annotations


class PspsplanError(Exception):
    """Base class for all package-specific errors."""


class NetworkValidationError(PspsplanError, ValueError):
    """A network file or in-memory network violates a structural invariant."""


class ScheduleError(PspsplanError, ValueError):
    """A fire schedule is inconsistent with the network or horizon."""


class ContractViolationError(PspsplanError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class DegenerateDistributionError(PspsplanError, ValueError):
    """Normalization failed because all raw probabilities are zero."""


class SizeCapError(PspsplanError, ValueError):
    """An enumeration-based routine was asked to exceed its size cap."""


class ModelBuildError(PspsplanError, RuntimeError):
    """The single-stage optimization model could not be assembled."""


class SolverError(PspsplanError, RuntimeError):
    """The solver backend failed (timeout, numerical breakdown, ...)."""


class InfeasibleModelError(SolverError):
    """The stage model was reported infeasible.

    Slack variables guarantee recourse for every valid system state, so
    infeasibility indicates a model bug. ``rows`` carries the names of
    constraints that required elastic relaxation, when available.
    """

    def __init__(self, message: str, rows: list[str] | None = None):
        super().__init__(message)
        self.rows = rows or []


class ConfigError(PspsplanError, ValueError):
    """A run configuration is invalid (usage error, exit code 2)."""


class CheckpointMismatchError(PspsplanError, ValueError):
    """A value-function checkpoint does not match the target network/config."""


class ConvergenceError(PspsplanError, RuntimeError):
    """Training stopped at the iteration cap without reaching tolerance."""
