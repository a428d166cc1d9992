from __future__ import annotations

from typing import Any


class InvalidGameSpec(ValueError):
    """Raised when a game description is outside the supported family."""


class SolverError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics: dict[str, Any] = dict(diagnostics or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = " ".join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
        return f"{base} ({details})"


class BootstrapError(SolverError):
    """No starting solution could be found within the restart budget."""


class StuckBranchError(SolverError):
    """Continuation step size fell below the floor without an accepted step."""
