"""Exception hierarchy shared by all panelcf modules.

Every error carries a short machine-readable ``code`` and the name of the
module that raised it, so the CLI can emit structured error JSON.
"""

from __future__ import annotations


class PanelCFError(Exception):
    """Base class for all panelcf errors."""

    #: short machine-readable identifier, e.g. "schema"
    code = "error"
    #: CLI exit code for this class of failure
    exit_code = 1

    def __init__(self, message: str, module: str = ""):
        super().__init__(message)
        self.module = module

    def payload(self) -> dict:
        return {"code": self.code, "module": self.module, "message": str(self)}


class SchemaError(PanelCFError):
    """Input file or schema map does not match the expected layout."""

    code = "schema"
    exit_code = 2


class BalanceError(SchemaError):
    """Panel is not balanced (some unit is missing periods)."""

    code = "balance"


class MissingDataError(SchemaError):
    """Missing cells in the panel; no imputation is performed."""

    code = "missing_data"


class ConfigError(PanelCFError):
    """Invalid run configuration or DGP specification."""

    code = "config"
    exit_code = 2


class ShapeError(PanelCFError):
    """Array dimensions do not line up."""

    code = "shape"
    exit_code = 3


class DomainError(PanelCFError):
    """Numerical-domain violation (non-SPD matrix, quantile outside (0,1), ...)."""

    code = "domain"
    exit_code = 3


class RankError(PanelCFError):
    """Rank-deficient design or singular normal-equations matrix."""

    code = "rank"
    exit_code = 3


class DegenerateError(PanelCFError):
    """Too little data for the requested estimator."""

    code = "degenerate"
    exit_code = 3


class SeparationError(PanelCFError):
    """Perfect separation detected in a binary-response fit."""

    code = "separation"
    exit_code = 3


class ClampError(PanelCFError):
    """Working correlation produced a non-SPD matrix despite clamping."""

    code = "clamp"
    exit_code = 3


class SupportError(PanelCFError):
    """Evaluation point lies outside the estimated support."""

    code = "support"
    exit_code = 3


class UnsupportedError(PanelCFError):
    """Operation is deliberately unsupported in this context."""

    code = "unsupported"
    exit_code = 3
