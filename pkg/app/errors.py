"""Exception hierarchy shared by the graph store, services and CLI."""


class GttfError(Exception):
    """Base class for every error raised by this package."""


class MalformedInputError(GttfError, ValueError):
    """Edge-list / snapshot content that cannot be turned into a graph."""


class ContractViolation(GttfError, ValueError):
    """A caller broke a documented pre-condition."""


class OracleGuardError(GttfError):
    """Dense oracles refuse graphs above the desk-scale node guard."""


class EnumerationGuardError(GttfError):
    """Exhaustive enumeration would exceed the configured limit."""


class InfeasibleGraphError(GttfError, ValueError):
    """Generator parameters admit no graph."""


class NegativeSamplingError(GttfError):
    """Not enough non-edges to draw the requested negative pairs."""


class TrainingDivergedError(GttfError):
    """Loss or gradient became NaN / Inf during training."""
