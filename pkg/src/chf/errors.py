"""Exception types raised by the simulation modules."""


class ChfError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ChfError, ValueError):
    pass


class IntegrationDiverged(ChfError):
    """A state vector became non-finite or exceeded the blow-up threshold."""


class DomainExit(ChfError):
    """The plant state left the (inflated) domain box."""


class InvalidOrder(ChfError, ValueError):
    pass


class ControllerDiverged(IntegrationDiverged):
    """Tracking error or integrator state blew up.

    For the SDS controller this is the signature of a sign-improper
    inverse-dynamics model.
    """


class NetworkDiverged(IntegrationDiverged):
    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class InvalidThreshold(ChfError, ValueError):
    pass


class OracleUnavailable(ChfError):
    pass


class NotPositiveDefinite(ChfError, ValueError):
    pass


class NeedMoreSamples(ChfError):
    pass


class InvalidConfig(ChfError, ValueError):
    pass


class HierarchyError(ChfError, ValueError):
    pass


class UnknownExperiment(ChfError, KeyError):
    pass
