"""Exception hierarchy shared by all simulator modules."""


class PlanesimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(PlanesimError):
    """Scenario configuration is invalid.

    ``errors`` holds one human-readable message per problem, each prefixed
    with the config field path, so callers can report every issue at once.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class SchedulingInPast(PlanesimError):
    """An event was scheduled before the current simulation clock."""


class TransitionConflict(PlanesimError):
    """A node is already transitioning (or under maintenance)."""


class Unauthorized(PlanesimError):
    """The node is not allowed to move to the requested target."""


class OverlappingMaintenance(PlanesimError):
    """A node already has a maintenance window intersecting the new one."""


class InvalidJob(PlanesimError):
    """A batch job failed submission validation."""


class UnknownPath(PlanesimError):
    """Network path kind missing from the runtime factor table."""


class UnknownBaseModel(PlanesimError):
    """Recipe references a base model absent from the catalog."""


class UnknownJob(PlanesimError):
    """Bridge poll/cancel of a job id that was never submitted."""


class DoubleSettle(PlanesimError):
    """A request was settled more than once."""


class InfeasibleProfile(PlanesimError):
    """A hot model needs more GPUs than a single node provides."""


class MissingBaseline(PlanesimError):
    """Speedup table requested against a label with no runtime."""


class EmptyTrace(PlanesimError):
    """SLO report over a trace with no completed requests."""
