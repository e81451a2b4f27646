"""Exception hierarchy shared by all simulation stages."""


class NVImplantError(Exception):
    """Base class for errors raised by this package."""


class UnknownSpeciesError(NVImplantError, KeyError):
    pass


class CountingUnavailableError(NVImplantError):
    """The trap state cannot be imaged (no laser-cooled ion to fluoresce)."""


class DetectionUnavailableError(NVImplantError):
    pass


class NonTerminationError(NVImplantError):
    """An automated sequence hit its iteration cap."""


class AmbiguousSeparationError(NVImplantError):
    pass


class ConvergenceError(NVImplantError):
    pass


class NonIdentifiableError(NVImplantError):
    pass


class UnidentifiedSpeciesError(NVImplantError):
    pass


class FitFailure(NVImplantError):
    pass


class ConfigError(NVImplantError, ValueError):
    pass
