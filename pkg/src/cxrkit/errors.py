"""Exception hierarchy. Every domain failure raised by the toolkit derives from
:class:`CxrkitError`, which is what the CLI maps to exit code 1."""


class CxrkitError(Exception):
    """Base class for domain errors."""


class InvalidReport(CxrkitError):
    pass


class EmptyReport(InvalidReport):
    pass


class NoUsableSection(InvalidReport):
    pass


class SectionMissing(CxrkitError):
    pass


class AllRecordsInvalid(CxrkitError):
    pass


class EmptyCorpus(CxrkitError):
    pass


class EmptyInput(CxrkitError):
    pass


class TooFewPairs(CxrkitError):
    pass


class LengthMismatch(CxrkitError):
    pass


class IdMismatch(CxrkitError):
    pass


class KernelTooLarge(CxrkitError):
    pass


class ZeroNorm(CxrkitError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyText(CxrkitError):
    pass


class Divergence(CxrkitError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ModelFormatError(CxrkitError):
    pass


class LexiconError(CxrkitError):
    pass
