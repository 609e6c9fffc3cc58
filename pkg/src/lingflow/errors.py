"""Exception hierarchy.

Every error raised by the library derives from :class:`LingflowError`. The
three intermediate classes map onto CLI exit codes: config errors exit 1,
data errors exit 2, transport exhaustion exits 3.
"""


class LingflowError(Exception):
    exit_code = 2


class ConfigError(LingflowError):
    exit_code = 1


class DataError(LingflowError):
    exit_code = 2


class TransportError(LingflowError):
    exit_code = 3


class ParseError(DataError):
    """A trace could not be parsed. ``code`` is ``MissingAnswer`` or ``UnclosedTag``."""

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)


class SchemaError(DataError):
    pass


class FormatError(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyIndex(DataError):
    pass


class EmptyPool(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyAfterNormalization(DataError):
    pass


class PageMismatch(DataError):
    pass


class NoPerceptionData(DataError):
    pass


class NoHits(DataError):
    pass


class NoCorrect(DataError):
    pass


class JudgeParseError(DataError):
    pass


class MissingParam(ConfigError):
    pass


class JudgeUnavailable(ConfigError):
    pass


class NonRetriableStatus(TransportError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        super().__init__(f"HTTP {status}: {body[:200]}")


class EmptyReply(TransportError):
    pass


class JudgeTransportError(TransportError):
    pass
