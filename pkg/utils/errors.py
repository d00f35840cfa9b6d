from typing import Iterable, Optional


class ReIDError(ValueError):
    """Base class for every failure the pipeline reports"""


class SchemaMismatch(ReIDError):
    pass


class IndexOutOfRange(ReIDError):
    pass


class ShapeMismatch(ReIDError):
    pass


class NonFinite(ReIDError):
    pass


class InvalidParam(ReIDError):
    pass


class ConfigError(ReIDError):
    pass


class DegeneratePair(ReIDError):
    """Pair with no exclusive or no common attributes (lambda undefined)"""


class BatchTooSmall(ReIDError):
    pass


class NonFiniteLoss(ReIDError):
    pass


class TooFewIdentities(ReIDError):
    pass


class EmptyGallery(ReIDError):
    pass


class NoValidQueries(ReIDError):
    pass


class UnknownImage(ReIDError):
    pass


class ParseError(ReIDError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingAttributes(ReIDError):
    def __init__(self, person_ids: Iterable[str]):
        self.person_ids = sorted(str(p) for p in person_ids)
        super().__init__(f"no attribute annotation for person_id(s): {', '.join(self.person_ids)}")


class MissingArtifact(ReIDError):
    def __init__(self, what: str, path):
        self.path = path
        super().__init__(f"missing {what}: {path}")


class OracleMismatch(ReIDError):
    pass
