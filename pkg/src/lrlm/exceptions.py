class LRLMError(Exception):
    """Base class for all errors raised by this package."""


class KGFormatError(LRLMError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DanglingReferenceError(LRLMError, ValueError):
    pass


class UnknownTopicError(LRLMError, KeyError):
    pass


class EdgeNotInSubgraphError(LRLMError, KeyError):
    pass


class EmptyCorpusError(LRLMError, ValueError):
    pass


class LatticeRangeError(LRLMError, ValueError):
    pass


class CapExceededError(LRLMError, RuntimeError):
    pass


class DimensionError(LRLMError, ValueError):
    pass


class MissingSpellingError(LRLMError, ValueError):
    pass


class EmptyEdgeListError(LRLMError, ValueError):
    pass


class DivergenceError(LRLMError, FloatingPointError):
    pass


class CheckpointError(LRLMError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass
