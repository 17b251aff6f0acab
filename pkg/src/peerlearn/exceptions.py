"""Exception hierarchy shared by every module."""


class PeerLearningError(Exception):
    """Base class for all errors raised by peerlearn."""


class InputError(PeerLearningError, ValueError):
    """Invalid data handed to an operation (bad label, empty input, ...)."""


class ConfigError(PeerLearningError, ValueError):
    """Invalid hyperparameter or experiment configuration."""


class ParseError(PeerLearningError, ValueError):
    """A peer spec string or a file could not be parsed.

    ``position`` is the 0-based character offset (peer specs) or the
    1-based line number (files) where parsing failed, when known.
    """

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class NumericError(PeerLearningError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(PeerLearningError, RuntimeError):
    """Training diverged.

    Carries the epoch and the peer index where the loss became non-finite.
    """

    def __init__(self, message, epoch=None, peer=None):
        super().__init__(message)
        self.epoch = epoch
        self.peer = peer
