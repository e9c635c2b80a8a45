class CPCAError(Exception):
    pass


class ContractError(CPCAError, ValueError):
    """Raised when an input violates a shape or value contract."""


class DataError(CPCAError):
    pass


class SynthesisError(DataError):
    pass


class ConfigError(CPCAError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TrainingError(CPCAError):
    pass


class CheckpointError(CPCAError):
    code = "checkpoint"


class CheckpointCorruptError(CheckpointError):
    code = "corrupt"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointDigestError(CheckpointError):
    code = "digest"
