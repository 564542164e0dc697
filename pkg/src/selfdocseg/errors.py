"""Exception types. Each carries a stable ``code`` string used in CLI messages."""


class SelfDocSegError(Exception):
    code = "ERROR"


class RegionPackingFailed(SelfDocSegError):
    code = "REGION_PACKING_FAILED"


class ShapeError(SelfDocSegError, ValueError):
    code = "SHAPE_ERROR"


class NoComponents(SelfDocSegError):
    code = "NO_COMPONENTS"


class Vanished(SelfDocSegError):
    code = "VANISHED"


class EmptyMask(SelfDocSegError, ValueError):
    code = "EMPTY_MASK"


class EmptyMaskNormalizer(EmptyMask):
    code = "EMPTY_MASK_NORMALIZER"


class BatchMismatch(SelfDocSegError, ValueError):
    code = "BATCH_MISMATCH"


class ConfigError(SelfDocSegError, ValueError):
    code = "CONFIG_ERROR"

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class PipelineIOError(SelfDocSegError, OSError):
    code = "IO_ERROR"

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)


class EmptySplit(SelfDocSegError):
    code = "EMPTY_SPLIT"


class MissingCheckpoint(SelfDocSegError):
    code = "MISSING_CHECKPOINT"
