class AugmentationError(Exception):
    """Base class for every error raised by countaug"""


class ConfigError(AugmentationError, ValueError):
    pass


class SceneGenerationExhausted(AugmentationError, RuntimeError):
    pass


class DanglingCategoryError(AugmentationError, ValueError):
    pass


class InvalidCategoryName(AugmentationError, ValueError):
    pass


class DatasetSchemaError(AugmentationError, ValueError):
    pass


class MissingArtifactError(AugmentationError, FileNotFoundError):
    pass


class ChecksumMismatchError(AugmentationError, ValueError):
    pass


class ShapeMismatchError(AugmentationError, ValueError):
    pass


class UnderfitError(AugmentationError, RuntimeError):
    """A pretraining phase missed its accuracy bar within the step budget"""


class DivergenceError(AugmentationError, RuntimeError):
    pass


class FrozenParameterError(AugmentationError, RuntimeError):
    """A parameter set that must stay frozen changed its hash"""


EXIT_CODES = {ConfigError: 1, MissingArtifactError: 2}


def exit_code_for(error: BaseException) -> int:
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    return 3
