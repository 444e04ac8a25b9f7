"""Exception hierarchy shared by all dermabench modules."""


class DermabenchError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(DermabenchError, ValueError):
    """Invalid configuration value (maps to CLI exit code 2)."""


class DatasetError(DermabenchError):
    """Dataset layout or content problem."""


class DatasetStructureError(DatasetError):
    def __init__(self, missing_class, root):
        self.missing_class = missing_class
        self.root = root
        super().__init__(f"dataset root {root} has no '{missing_class}' subdirectory")


class EmptyClassError(DatasetError):
    def __init__(self, label, root):
        self.label = label
        self.root = root
        super().__init__(f"class '{label}' has no decodable images under {root}")


class ImageDecodeError(DatasetError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"cannot decode image {self.path}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class WeightsUnavailableError(DermabenchError):
    """Pretrained weights are neither cached nor fetchable."""


class CheckpointError(DermabenchError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DivergenceError(DermabenchError):
    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite training loss {value} at epoch {epoch}, batch {batch}")


class EvaluationError(DermabenchError):
    pass


class UndefinedMetricError(DermabenchError, ArithmeticError):
    """A metric whose denominator is zero was requested."""


class RenderError(DermabenchError):
    pass
