'''cdbuffer module errors.'''


# --- Tensor errors -----------------------------------------------------------
class TensorError(Exception):
    pass


class DimensionError(TensorError):
    pass


class RankError(TensorError):
    pass


class DegenerateBatchError(TensorError):
    def __init__(self, count: int):
        self.count = count
        super().__init__(
            'Batch normalization in train mode needs at least 2 values per '
            'channel (N*H*W = {}).'.format(count)
        )

    def __reduce__(self):
        return (DegenerateBatchError, (self.count,))


# --- Configuration errors ----------------------------------------------------
class ConfigError(Exception):
    pass


# --- Dataset errors ----------------------------------------------------------
class DatasetError(Exception):
    pass


class EmptyDatasetError(DatasetError):
    def __init__(self, what: str = 'dataset'):
        self.what = what
        super().__init__('Empty {}; nothing to process.'.format(what))

    def __reduce__(self):
        return (EmptyDatasetError, (self.what,))


class CorruptionError(DatasetError):
    pass


# --- Numerical errors --------------------------------------------------------
class NumericalError(Exception):
    pass


class TrainingError(NumericalError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(
            'Source training diverged at step {} (loss={}).'.format(step, loss)
        )

    def __reduce__(self):
        return (TrainingError, (self.step, self.loss))


class AdaptationError(NumericalError):
    def __init__(self, step: int, decomposition: dict):
        self.step = step
        self.decomposition = decomposition
        detail = ', '.join(
            '{}={}'.format(k, v) for k, v in decomposition.items()
        )
        super().__init__(
            'Non-finite adaptation loss at step {}: {}'.format(step, detail)
        )

    def __reduce__(self):
        return (AdaptationError, (self.step, self.decomposition))


# --- Stats & record errors ---------------------------------------------------
class StatsError(Exception):
    pass


class RecordError(Exception):
    pass
