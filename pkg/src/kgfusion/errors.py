"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numerical failures -> 3.
"""


class KgfusionError(Exception):
    pass


class UsageError(KgfusionError):
    pass


class DataError(KgfusionError):
    pass


class NumericalError(KgfusionError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
