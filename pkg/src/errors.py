"""Error types shared by the longmix modules.

Every error carries a module-qualified code (``module.Name``) and the exit code
the CLI reports for it: 2 for validation problems, 3 for estimation failures.
"""
from typing import Optional

VALIDATION_EXIT = 2
CONVERGENCE_EXIT = 3


class LongmixError(Exception):
    module = 'longmix'
    exit_code = VALIDATION_EXIT

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.message = message
        self.row = row
        self.column = column
        super().__init__(message)

    @property
    def code(self) -> str:
        return f"{self.module}.{type(self).__name__}"

    def __str__(self) -> str:
        location = []
        if self.row is not None:
            location.append(f"row {self.row}")
        if self.column is not None:
            location.append(f"column '{self.column}'")
        if location:
            return f"{self.message} ({', '.join(location)})"
        return self.message


# dataset
class DatasetError(LongmixError):
    module = 'dataset'


class MissingColumn(DatasetError):
    pass


class DuplicateTriple(DatasetError):
    pass


class NonConstantSmoker(DatasetError):
    pass


class UnparseableValue(DatasetError):
    pass


class SingleLevelFactor(DatasetError):
    pass


class InvalidModelSpec(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


# explore
class InsufficientReplicates(LongmixError):
    module = 'explore'


# lmm
class LmmError(LongmixError):
    module = 'lmm'


class RhoOutOfDomain(LmmError):
    pass


class SingularDesign(LmmError):
    pass


class NonPositiveDefiniteV(LmmError):
    exit_code = CONVERGENCE_EXIT


class IdentifiabilityError(LmmError):
    exit_code = CONVERGENCE_EXIT


class IncomparableModels(LmmError):
    pass


# optim
class OptimError(LongmixError):
    module = 'optim'


class NonFiniteObjective(OptimError):
    exit_code = CONVERGENCE_EXIT


class DidNotConverge(OptimError):
    exit_code = CONVERGENCE_EXIT


class DomainError(OptimError):
    pass


# diagnostics
class DegenerateSample(LongmixError):
    module = 'diagnostics'


# classical
class ClassicalError(LongmixError):
    module = 'classical'


class ZeroVariance(ClassicalError):
    pass


class LengthMismatch(ClassicalError):
    pass


class EmptyCell(ClassicalError):
    pass


class UnbalancedDesign(ClassicalError):
    pass


class InvalidDf(ClassicalError):
    pass


# simul
class InvalidConfig(LongmixError):
    module = 'simul'
