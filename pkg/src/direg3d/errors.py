"""Exception hierarchy shared across the package.

Two bases matter for the CLI exit-code contract: DataError maps to exit
code 2 (bad inputs, missing or malformed files) and NumericError maps to
exit code 3 (a computation failed or diverged).
"""


class Direg3dError(Exception):
    pass


class DataError(Direg3dError):
    """Invalid or missing input data (file, config, shape)."""


class NumericError(Direg3dError):
    """A numeric computation failed, diverged, or hit a degenerate case."""


# geometry
class PointBehindCamera(NumericError):
    pass


class OutsideFov(NumericError):
    pass


class OutsideImage(NumericError):
    pass


class NoConvergence(NumericError):
    pass


class DegenerateBox(DataError):
    pass


class NearParallelRays(NumericError):
    pass


# metadata
class EmptyDataset(DataError):
    pass


# hand model
class BudgetTooSmall(DataError):
    pass


class DegenerateBone(NumericError):
    pass


class DimensionMismatch(DataError):
    pass


# autodiff
class ShapeMismatch(DataError):
    pass


class NonScalarLoss(DataError):
    pass


class DoubleBackward(Direg3dError):
    pass


# losses
class AllMasked(NumericError):
    pass


# synth
class EmptyRender(NumericError):
    pass


# harness
class EmptyInput(DataError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term '{term}' (value={value})")
        self.term = term
        self.value = value
