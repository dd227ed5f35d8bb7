from typing import Optional, Tuple


class SmlError(Exception):
    pass


class ContractViolation(SmlError, ValueError):
    """Нарушено предусловие операции (размерности, диапазоны, знаки)."""


class NonFiniteError(ContractViolation):
    def __init__(self, message: str, index: Optional[Tuple[int, ...]] = None) -> None:
        super().__init__(message)
        self.index = index


class LemmaHypothesisError(ContractViolation):
    pass


class UndefinedMetricError(SmlError):
    pass


class SpectralError(SmlError):
    pass


class ConfigError(SmlError):
    pass


class DataError(SmlError):
    pass


class RecordParseError(DataError):
    def __init__(self, message: str, line_no: Optional[int] = None) -> None:
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class TrainingCollapse(SmlError):
    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"{message} (step {step})")
        self.step = step


class TheoryCheckFailure(SmlError):
    def __init__(self, message: str, seed: int) -> None:
        super().__init__(f"{message} (replay with --seed {seed})")
        self.seed = seed
