from __future__ import annotations

from typing import Optional, Sequence


class HeartSurrogateError(Exception):
    pass


class InputShapeError(HeartSurrogateError, ValueError):
    pass


class ParameterShapeError(HeartSurrogateError, ValueError):
    pass


class ConfigurationError(HeartSurrogateError, ValueError):
    pass


class DatasetError(HeartSurrogateError, ValueError):
    pass


class DivergenceError(HeartSurrogateError, ArithmeticError):
    def __init__(self, message: str, step: Optional[int] = None, sample_id: Optional[str] = None):
        details = []
        if step is not None:
            details.append(f'step {step}')
        if sample_id is not None:
            details.append(f'sample {sample_id}')
        super().__init__(f'{message} ({", ".join(details)})' if details else message)
        self.step = step
        self.sample_id = sample_id


class CalibrationError(HeartSurrogateError, RuntimeError):
    def __init__(self, message: str, start_logs: Sequence[str] = ()):
        super().__init__(message)
        self.start_logs = list(start_logs)


class ComponentNotFound(HeartSurrogateError, LookupError):
    pass


class ComponentCycleError(HeartSurrogateError, ValueError):
    pass
