from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

from heart_surrogate.errors import ConfigurationError, ParameterShapeError

# Physical parameters are plain float64 vectors ordered as their `ParameterSpace`.
ParameterVector = np.ndarray


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    unit: str
    lower: float
    upper: float
    # Display group for heatmaps: atria / ventricles / whole-heart / circulation
    group: str = ''

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ConfigurationError(
                f'Parameter `{self.name}` needs lower < upper, got [{self.lower}, {self.upper}]'
            )


@dataclass(frozen=True)
class ParameterSpace:
    entries: tuple[ParameterSpec, ...]

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigurationError(f'Parameter names must be unique, got {names}')
        if not names:
            raise ConfigurationError('Parameter space must not be empty')

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def lower(self) -> np.ndarray:
        return np.array([e.lower for e in self.entries], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([e.upper for e in self.entries], dtype=np.float64)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError as exc:
            raise ConfigurationError(f'Unknown parameter `{name}`') from exc

    def __contains__(self, name: object) -> bool:
        return name in self.names

    def subset(self, names: Iterable[str]) -> ParameterSpace:
        return ParameterSpace(tuple(self.entries[self.index(n)] for n in names))

    def with_bounds(self, lower: Sequence[float], upper: Sequence[float]) -> ParameterSpace:
        return ParameterSpace(
            tuple(
                ParameterSpec(e.name, e.unit, float(lo), float(hi), e.group)
                for e, lo, hi in zip(self.entries, lower, upper)
            )
        )

    def check(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.dim:
            raise ParameterShapeError(
                f'Expected {self.dim} parameters {self.names}, got {theta.shape[-1]}'
            )
        return theta

    def normalize(self, theta: np.ndarray) -> np.ndarray:
        """Affine map of the ranges onto [-1, 1]."""
        theta = self.check(theta)
        return 2.0 * (theta - self.lower) / self.width - 1.0

    def denormalize(self, theta_norm: np.ndarray) -> np.ndarray:
        return self.lower + 0.5 * (np.asarray(theta_norm, dtype=np.float64) + 1.0) * self.width

    def from_unit(self, unit: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(unit, dtype=np.float64) * self.width

    def contains(self, theta: np.ndarray) -> bool:
        theta = self.check(theta)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def vector(self, values: Union[Mapping[str, float], Sequence[float]]) -> ParameterVector:
        if isinstance(values, Mapping):
            missing = [n for n in self.names if n not in values]
            if missing:
                raise ParameterShapeError(f'Missing parameter values for {missing}')
            return np.array([float(values[n]) for n in self.names], dtype=np.float64)
        return self.check(np.array(values, dtype=np.float64))

    def as_dict(self, theta: np.ndarray) -> dict[str, float]:
        theta = self.check(theta)
        return {n: float(v) for n, v in zip(self.names, theta)}

    def to_json(self) -> list[dict[str, Any]]:
        return [
            {'name': e.name, 'unit': e.unit, 'lower': e.lower, 'upper': e.upper, 'group': e.group}
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, data: Sequence[Mapping[str, Any]]) -> ParameterSpace:
        return cls(
            tuple(
                ParameterSpec(
                    name=str(e['name']),
                    unit=str(e.get('unit', '')),
                    lower=float(e['lower']),
                    upper=float(e['upper']),
                    group=str(e.get('group', '')),
                )
                for e in data
            )
        )
