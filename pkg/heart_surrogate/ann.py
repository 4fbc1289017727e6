"""
Fully-connected tanh network with hand-written vector-Jacobian products.

Flat weight layout is layer-major, weights before biases, row-major within a matrix. Weight
matrices have shape (fan_in, fan_out) so that batched inputs of shape (..., fan_in) multiply on
the right.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from heart_surrogate.errors import ConfigurationError, InputShapeError
from heart_surrogate.utils import floats_from_hex, floats_to_hex, make_rng

HIDDEN_ACTIVATIONS = ('tanh',)
OUTPUT_ACTIVATIONS = ('linear',)

_STREAM_GLOROT = 1


@dataclass(frozen=True)
class AnnArchitecture:
    input_dim: int
    hidden_layers: int
    neurons_per_layer: int
    output_dim: int
    hidden_activation: str = 'tanh'
    output_activation: str = 'linear'

    def __post_init__(self) -> None:
        for field_name in ('input_dim', 'neurons_per_layer', 'output_dim'):
            if getattr(self, field_name) < 1:
                raise ConfigurationError(f'`{field_name}` must be >= 1, got {self!r}')
        # 0 hidden layers is the single affine layer case
        if self.hidden_layers < 0:
            raise ConfigurationError(f'`hidden_layers` must be >= 0, got {self!r}')
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f'Unsupported hidden activation {self.hidden_activation!r}')
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f'Unsupported output activation {self.output_activation!r}')

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (
            (self.input_dim,) + (self.neurons_per_layer,) * self.hidden_layers + (self.output_dim,)
        )

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = self.layer_sizes
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return count_params(self)

    def to_json(self) -> dict[str, Any]:
        return {
            'input_dim': self.input_dim,
            'hidden_layers': self.hidden_layers,
            'neurons_per_layer': self.neurons_per_layer,
            'output_dim': self.output_dim,
            'hidden_activation': self.hidden_activation,
            'output_activation': self.output_activation,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> AnnArchitecture:
        return cls(
            input_dim=int(data['input_dim']),
            hidden_layers=int(data['hidden_layers']),
            neurons_per_layer=int(data['neurons_per_layer']),
            output_dim=int(data['output_dim']),
            hidden_activation=str(data.get('hidden_activation', 'tanh')),
            output_activation=str(data.get('output_activation', 'linear')),
        )


def count_params(arch: AnnArchitecture) -> int:
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in arch.layer_shapes)


@dataclass(frozen=True, eq=False)
class AnnWeights:
    arch: AnnArchitecture
    flat: np.ndarray

    def __post_init__(self) -> None:
        flat = np.array(self.flat, dtype=np.float64).reshape(-1)
        if flat.size != count_params(self.arch):
            raise InputShapeError(
                f'Architecture needs {count_params(self.arch)} weights, got {flat.size}'
            )
        flat.setflags(write=False)
        object.__setattr__(self, 'flat', flat)

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (W, b) views into `flat`."""
        layers = []
        offset = 0
        for fan_in, fan_out in self.arch.layer_shapes:
            w = self.flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.flat[offset : offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers

    @classmethod
    def from_layers(
        cls, arch: AnnArchitecture, layers: Sequence[tuple[np.ndarray, np.ndarray]]
    ) -> AnnWeights:
        if len(layers) != len(arch.layer_shapes):
            raise InputShapeError(f'Expected {len(arch.layer_shapes)} layers, got {len(layers)}')
        chunks = []
        for (fan_in, fan_out), (w, b) in zip(arch.layer_shapes, layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise InputShapeError(
                    f'Layer expects W{(fan_in, fan_out)} and b({fan_out},), '
                    f'got W{w.shape} and b{b.shape}'
                )
            chunks.extend([w.reshape(-1), b])
        return cls(arch, np.concatenate(chunks))

    @classmethod
    def zeros(cls, arch: AnnArchitecture) -> AnnWeights:
        return cls(arch, np.zeros(count_params(arch)))

    def replace_flat(self, flat: np.ndarray) -> AnnWeights:
        return AnnWeights(self.arch, flat)

    def to_json(self) -> dict[str, Any]:
        return {'architecture': self.arch.to_json(), 'weights': floats_to_hex(self.flat)}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> AnnWeights:
        arch = AnnArchitecture.from_json(data['architecture'])
        return cls(arch, floats_from_hex(data['weights']))


def init_glorot(arch: AnnArchitecture, seed: int) -> AnnWeights:
    rng = make_rng(seed, _STREAM_GLOROT)
    layers = []
    for fan_in, fan_out in arch.layer_shapes:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return AnnWeights.from_layers(arch, layers)


def _check_input(weights: AnnWeights, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != weights.arch.input_dim:
        raise InputShapeError(
            f'Network expects inputs with last dimension {weights.arch.input_dim}, got {x.shape}'
        )
    return x


def forward_with_memory(weights: AnnWeights, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """
    Forward pass which also returns the input of every layer, the memory `backward` needs.
    """
    x = _check_input(weights, x)
    layers = weights.layers
    memory = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        memory.append(h)
    w_out, b_out = layers[-1]
    return h @ w_out + b_out, memory


def forward(weights: AnnWeights, x: np.ndarray) -> np.ndarray:
    out, _ = forward_with_memory(weights, x)
    return out


def backward(
    weights: AnnWeights, memory: Sequence[np.ndarray], cotangent: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Pull `cotangent` back through a recorded forward pass.

    Returns the input cotangent (shaped like the forward input) and the flat weight gradient
    summed over every leading batch dimension.
    """
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape[-1] != weights.arch.output_dim:
        raise InputShapeError(
            f'Cotangent needs last dimension {weights.arch.output_dim}, got {cotangent.shape}'
        )
    layers = weights.layers
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(layers))
    g = cotangent
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        a_in = memory[idx]
        a2 = a_in.reshape(-1, a_in.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        grads[2 * idx] = (a2.T @ g2).reshape(-1)
        grads[2 * idx + 1] = g2.sum(axis=0)
        g = g @ w.T
        if idx > 0:
            # memory[idx] is the tanh output of the previous layer
            g = g * (1.0 - memory[idx] ** 2)
    return g, np.concatenate(grads)


def vjp(
    weights: AnnWeights, x: np.ndarray, cotangent: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    _, memory = forward_with_memory(weights, x)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    expected = np.asarray(x).shape[:-1] + (weights.arch.output_dim,)
    if cotangent.shape != expected:
        raise InputShapeError(f'Cotangent shape {cotangent.shape} does not match output {expected}')
    return backward(weights, memory, cotangent)
