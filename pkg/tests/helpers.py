from typing import Optional

import numpy as np

from heart_surrogate.ann import AnnArchitecture, AnnWeights, init_glorot
from heart_surrogate.lnode import N_PHYSICAL, LnodeModel
from heart_surrogate.parameters import ParameterSpace, ParameterSpec


class A:
    pass


class B:
    pass


class C:
    def __init__(self, a: A, b: B):
        self.a = a
        self.b = b


class DepOnA:
    def __init__(self, a: A):
        self.a = a


class SubA(A):
    pass


A_INST = A()
B_INST = B()

# Physical state levels of the toy models: four pressures then four volumes.
TOY_CENTER = np.array([8.0, 40.0, 5.0, 15.0, 70.0, 120.0, 65.0, 125.0])
TOY_SCALE = np.array([4.0, 40.0, 3.0, 12.0, 20.0, 40.0, 20.0, 40.0])


def toy_space(n_params: int = 2) -> ParameterSpace:
    return ParameterSpace(
        tuple(ParameterSpec(f'q{i}', '', 0.5, 1.5 + 0.5 * i) for i in range(n_params))
    )


def toy_model(
    n_params: int = 2,
    n_latent: int = 0,
    hidden_layers: int = 1,
    neurons: int = 6,
    seed: int = 0,
    t_hb: float = 0.2,
    dt: float = 0.01,
    weight_scale: float = 0.5,
    space: Optional[ParameterSpace] = None,
) -> LnodeModel:
    """Small randomly initialised surrogate, cheap enough for finite-difference checks."""
    space = space or toy_space(n_params)
    n_states = N_PHYSICAL + n_latent
    arch = AnnArchitecture(
        input_dim=n_states + 2 + space.dim,
        hidden_layers=hidden_layers,
        neurons_per_layer=neurons,
        output_dim=n_states,
    )
    glorot = init_glorot(arch, seed)
    rng = np.random.default_rng(seed + 100)
    flat = weight_scale * glorot.flat + 0.05 * rng.standard_normal(glorot.flat.size)
    return LnodeModel(
        weights=AnnWeights(arch, flat),
        parameter_space=space,
        state_center=np.concatenate([TOY_CENTER, np.zeros(n_latent)]),
        state_scale=np.concatenate([TOY_SCALE, np.ones(n_latent)]),
        latent_ic=0.1 * rng.standard_normal(n_latent),
        t_hb=t_hb,
        dt=dt,
        z0_reference=TOY_CENTER.copy(),
        default_av_delay=0.0,
        seed=seed,
    )


def central_difference(fn, x: np.ndarray, h: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))
