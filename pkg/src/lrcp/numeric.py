"""Linear projection head, row normalization and a hand-rolled Adam."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DegenerateInputError


@dataclass(frozen=True)
class ProjectorParams:
    weight: np.ndarray  # (latent_dim, input_dim)
    bias: np.ndarray  # (latent_dim,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ContractError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] == 0 or self.weight.shape[1] == 0:
            raise ContractError("latent_dim and input_dim must be positive")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ContractError(
                f"bias length {self.bias.shape[0]} != latent_dim {self.weight.shape[0]}"
            )

    @property
    def latent_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]


def init_projector(input_dim, latent_dim, rng, dtype=np.float32, use_bias=True) -> ProjectorParams:
    # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), same as a default torch Linear
    bound = 1.0 / np.sqrt(input_dim)
    weight = rng.uniform(-bound, bound, size=(latent_dim, input_dim)).astype(dtype)
    if use_bias:
        bias = rng.uniform(-bound, bound, size=latent_dim).astype(dtype)
    else:
        bias = np.zeros(latent_dim, dtype=dtype)
    return ProjectorParams(weight, bias)


def project(params: ProjectorParams, x: np.ndarray) -> np.ndarray:
    """Apply ``weight @ x + bias`` to one vector or to every row of a matrix."""
    x = np.asarray(x)
    if x.shape[-1] != params.input_dim:
        raise ContractError(f"input has dim {x.shape[-1]}, projector expects {params.input_dim}")
    return x @ params.weight.T + params.bias


def normalize(v: np.ndarray) -> np.ndarray:
    """L2-normalize a vector, or each row of a matrix.

    Raises DegenerateInputError on a zero vector rather than inventing a direction.
    """
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / norms


def normalize_backward(h: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``normalize(h)`` back to ``h`` (row-wise)."""
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    z = h / norms
    radial = np.sum(z * grad_z, axis=-1, keepdims=True)
    return (grad_z - z * radial) / norms


def projector_grads(x: np.ndarray, grad_h: np.ndarray, use_bias=True) -> ProjectorParams:
    """Parameter gradients given inputs ``x`` (N, D) and dL/dh (N, L)."""
    gw = grad_h.T @ x
    gb = grad_h.sum(axis=0) if use_bias else np.zeros(grad_h.shape[1], dtype=grad_h.dtype)
    return ProjectorParams(gw, gb)


@dataclass(frozen=True)
class AdamState:
    step: int
    first_moment: ProjectorParams
    second_moment: ProjectorParams
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: ProjectorParams, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
    zeros = ProjectorParams(np.zeros_like(params.weight), np.zeros_like(params.bias))
    return AdamState(0, zeros, zeros, lr, beta1, beta2, epsilon)


def _check_shapes(a: ProjectorParams, b: ProjectorParams, what: str):
    if a.weight.shape != b.weight.shape or a.bias.shape != b.bias.shape:
        raise ContractError(
            f"{what} shapes {a.weight.shape}/{a.bias.shape} do not match "
            f"parameters {b.weight.shape}/{b.bias.shape}"
        )


def adam_step(params: ProjectorParams, state: AdamState, grads: ProjectorParams):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    _check_shapes(grads, params, "gradient")
    _check_shapes(state.first_moment, params, "moment")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t

    new_p, new_m, new_v = [], [], []
    for p, m, v, g in zip(
        (params.weight, params.bias),
        (state.first_moment.weight, state.first_moment.bias),
        (state.second_moment.weight, state.second_moment.bias),
        (grads.weight, grads.bias),
    ):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_p.append((p - update).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))

    new_params = ProjectorParams(*new_p)
    new_state = replace(
        state,
        step=t,
        first_moment=ProjectorParams(*new_m),
        second_moment=ProjectorParams(*new_v),
    )
    return new_params, new_state
