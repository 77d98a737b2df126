"""Quantizers: dithered training-time rounding and deterministic grids.

Training uses universal quantization: every element of a latent tensor
is shifted by one shared uniform draw u ~ U(-step/2, step/2), rounded,
and shifted back, which makes the quantization error independent of the
signal.  Gradients pass through the rounding as identity.  The test-time
path is plain deterministic rounding to the step grid (ties to even),
which is what makes re-encoding reproduce identical latents.

Pure functions given an explicit noise draw; the generator used to
produce draws is owned exclusively by the training loop.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def draw_noise(rng: np.random.Generator, step: float) -> float:
    """One shared dither sample u ~ U(-step/2, step/2) for a latent tensor."""
    return float(rng.uniform(-step / 2.0, step / 2.0))


def universal_quantize(z: Tensor, step, u: float) -> Tensor:
    """Dithered rounding  step * round((z + u)/step) - u  with shared u.

    |output - z| <= step/2 elementwise; the round is straight-through so
    d(output)/dz is the identity.  `step` may be a Tensor when the step
    itself is being optimized.
    """
    if abs(u) > _step_value(step) / 2.0 + 1e-12:
        raise ValueError(f"noise draw {u} exceeds half step {_step_value(step) / 2}")
    shifted = T.div(T.add(z, u), step)
    return T.sub(T.mul(T.ste_round(shifted), step), u)


def round_to_grid(z, step):
    """Deterministic grid rounding  step * round(z/step), ties to even.

    Idempotent bitwise: re-rounding an output reproduces it exactly.
    Accepts Tensors (straight-through gradient) or plain arrays.
    """
    if isinstance(z, Tensor) or isinstance(step, Tensor):
        return T.mul(T.ste_round(T.div(z, step)), step)
    step = np.asarray(step)
    return np.round(z / step) * step


def grid_index(z: np.ndarray, step) -> np.ndarray:
    """Integer symbol index round(z/step) of on-grid values."""
    return np.round(np.asarray(z) / np.asarray(step)).astype(np.int64)


def detached_round(z: Tensor) -> Tensor:
    """z + stop_gradient(round(z) - z): same forward and backward as the
    straight-through round; used to cross-check the estimator contract."""
    residual = np.round(z.data) - z.data
    return T.add(z, Tensor(residual))


def _step_value(step) -> float:
    if isinstance(step, Tensor):
        return float(np.min(step.data))
    return float(np.min(np.asarray(step)))
