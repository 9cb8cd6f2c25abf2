"""Parameter-free spatial attention driven by a per-neuron energy score.

Each neuron's energy measures how linearly separable it is from the other
neurons in its channel; low energy marks distinctive neurons (small dim
targets against flat infrared background clutter). Features are rescaled by
sigmoid(1/energy), so distinctive neurons are amplified. No learnable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from istdyolo import tensor as T


@dataclass(frozen=True)
class SimamConfig:
    """e_lambda regularizes the energy denominator; must be strictly positive."""

    e_lambda: float = 1e-4

    def __post_init__(self):
        if not (self.e_lambda > 0.0):
            raise ValueError(f"e_lambda must be > 0, got {self.e_lambda}")


def simam_energy(feature, cfg: SimamConfig = SimamConfig()) -> np.ndarray:
    """Per-neuron energy e* over a (n, c, h, w) feature map.

    With mu and var the per-channel population mean/variance over all
    M = h*w neurons (the target neuron included):

        e*(t) = 4 (var + lambda) / ((t - mu)^2 + 2 var + 2 lambda)

    Returns a numpy array shaped like the input; all entries are > 0.
    """
    x = feature.data if isinstance(feature, T.Tensor) else np.asarray(feature, dtype=np.float64)
    if x.ndim != 4:
        raise T.ShapeError(f"simam_energy expects (n, c, h, w), got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise T.ShapeError("simam_energy needs at least one spatial element per channel")
    mu = x.mean(axis=(2, 3), keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=(2, 3), keepdims=True)
    lam = cfg.e_lambda
    return 4.0 * (var + lam) / (d * d + 2.0 * var + 2.0 * lam)


def simam_apply(feature: T.Tensor, cfg: SimamConfig = SimamConfig()) -> T.Tensor:
    """Rescale features by sigmoid(1/e*), differentiable end-to-end.

    The mean and variance inside the energy are functions of the input, so
    gradients flow through them rather than treating them as constants.
    Note 1/e* = (t - mu)^2 / (4 (var + lambda)) + 1/2.
    """
    feature = T.as_tensor(feature)
    if feature.data.ndim != 4:
        raise T.ShapeError(f"simam_apply expects (n, c, h, w), got shape {feature.shape}")
    lam = cfg.e_lambda
    if not (lam > 0.0):
        raise ValueError(f"e_lambda must be > 0, got {lam}")
    mu = feature.mean(axis=(2, 3), keepdims=True)
    d = feature - mu
    d2 = d * d
    var = d2.mean(axis=(2, 3), keepdims=True)
    inv_energy = d2 / ((var + lam) * 4.0) + 0.5
    return T.sigmoid(inv_energy) * feature


def energy_heatmap(feature, cfg: SimamConfig = SimamConfig()) -> np.ndarray:
    """Collapse the energy map to one normalized (h, w) saliency image.

    Per pixel: mean over channels of 1/e*, then min-max normalized to [0, 1].
    A flat map (max == min) normalizes to all zeros by convention.
    """
    inv_e = 1.0 / simam_energy(feature, cfg)
    heat = inv_e.mean(axis=(0, 1))
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0.0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)
