"""Grad-CAM over the scalar age output, plus ROI mass statistics.

There is no class score in a regressor, so the age output itself is
differentiated. Channel weights are the spatial means of the activation
gradient; the map is the ReLU of the weighted activation sum, upsampled
to input resolution and max-normalised.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateHeatmap, InvalidConfig
from .image import bilinear_resize, save_pgm

DEFAULT_LAYER = "block4.pool"


@dataclass
class Heatmap:
    values: np.ndarray  # [h, w] at the target layer's resolution
    upsampled: np.ndarray  # [S, S] at input resolution
    layer: str


def _activation_and_weights(model, image, layer):
    x = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] != 1:
        raise InvalidConfig(f"grad_cam expects a single [1,1,S,S] image, got {x.shape}")
    out, act = model.forward(x, "eval", capture=layer)
    for p in model.named_parameters().values():
        p.grad = None
    act.grad = None
    T.reduce_mean(out).backward()
    grads = act.grad[0] if act.grad is not None else np.zeros_like(act.data[0])
    return x, act.data[0], grads.mean(axis=(1, 2))


def grad_cam(model, image, layer=DEFAULT_LAYER):
    """Heatmap of the named conv/pool activation for one input [1,1,S,S]."""
    x, act, alpha = _activation_and_weights(model, image, layer)
    cam = np.maximum(np.tensordot(alpha, act, axes=1), 0.0)
    peak = float(cam.max())
    if peak > 0.0:
        cam = cam / peak
    return Heatmap(cam, bilinear_resize(cam, x.shape[2], x.shape[3]), layer)


def channel_weights(model, image, layer=DEFAULT_LAYER):
    """The Grad-CAM channel weights alone (spatial mean of d age / d activation)."""
    return _activation_and_weights(model, image, layer)[2]


def channel_sensitivity_fd(model, image, layer=DEFAULT_LAYER, eps=1e-3):
    """FD oracle for the channel weights: central differences of the age
    output under a uniform per-channel offset of the activation."""
    x = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float64)
    _, act = model.forward(x, "eval", capture=layer)
    k, h, w = act.data.shape[1:]
    sens = np.zeros(k)
    with T.no_grad():
        for i in range(k):
            offset = np.zeros(k)
            offset[i] = eps
            fp = model.forward(x, "eval", channel_offset=(layer, offset)).data[0, 0]
            offset[i] = -eps
            fm = model.forward(x, "eval", channel_offset=(layer, offset)).data[0, 0]
            sens[i] = (fp - fm) / (2 * eps) / (h * w)
    return sens


def region_mass(heatmap, region):
    """Fraction of total upsampled mass in the upper or lower half rows."""
    total = float(heatmap.upsampled.sum())
    if total <= 0.0:
        raise DegenerateHeatmap("all-zero heatmap has no region mass")
    h = heatmap.upsampled.shape[0]
    upper = float(heatmap.upsampled[: h // 2].sum()) / total
    if region == "upper":
        return upper
    if region == "lower":
        return 1.0 - upper
    raise InvalidConfig(f"unknown region {region!r}")


def export(heatmap, path):
    """Write the upsampled map as an 8-bit PGM."""
    img = np.clip(np.rint(heatmap.upsampled * 255.0), 0, 255).astype(np.uint8)
    save_pgm(img, path)
