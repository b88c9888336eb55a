"""Parameterized layers: thin stateful wrappers over autodiff primitives.

Each layer owns its weight tensors (updated in place by the optimizer)
and exposes them through params(prefix) as a flat name -> Tensor dict.

Both layers take an out_gain: outputs are multiplied by it while the
weight init std and the stored bias are divided by it, so the function
at init is unchanged but a fixed optimizer step moves the output
out_gain times further. Step-capped optimizers need this on heads whose
outputs must travel far (sharp heatmap logits, pose swings).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Conv2d", "Linear"]


class Conv2d:
    """2D convolution with bias; weight (C_out, C_in, k, k)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1,
                 padding="same", weight_scale: float | None = None,
                 out_gain: float = 1.0):
        std = weight_scale if weight_scale is not None else (2.0 / (c_in * k * k)) ** 0.5
        std /= out_gain
        self.w = ad.param(rng.normal(scale=std, size=(c_out, c_in, k, k)))
        self.b = ad.param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding
        self.out_gain = float(out_gain)

    def __call__(self, x) -> Tensor:
        y = ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
        return y * self.out_gain if self.out_gain != 1.0 else y

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Linear:
    """Affine map y = (W x + b) * out_gain on 1D inputs; weight (n_out, n_in).

    weight_scale=0 gives an exactly zero map at init; bias_value, when
    given, is the RAW initial output: the stored bias is bias_value
    divided by out_gain so the first forward returns it exactly.
    """

    def __init__(self, n_in: int, n_out: int, rng, weight_scale: float | None = None,
                 bias_value: np.ndarray | None = None, out_gain: float = 1.0):
        std = weight_scale if weight_scale is not None else (1.0 / n_in) ** 0.5
        std /= out_gain
        w = np.zeros((n_out, n_in)) if std == 0.0 else rng.normal(
            scale=std, size=(n_out, n_in))
        self.w = ad.param(w)
        b = np.zeros(n_out) if bias_value is None else np.broadcast_to(
            np.asarray(bias_value, dtype=np.float64), (n_out,)).copy() / out_gain
        self.b = ad.param(b)
        self.out_gain = float(out_gain)

    def __call__(self, x) -> Tensor:
        y = ad.matmul(self.w, ad.reshape(ad.as_tensor(x), (-1, 1)))
        y = ad.reshape(y, (-1,)) + self.b
        return y * self.out_gain if self.out_gain != 1.0 else y

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}
