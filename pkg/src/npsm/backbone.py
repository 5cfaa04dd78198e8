"""Small strided conv feature extractor and ROI max pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .geometry import BBox
from .tensor import Tensor


@dataclass
class FeatureMap:
    """Backbone output plus the pixel <-> cell mapping (pixel = cell * stride)."""

    tensor: Tensor
    stride: int
    image_size: tuple[int, int]  # (H, W) in pixels

    @property
    def cells(self) -> tuple[int, int]:
        return self.tensor.shape[0], self.tensor.shape[1]

    def to_cells(self, box: BBox) -> tuple[int, int, int, int]:
        """Image rectangle -> half-open cell rectangle (y0, y1, x0, x1), rounded outward."""
        Hc, Wc = self.cells
        s = self.stride
        x0 = min(max(int(math.floor(box.x1 / s)), 0), Wc - 1)
        y0 = min(max(int(math.floor(box.y1 / s)), 0), Hc - 1)
        x1 = min(max(int(math.ceil(box.x2 / s)), x0 + 1), Wc)
        y1 = min(max(int(math.ceil(box.y2 / s)), y0 + 1), Hc)
        return y0, y1, x0, x1

    def to_pixels(self, y0: int, y1: int, x0: int, x1: int) -> BBox:
        s = self.stride
        return BBox(float(x0 * s), float(y0 * s), float(x1 * s), float(y1 * s))


def backbone_param_shapes(n_stages: int, channels: int, in_channels: int = 3, kernel: int = 3):
    """Per-stage (kernel, bias) shapes. Inner stages use max(8, channels // 2) maps."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"backbone kernel side must be odd and positive, got {kernel}")
    shapes = {}
    cin = in_channels
    for s in range(n_stages):
        cout = channels if s == n_stages - 1 else max(8, channels // 2)
        shapes[f"backbone.conv{s}.w"] = (kernel, kernel, cin, cout)
        shapes[f"backbone.conv{s}.b"] = (cout,)
        cin = cout
    return shapes


def extract_features(image, params: dict, n_stages: int) -> FeatureMap:
    """Run the stride-2 ReLU conv stages over an ``H x W x 3`` image."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    H, W = img.shape[:2]
    need = 2 ** n_stages
    if H < need or W < need:
        raise ValueError(f"image {H}x{W} smaller than the backbone's output stride {need}")
    x = img
    for s in range(n_stages):
        x = ops.relu(ops.conv2d(x, params[f"backbone.conv{s}.w"], params[f"backbone.conv{s}.b"], stride=2))
    return FeatureMap(x, need, (H, W))


def roi_pool(fm: FeatureMap, region: BBox, K: int) -> Tensor:
    """Max-pool the cells under ``region`` into a ``K x K x D`` tensor."""
    H, W = fm.image_size
    if region.x2 <= 0 or region.y2 <= 0 or region.x1 >= W or region.y1 >= H:
        raise ValueError(f"region {tuple(region)} lies outside the {W}x{H} image")
    y0, y1, x0, x1 = fm.to_cells(region)
    return ops.max_pool_bins(fm.tensor, y0, y1, x0, x1, K)


def query_feature(crop, params: dict, n_stages: int, K: int) -> Tensor:
    """Features of a query crop pooled over the whole crop, using the gallery backbone."""
    fm = extract_features(crop, params, n_stages)
    H, W = fm.image_size
    return roi_pool(fm, BBox(0.0, 0.0, float(W), float(H)), K)
