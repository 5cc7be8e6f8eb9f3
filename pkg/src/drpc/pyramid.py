"""Spatial pyramid pooling (1x1, 2x2, 4x4, 8x8 average bins) and crop geometry.

A pyramid vector holds ``C x 85`` values, 85 = 1 + 4 + 16 + 64. Bins are
ordered scale-major, then row-major within a scale. For scale ``s`` the bin
``(i, j)`` averages rows ``[floor(i*H/s), floor((i+1)*H/s))`` and the
analogous columns, which partitions the map even when ``s`` does not
divide ``H``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import DimensionError, GeometryError

SCALES = (1, 2, 4, 8)
PYRAMID_LENGTH = sum(s * s for s in SCALES)
MIN_EXTENT = max(SCALES)


@dataclass
class PyramidVector:
    values: T.Tensor
    source_shape: tuple
    scales: tuple = SCALES

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class CropSpec:
    """Crop rectangle with the image's aspect ratio; ``rho = height / H``."""

    top: int
    left: int
    height: int
    width: int
    rho: float

    def validate(self, h, w):
        if not 0 < self.rho <= 1:
            raise GeometryError(f"rho must be in (0, 1], got {self.rho}")
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise GeometryError(f"crop {self} does not fit a {h} x {w} map")
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"crop {self} is empty")


def bin_edges(n, s):
    return [(i * n) // s for i in range(s + 1)]


@lru_cache(maxsize=64)
def _pool_matrix(h, w):
    """(85, h*w) matrix whose rows average each pyramid bin."""
    rows = []
    for s in SCALES:
        re, ce = bin_edges(h, s), bin_edges(w, s)
        for i in range(s):
            for j in range(s):
                m = np.zeros((h, w))
                area = (re[i + 1] - re[i]) * (ce[j + 1] - ce[j])
                m[re[i]:re[i + 1], ce[j]:ce[j + 1]] = 1.0 / area
                rows.append(m.reshape(-1))
    mat = np.stack(rows)
    mat.setflags(write=False)
    return mat


def spp(feature_map):
    """Pool a ``C x H x W`` (or batched ``N x C x H x W``) map into pyramid bins."""
    x = feature_map if isinstance(feature_map, T.Tensor) else T.Tensor(feature_map)
    if x.ndim not in (3, 4):
        raise DimensionError(f"spp expects C x H x W or N x C x H x W, got rank {x.ndim}")
    h, w = x.shape[-2:]
    if h < MIN_EXTENT:
        raise DimensionError(f"spp height axis: {h} < {MIN_EXTENT}")
    if w < MIN_EXTENT:
        raise DimensionError(f"spp width axis: {w} < {MIN_EXTENT}")
    flat = x.reshape(x.shape[:-2] + (h * w,))
    values = T.linear_map(flat, _pool_matrix(h, w))
    return PyramidVector(values, tuple(x.shape[-3:]))


def crop_map(feature_map, crop):
    """Differentiable slice of the crop's rectangle from the last two axes."""
    h, w = feature_map.shape[-2:]
    crop.validate(h, w)
    lead = (slice(None),) * (feature_map.ndim - 2)
    return feature_map[lead + (slice(crop.top, crop.top + crop.height), slice(crop.left, crop.left + crop.width))]


def spp_region(feature_map, crop):
    """Pyramid of the sub-rectangle of ``feature_map`` covered by ``crop``.

    ``crop`` must already be expressed at feature resolution (see
    :func:`feature_crop`).
    """
    x = feature_map if isinstance(feature_map, T.Tensor) else T.Tensor(feature_map)
    h, w = x.shape[-2:]
    if (crop.top, crop.left, crop.height, crop.width) == (0, 0, h, w):
        return spp(x)
    if crop.height < MIN_EXTENT or crop.width < MIN_EXTENT:
        raise GeometryError(f"cropped region {crop.height} x {crop.width} is below {MIN_EXTENT} x {MIN_EXTENT}")
    return spp(crop_map(x, crop))


def feature_crop(crop, image_h, feature_h, image_w=None, feature_w=None):
    """Map an image-resolution crop onto a feature map of a strided network."""
    image_w = image_h if image_w is None else image_w
    feature_w = feature_h if feature_w is None else feature_w
    if image_h % feature_h or image_w % feature_w:
        raise GeometryError(f"image {image_h}x{image_w} is not an integer multiple of feature {feature_h}x{feature_w}")
    fy, fx = feature_h / image_h, feature_w / image_w
    top = int(round(crop.top * fy))
    left = int(round(crop.left * fx))
    bottom = int(round((crop.top + crop.height) * fy))
    right = int(round((crop.left + crop.width) * fx))
    height, width = bottom - top, right - left
    if height < MIN_EXTENT or width < MIN_EXTENT:
        raise GeometryError(
            f"feature crop {height} x {width} is below {MIN_EXTENT} cells; raise the minimum rho "
            f"(need rho >= {MIN_EXTENT / feature_h:.3f} at this layer)")
    out = CropSpec(top, left, height, width, crop.rho)
    out.validate(feature_h, feature_w)
    return out


def full_crop(h, w):
    return CropSpec(0, 0, h, w, 1.0)
