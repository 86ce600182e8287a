"""Overlapping patch extraction on square RGB images.

A grid over an ``N x N x 3`` image is defined by the patch side ``n`` and
stride ``S``; it yields ``m x m`` patches with ``m = (N - n) // S + 1``.
Patches never cross the image boundary. Each patch is flattened
channel-major then row-major: entry ``c * n * n + r * n + col`` of the
flattened vector is pixel ``(r, col)`` of channel ``c``. Dictionary
learning and the encoder must share this order; it is fixed here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHANNELS = 3


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of the overlapping-patch decomposition of an image."""

    image_side: int
    patch_side: int
    stride: int
    patches_per_side: int

    @property
    def patch_dim(self) -> int:
        return CHANNELS * self.patch_side**2

    @property
    def patch_count(self) -> int:
        return self.patches_per_side**2


def make_grid(image_side: int, patch_side: int, stride: int) -> PatchGrid:
    """Build the patch grid for an image side, patch side and stride."""
    if patch_side < 1 or patch_side > image_side:
        raise ValueError(f"patch side {patch_side} must be in [1, {image_side}]")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    m = (image_side - patch_side) // stride + 1
    return PatchGrid(image_side, patch_side, stride, m)


def extract_patches(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Extract all grid patches, flattened; returns shape (m, m, 3*n*n).

    Patch (i, j) starts at pixel (i*stride, j*stride).
    """
    image = np.asarray(image)
    expected = (grid.image_side, grid.image_side, CHANNELS)
    if image.shape != expected:
        raise ValueError(f"image shape {image.shape} does not match grid {expected}")
    n, s, m = grid.patch_side, grid.stride, grid.patches_per_side
    out = np.empty((m, m, grid.patch_dim), dtype=image.dtype)
    for i in range(m):
        for j in range(m):
            block = image[i * s : i * s + n, j * s : j * s + n, :]
            out[i, j] = block.transpose(2, 0, 1).reshape(-1)
    return out


def patch_to_kernel(flat_patch: np.ndarray, patch_side: int) -> np.ndarray:
    """Undo the channel-major flattening into an (n, n, 3) pixel block."""
    flat_patch = np.asarray(flat_patch)
    if flat_patch.shape != (CHANNELS * patch_side**2,):
        raise ValueError(
            f"flat patch shape {flat_patch.shape} does not match side {patch_side}"
        )
    return flat_patch.reshape(CHANNELS, patch_side, patch_side).transpose(1, 2, 0)
