"""Binary PPM (P6) dumps of conv3d kernels, one image per (output channel,
temporal slice)."""

from __future__ import annotations

import os

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb`` is (H, W, 3) uint8."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 pixels, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, maxval, pixels = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 file")
    w, h = map(int, dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def normalize_kernel(k: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant kernel maps to 0.5 everywhere."""
    k = k.astype(np.float64)
    lo, hi = float(k.min()), float(k.max())
    if hi == lo:
        return np.full(k.shape, 0.5)
    return (k - lo) / (hi - lo)


def slice_image(norm_slice: np.ndarray) -> np.ndarray:
    """(C, kH, kW) in [0, 1] -> RGB bytes.

    Three input channels are shown as colour; any other count is shown as
    grey tiles, one per input channel, left to right.
    """
    c, kh, kw = norm_slice.shape
    if c == 3:
        img = np.moveaxis(norm_slice, 0, -1)
    else:
        grey = np.concatenate(list(norm_slice), axis=1)
        img = np.repeat(grey[:, :, None], 3, axis=2)
    return np.rint(img * 255).astype(np.uint8)


def dump_kernel_images(w3d: np.ndarray, out_dir, name: str) -> list[str]:
    """Write ``{name}_o{o}_t{t}.ppm`` (0-based indices) for a (O, C, T, kH, kW) kernel.

    Normalization is per output channel across all its temporal slices, so
    slices of one kernel stay comparable.
    """
    if w3d.ndim != 5:
        raise ValueError(f"expected a conv3d kernel, got shape {w3d.shape}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for o in range(w3d.shape[0]):
        norm = normalize_kernel(w3d[o])
        for t in range(w3d.shape[2]):
            path = os.path.join(out_dir, f"{name}_o{o}_t{t}.ppm")
            write_ppm(path, slice_image(norm[:, t]))
            paths.append(path)
    return paths
