"""Binary Itakura-parallelogram attention masks."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SLOPE = 1.25


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # bool, T_s x T_t
    slope: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    @property
    def lo(self) -> np.ndarray:
        return np.argmax(self.allowed, axis=0)

    @property
    def hi(self) -> np.ndarray:
        T_s = self.allowed.shape[0]
        return T_s - 1 - np.argmax(self.allowed[::-1], axis=0)


def build_mask(T_s: int, T_t: int, slope: float = DEFAULT_SLOPE) -> AttentionMask:
    """Cells of the ``T_s x T_t`` grid inside the Itakura parallelogram.

    With ``A = T_s - 1`` and ``B = T_t - 1`` the parallelogram is bounded by
    lines of slope ``s*B/A`` and ``B/(s*A)`` through both corners. A cell is
    kept when its open unit square reaches each of the four half-planes,
    which is the half-cell tolerance applied on both axes and keeps the mask
    symmetric under transposition. Cells on the rasterised corner-to-corner
    diagonal are always kept, which fills columns (or rows) the slope bounds
    would otherwise starve at extreme length ratios.
    """
    if T_s < 1 or T_t < 1:
        raise ValueError(f"mask lengths must be >= 1, got T_s={T_s}, T_t={T_t}")
    if not slope >= 1.0:
        raise ValueError(f"slope must be >= 1, got {slope}")
    A, B = T_s - 1, T_t - 1
    s = float(slope)
    i = np.arange(T_s, dtype=np.float64)[:, None]
    j = np.arange(T_t, dtype=np.float64)[None, :]
    ri, rj = A - i, B - j
    # cross-multiplied forms of: j - 1/2 < s*r*(i + 1/2), j + 1/2 > (r/s)*(i - 1/2), and mirrored
    tol = A + s * B
    cone = ((2 * A * j - 2 * s * B * i < tol)
            & (2 * B * i - 2 * s * A * j < s * A + B)
            & (2 * A * rj - 2 * s * B * ri < tol)
            & (2 * B * ri - 2 * s * A * rj < s * A + B))
    diag = np.abs(j * A - i * B) <= 0.5 * max(A, B)
    return AttentionMask(cone | diag, s)


def column_support(mask: AttentionMask, j: int) -> tuple[int, int]:
    T_t = mask.allowed.shape[1]
    if not 0 <= j < T_t:
        raise IndexError(f"column {j} out of range for mask with {T_t} columns")
    rows = np.nonzero(mask.allowed[:, j])[0]
    return int(rows[0]), int(rows[-1])


def clamp_length(T_hat: int, T_s: int, slope: float = DEFAULT_SLOPE) -> int:
    """Clamp a target length into ``[ceil(T_s/slope), floor(T_s*slope)]``, at least 1."""
    lo = math.ceil(T_s / slope - 1e-9)
    hi = math.floor(T_s * slope + 1e-9)
    return max(1, min(max(int(T_hat), lo), hi))


def write_pgm(image: np.ndarray, path) -> None:
    """Binary (P5) greyscale image, one pixel per cell, rows = source frames."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def mask_image(mask: AttentionMask) -> np.ndarray:
    return np.where(mask.allowed, 255, 0).astype(np.uint8)
