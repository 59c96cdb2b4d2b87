"""Render duration-modified output along a warping path."""
from __future__ import annotations

import numpy as np

from .align import WarpPath, check_path
from .features import FRAME_MS, FeatureSequence, Waveform, as_matrix, hann, ms_to_samples

SHIFT_MS = 2.0


def warp_features(X, path: WarpPath) -> FeatureSequence:
    """Target frame ``j`` is the mean of the source frames aligned to it."""
    hop = getattr(X, "hop_ms", 10.0)
    data = as_matrix(X)
    check_path(path)
    if path.T_s != data.shape[1]:
        raise ValueError(f"path covers {path.T_s} source frames, features have {data.shape[1]}")
    i, j = path.pairs[:, 0], path.pairs[:, 1]
    acc = np.zeros((data.shape[0], path.T_t))
    np.add.at(acc.T, j, data[:, i].T)
    counts = np.bincount(j, minlength=path.T_t)
    return FeatureSequence(acc / counts[None, :], hop_ms=hop)


def first_sources(path: WarpPath) -> np.ndarray:
    """First source index aligned to each target frame."""
    i, j = path.pairs[:, 0], path.pairs[:, 1]
    first = np.full(path.T_t, -1)
    keep = np.r_[True, j[1:] != j[:-1]]
    first[j[keep]] = i[keep]
    return first


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / den) if den > 0 else 0.0


def warp_waveform(wave_: Waveform, path: WarpPath, hop_ms: float = 10.0,
                  frame_len_ms: float = FRAME_MS, shift_ms: float = SHIFT_MS) -> Waveform:
    """Synchronised overlap-add of source frames along ``path``.

    Each target frame copies the windowed source frame it is aligned to,
    nudged by up to ``shift_ms`` to best continue the previously copied
    segment, and the copies are overlap-added at the target hop.
    """
    sr = wave_.sample_rate
    N = ms_to_samples(frame_len_ms, sr)
    H = ms_to_samples(hop_ms, sr)
    S = ms_to_samples(shift_ms, sr)
    x = wave_.samples
    n_src = 1 + (len(x) - N) // H if len(x) >= N else 0
    check_path(path)
    if n_src != path.T_s:
        raise ValueError(f"waveform has {n_src} frames, path expects {path.T_s}")
    xp = np.pad(x, (S, N + H + S))
    win = hann(N)
    T_t = path.T_t
    out = np.zeros((T_t - 1) * H + N)
    norm = np.zeros_like(out)
    src = first_sources(path)
    prev = None
    for j in range(T_t):
        start = src[j] * H
        best = 0
        if prev is not None and S > 0:
            natural = xp[S + prev + H:S + prev + H + N]
            scores = [_ncc(xp[S + start + d:S + start + d + N], natural) for d in range(-S, S + 1)]
            # first maximum, searched outward from zero shift
            order = sorted(range(-S, S + 1), key=abs)
            best = max(order, key=lambda d: scores[d + S])
            best = max(-start, best)
        seg = xp[S + start + best:S + start + best + N]
        out[j * H:j * H + N] += seg * win
        norm[j * H:j * H + N] += win
        prev = start + best
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    return Waveform(out, sr)
