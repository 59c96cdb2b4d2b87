"""Open-loop duration modification from a source utterance alone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import WarpPath, attention_scores, backtrack
from .features import FeatureSequence, as_matrix
from .mask import AttentionMask, build_mask
from .model import ModelConfig, Params, decode_step, encode, frozen, predict_length_ratio, predicted_length


@dataclass
class InferenceResult:
    T_hat: int
    ratio: float
    attention: np.ndarray  # T_s x T_hat
    mask: AttentionMask
    path: WarpPath
    Y_hat: FeatureSequence


def modify_duration(X: FeatureSequence, params: Params, cfg: ModelConfig, rng=None) -> InferenceResult:
    """Predict the target length, decode attention autoregressively, backtrack.

    Only the source features enter this function; decoding always uses soft
    attention and feeds its own predictions back as history.
    """
    hop = getattr(X, "hop_ms", 10.0)
    data = as_matrix(X)
    P = frozen(params)
    z = encode(data, P, cfg)
    ratio = float(predict_length_ratio(z, P).item())
    T_s = data.shape[1]
    T_hat = predicted_length(ratio, T_s, cfg.slope)
    mask = build_mask(T_s, T_hat, cfg.slope)
    D = data.shape[0]
    A = np.zeros((T_s, T_hat))
    Y_hat = np.zeros((D, T_hat))
    for t in range(T_hat):
        a_t, y_t = decode_step(data, z, Y_hat[:, :t], mask.allowed[:, t], P, cfg, "soft", rng)
        A[:, t] = a_t.data[:, 0]
        Y_hat[:, t] = y_t.data[:, 0]
    path = backtrack(attention_scores(A), mask, cfg.max_consec)
    return InferenceResult(T_hat, ratio, A, mask, path, FeatureSequence(Y_hat, hop_ms=hop))


def heatmap(attention: np.ndarray, path: WarpPath | None = None) -> np.ndarray:
    """8-bit image of the attention map (rows = source frames); path cells set to 128."""
    A = np.asarray(attention, dtype=np.float64)
    peak = A.max()
    img = np.round(255.0 * A / peak) if peak > 0 else np.zeros_like(A)
    img = img.astype(np.uint8)
    if path is not None:
        img[path.pairs[:, 0], path.pairs[:, 1]] = 128
    return img
