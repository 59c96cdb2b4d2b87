"""Constrained DTW backtracking, the closed-loop DTW comparator and path metrics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .features import as_matrix
from .mask import AttentionMask

MOVES = "HDV"


class InfeasiblePathError(RuntimeError):
    pass


@dataclass(frozen=True)
class WarpPath:
    pairs: np.ndarray  # int, shape (n, 2): (source i, target j)

    def __post_init__(self):
        object.__setattr__(self, "pairs", np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def T_s(self) -> int:
        return int(self.pairs[-1, 0]) + 1

    @property
    def T_t(self) -> int:
        return int(self.pairs[-1, 1]) + 1

    def as_tuples(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in self.pairs]


def check_path(path: WarpPath, T_s: int | None = None, T_t: int | None = None,
               mask: AttentionMask | None = None, max_consec: int | None = None) -> None:
    """Raise ``ValueError`` if ``path`` breaks any warp-path invariant."""
    p = path.pairs
    if len(p) == 0 or tuple(p[0]) != (0, 0):
        raise ValueError("path must start at (0, 0)")
    T_s = path.T_s if T_s is None else T_s
    T_t = path.T_t if T_t is None else T_t
    if tuple(p[-1]) != (T_s - 1, T_t - 1):
        raise ValueError(f"path ends at {tuple(p[-1])}, expected {(T_s - 1, T_t - 1)}")
    steps = np.diff(p, axis=0)
    if not np.isin(steps, (0, 1)).all() or (steps.sum(axis=1) == 0).any():
        raise ValueError("path steps must advance i, j or both by exactly one")
    if mask is not None and not mask.allowed[p[:, 0], p[:, 1]].all():
        k = int(np.argmin(mask.allowed[p[:, 0], p[:, 1]]))
        raise ValueError(f"path cell {tuple(p[k])} lies outside the mask")
    if max_consec is not None:
        moves = encode_moves(path)
        for m in "HV":
            if m * (max_consec + 1) in moves:
                raise ValueError(f"path has more than {max_consec} consecutive {m} moves")


def encode_moves(path: WarpPath) -> str:
    steps = np.diff(path.pairs, axis=0)
    # (di, dj): (0,1)->H, (1,1)->D, (1,0)->V
    code = steps[:, 0] * 2 + steps[:, 1]  # H=1, D=3, V=2
    lut = {1: "H", 3: "D", 2: "V"}
    return "".join(lut[int(c)] for c in code)


def path_score(scores: np.ndarray, path: WarpPath) -> float:
    total = 0.0
    for i, j in path.pairs:
        total += scores[i, j]
    return total


@nb.njit(cache=False)
def _constrained_dp(scores, allowed, m):
    T_s, T_t = scores.shape
    n_states = 1 + 2 * m  # 0: D/start, 1..m: H run r, m+1..2m: V run r
    NEG = -np.inf
    best = np.full((T_s, T_t, n_states), NEG)
    back = np.full((T_s, T_t, n_states), -1, dtype=np.int32)
    if allowed[0, 0]:
        best[0, 0, 0] = scores[0, 0]
    for i in range(T_s):
        for j in range(T_t):
            if not allowed[i, j] or (i == 0 and j == 0):
                continue
            s = scores[i, j]
            if i > 0 and j > 0:
                bv = NEG
                bk = -1
                for k in range(n_states):
                    v = best[i - 1, j - 1, k]
                    if v > bv:
                        bv = v
                        bk = k
                if bk >= 0:
                    best[i, j, 0] = bv + s
                    back[i, j, 0] = bk
            if j > 0:
                # H run 1 from D or any V run
                bv = best[i, j - 1, 0]
                bk = 0 if bv > NEG else -1
                for r in range(1, m + 1):
                    v = best[i, j - 1, m + r]
                    if v > bv:
                        bv = v
                        bk = m + r
                if bk >= 0:
                    best[i, j, 1] = bv + s
                    back[i, j, 1] = bk
                for r in range(2, m + 1):
                    v = best[i, j - 1, r - 1]
                    if v > NEG:
                        best[i, j, r] = v + s
                        back[i, j, r] = r - 1
            if i > 0:
                bv = best[i - 1, j, 0]
                bk = 0 if bv > NEG else -1
                for r in range(1, m + 1):
                    v = best[i - 1, j, r]
                    if v > bv:
                        bv = v
                        bk = r
                if bk >= 0:
                    best[i, j, m + 1] = bv + s
                    back[i, j, m + 1] = bk
                for r in range(2, m + 1):
                    v = best[i - 1, j, m + r - 1]
                    if v > NEG:
                        best[i, j, m + r] = v + s
                        back[i, j, m + r] = m + r - 1
    return best, back


def backtrack(scores, mask: AttentionMask | None = None, max_consec: int | None = 1) -> WarpPath:
    """Max-sum monotone path through ``scores`` inside ``mask``.

    Steps are H (target advances), D (both) or V (source advances), and no
    more than ``max_consec`` H or V moves may occur in a row (``None`` means
    unconstrained). Ties prefer D, then H, then V.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be a matrix, got shape {scores.shape}")
    T_s, T_t = scores.shape
    if mask is None:
        allowed = np.ones_like(scores, dtype=np.bool_)
    else:
        allowed = np.asarray(mask.allowed, dtype=np.bool_)
        if allowed.shape != scores.shape:
            raise ValueError(f"mask shape {allowed.shape} does not match scores {scores.shape}")
    if max_consec is None:
        m = max(T_s, T_t)
    else:
        if max_consec < 1:
            raise ValueError(f"max_consec must be >= 1, got {max_consec}")
        m = min(int(max_consec), max(T_s, T_t))
    if not np.isfinite(scores[allowed]).all():
        raise ValueError("scores must be finite on allowed cells")
    best, back = _constrained_dp(scores, allowed, m)
    end = best[T_s - 1, T_t - 1]
    if not np.isfinite(end).any():
        reach = np.isfinite(best).any(axis=(0, 2))
        col = int(np.argmin(reach)) if not reach.all() else T_t - 1
        raise InfeasiblePathError(f"no feasible path; column {col} is unreachable")
    # np.argmax returns the first maximum: D, then H runs, then V runs
    state = int(np.argmax(end))
    i, j = T_s - 1, T_t - 1
    pairs = [(i, j)]
    while (i, j) != (0, 0):
        prev = int(back[i, j, state])
        if state == 0:
            i, j = i - 1, j - 1
        elif state <= m:
            j -= 1
        else:
            i -= 1
        state = prev
        pairs.append((i, j))
    return WarpPath(np.array(pairs[::-1]))


def attention_scores(A, floor: float = 1e-12) -> np.ndarray:
    """Log-attention, so a max-sum path maximises the product of attention weights.

    Raw probabilities are all positive and would reward detours that visit
    extra cells; logs are non-positive and penalise them like DTW costs.
    """
    return np.log(np.maximum(np.asarray(A, dtype=np.float64), floor))


def frame_similarity(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Negative mean-absolute frame distance, ``T_s x T_t``."""
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"feature dimension mismatch: {X.shape[0]} vs {Y.shape[0]}")
    D = X.shape[0]
    return -np.abs(X.T[:, None, :] - Y.T[None, :, :]).sum(axis=2) / D


def dtw_align(X, Y, mask: AttentionMask | None = None, max_consec: int | None = 1) -> WarpPath:
    """Closed-loop comparator: backtrack on the similarity of known X and Y."""
    X = as_matrix(X)
    Y = as_matrix(Y)
    return backtrack(frame_similarity(X, Y), mask, max_consec)


@nb.njit(cache=False)
def _levenshtein(a, b):
    n, m = len(a), len(b)
    prev = np.arange(m + 1)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev, cur = cur, prev
    return prev[m]


def levenshtein(a: str, b: str) -> int:
    return int(_levenshtein(np.frombuffer(a.encode(), dtype=np.uint8),
                            np.frombuffer(b.encode(), dtype=np.uint8)))


def match_ratio(a: str, b: str) -> float:
    """One minus edit distance over mean sequence length, clamped to [0, 1]."""
    if not a or not b:
        raise ValueError("match_ratio needs two non-empty move sequences")
    r = 1.0 - levenshtein(a, b) / ((len(a) + len(b)) / 2.0)
    return min(1.0, max(0.0, r))


def length_error_ms_per_sec(T_hat: int, T_true: int, hop_ms: float = 10.0) -> float:
    # hop cancels: (|dT| * hop) ms per (T * hop / 1000) s
    if T_true < 1:
        raise ValueError("true length must be >= 1")
    return 1000.0 * abs(T_hat - T_true) / T_true


# -------------------------------------------------------------- alignment file


def write_alignment(path: WarpPath, file, slope: float, max_consec: int | None) -> None:
    k = "inf" if max_consec is None else str(max_consec)
    lines = [f"# T_s={path.T_s} T_t={path.T_t} slope={slope:g} max_consec={k}"]
    lines += [f"{i}\t{j}" for i, j in path.pairs]
    Path(file).write_text("\n".join(lines) + "\n")


def read_alignment(file) -> tuple[WarpPath, dict]:
    text = Path(file).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{file}: missing alignment header")
    meta = {}
    for item in text[0][1:].split():
        key, _, val = item.partition("=")
        meta[key] = val
    try:
        pairs = [tuple(int(v) for v in line.split("\t")) for line in text[1:] if line.strip()]
        meta = {"T_s": int(meta["T_s"]), "T_t": int(meta["T_t"]), "slope": float(meta["slope"]),
                "max_consec": None if meta["max_consec"] == "inf" else int(meta["max_consec"])}
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{file}: malformed alignment file ({exc})") from None
    path = WarpPath(np.array(pairs))
    check_path(path, meta["T_s"], meta["T_t"])
    return path, meta
