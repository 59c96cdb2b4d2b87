"""Training: loss, Adam, attention-sampling schedule, augmentation, synthetic corpus."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .align import WarpPath, attention_scores, backtrack, check_path, encode_moves, match_ratio
from .features import FeatureSequence, as_matrix
from .mask import build_mask
from .model import ModelConfig, Params, forward_teacher_forced, init_params
from .synth import warp_features

log = logging.getLogger(__name__)


ENERGY_REF = 0.3
ENERGY_SCALE = 0.2


class NumericalError(RuntimeError):
    pass


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ValueError("loss weights must be strictly positive")


@dataclass
class TrainSchedule:
    learning_rate: float = 1e-4
    max_epochs: int = 100
    warmup_epochs: int = 20
    threshold_low: float = 0.1
    threshold_high: float = 0.9
    seed: int = 0
    accumulate: int = 1
    p_reverse: float = 0.5
    p_crop: float = 0.5
    map_branch: str = "soft"  # what the u >= threshold branch uses: "soft" or "argmax"

    def __post_init__(self):
        if not 0 <= self.threshold_low <= self.threshold_high <= 1:
            raise ValueError("need 0 <= threshold_low <= threshold_high <= 1")
        if self.map_branch not in ("soft", "argmax"):
            raise ValueError(f"map_branch must be 'soft' or 'argmax', got {self.map_branch!r}")
        if self.accumulate < 1:
            raise ValueError("accumulate must be >= 1")


def loss(Y_hat, Y, ratio_hat, ratio: float, cfg: LossConfig) -> G.Tensor:
    """``lambda1 * MAE(Y_hat, Y) + lambda2 * |ratio_hat - ratio|``."""
    Y = as_matrix(Y)
    rec = G.l1_loss(Y_hat, Y)
    length = G.abs_(G.sub(ratio_hat, np.full(G._as_tensor(ratio_hat).shape, float(ratio))))
    return G.add(G.scale(rec, cfg.lambda1), G.scale(G.sum_(length), cfg.lambda2))


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``params`` (name -> array)."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def attention_threshold(epoch: int, schedule: TrainSchedule) -> float:
    return schedule.threshold_low if epoch < schedule.warmup_epochs else schedule.threshold_high


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticPair:
    X: FeatureSequence
    Y: FeatureSequence
    true_path: WarpPath
    cls: int = 0

    @property
    def ratio(self) -> float:
        return self.Y.n_frames / self.X.n_frames


def _bump_field(rng, D: int, T: int) -> np.ndarray:
    X = np.zeros((D, T))
    mel = np.arange(D)[:, None]
    t = np.arange(T)[None, :]
    for _ in range(rng.integers(5, 16)):
        mu_m, mu_t = rng.uniform(0, D), rng.uniform(0, T)
        s_m, s_t = rng.uniform(3.0, 12.0), rng.uniform(2.0, 6.0)
        amp = rng.uniform(0.5, 2.0)
        X += amp * np.exp(-0.5 * ((mel - mu_m) / s_m) ** 2 - 0.5 * ((t - mu_t) / s_t) ** 2)
    return X + 0.05 * rng.standard_normal((D, T))


def rasterize_warp(src_knots: np.ndarray, tgt_knots: np.ndarray) -> WarpPath:
    """Unit-step path following a monotone piecewise-linear warp.

    Knots run from (0, 0) to (T_s - 1, T - 1). Each target frame ``j`` takes
    the rounded source position of the warp at ``j``; source jumps become V
    moves followed by a D move, repeats become H moves.
    """
    T_s, T = int(round(src_knots[-1])) + 1, int(round(tgt_knots[-1])) + 1
    u = np.interp(np.arange(T), tgt_knots, src_knots)
    src = np.clip(np.rint(u).astype(np.int64), 0, T_s - 1)
    src = np.maximum.accumulate(src)
    src[0], src[-1] = 0, T_s - 1
    pairs = [(0, 0)]
    for j in range(1, T):
        i = pairs[-1][0]
        while i < src[j] - 1:
            i += 1
            pairs.append((i, j - 1))
        pairs.append((src[j], j))
    return WarpPath(np.array(pairs))


def _segment_slopes(X: np.ndarray, bounds: np.ndarray, s: float, rng, coupled: bool) -> np.ndarray:
    if not coupled:
        return s ** rng.uniform(-1.0, 1.0, len(bounds) - 1)
    # louder stretches are lengthened, quieter ones shortened, against a fixed
    # reference level so that overall loudness also sets the length ratio
    energy = X.mean(axis=0)
    seg = np.array([energy[a:b + 1].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    return s ** np.tanh((seg - ENERGY_REF) / ENERGY_SCALE)


def random_warp(X: np.ndarray, s: float, rng, coupled: bool = True, max_tries: int = 50) -> WarpPath | None:
    T_s = X.shape[1]
    if s == 1.0:
        return WarpPath(np.stack([np.arange(T_s)] * 2, axis=1))
    for _ in range(max_tries):
        n_knots = int(rng.integers(3, 7))
        inner = np.sort(rng.choice(np.arange(1, T_s - 1), size=min(n_knots - 2, T_s - 2), replace=False))
        bounds = np.r_[0, inner, T_s - 1]
        slopes = _segment_slopes(X, bounds, s, rng, coupled)
        tgt = np.r_[0.0, np.cumsum(np.diff(bounds) * slopes)]
        T = int(np.clip(round(tgt[-1]) + 1, math.ceil(T_s / s - 1e-9), math.floor(T_s * s + 1e-9)))
        tgt *= (T - 1) / tgt[-1]
        path = rasterize_warp(bounds.astype(np.float64), tgt)
        try:
            check_path(path, T_s, T, mask=build_mask(T_s, T, s), max_consec=1)
        except ValueError:
            continue
        return path
    return None


def synth_dataset(n_pairs: int, ts_range: tuple[int, int] = (40, 120), slope: float = 1.25,
                  n_classes: int = 2, seed: int = 0, n_mels: int = 80,
                  coupled: bool = True) -> list[SyntheticPair]:
    """Parallel pairs whose target is a known warp of the source plus a class offset.

    Sources are sums of Gaussian bumps over (mel, time) with light noise. The
    warp is piecewise linear with 3-6 knots and local slopes in
    ``[1/slope, slope]``; with ``coupled`` each segment's slope follows its
    mean energy so the warp is predictable from the source alone.
    """
    rng = np.random.default_rng(seed)
    residuals = 0.3 * rng.standard_normal((n_classes, n_mels))
    pairs = []
    while len(pairs) < n_pairs:
        T_s = int(rng.integers(ts_range[0], ts_range[1] + 1))
        X = _bump_field(rng, n_mels, T_s)
        path = random_warp(X, slope, rng, coupled)
        if path is None:
            continue
        cls = int(rng.integers(n_classes))
        Y = warp_features(X, path).data + residuals[cls][:, None]
        pairs.append(SyntheticPair(FeatureSequence(X), FeatureSequence(Y), path, cls))
    return pairs


def augment(pair: SyntheticPair, rng, p_reverse: float = 0.5, p_crop: float = 0.5,
            min_len: int = 8) -> SyntheticPair:
    X, Y, path = pair.X.data, pair.Y.data, pair.true_path.pairs
    if rng.random() < p_reverse:
        T_s, T = X.shape[1], Y.shape[1]
        X, Y = X[:, ::-1], Y[:, ::-1]
        path = np.stack([T_s - 1 - path[::-1, 0], T - 1 - path[::-1, 1]], axis=1)
    if rng.random() < p_crop and Y.shape[1] > min_len:
        T = Y.shape[1]
        length = int(rng.integers(min_len, T + 1))
        j0 = int(rng.integers(0, T - length + 1))
        j1 = j0 + length - 1
        seg = path[(path[:, 1] >= j0) & (path[:, 1] <= j1)]
        i0, i1 = seg[0, 0], seg[-1, 0]
        X, Y = X[:, i0:i1 + 1], Y[:, j0:j1 + 1]
        path = seg - np.array([i0, j0])
    return SyntheticPair(FeatureSequence(np.ascontiguousarray(X)), FeatureSequence(np.ascontiguousarray(Y)),
                         WarpPath(path), pair.cls)


# ---------------------------------------------------------------------- train


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    len_err: float
    match_ratio: float


def pair_rng(seed: int, uid: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, uid, epoch])


@dataclass
class StepResult:
    grads: dict
    loss: float
    len_err: float
    match_ratio: float


def utterance_step(pair: SyntheticPair, params: Params, model_cfg: ModelConfig, loss_cfg: LossConfig,
                   mode: str, rng) -> StepResult:
    """Forward, loss and backward for one pair, with private gradient buffers.

    ``params`` are only read, so several calls may run concurrently.
    """
    local = {k: G.Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}
    mask = build_mask(pair.X.n_frames, pair.Y.n_frames, model_cfg.slope)
    out = forward_teacher_forced(pair.X, pair.Y, local, model_cfg, mode, rng, mask)
    L = loss(out.Y_hat, pair.Y, out.ratio, pair.ratio, loss_cfg)
    value = L.item()
    if not math.isfinite(value):
        raise NumericalError("non-finite loss")
    G.backward(L)
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in local.items()}
    est = backtrack(attention_scores(out.attention.data), mask, model_cfg.max_consec)
    return StepResult(grads, value, abs(out.ratio.item() - pair.ratio),
                      match_ratio(encode_moves(est), encode_moves(pair.true_path)))


def train(dataset: list[SyntheticPair], model_cfg: ModelConfig, loss_cfg: LossConfig,
          schedule: TrainSchedule, params: Params | None = None, jobs: int = 1,
          callback=None) -> tuple[Params, list[EpochMetrics]]:
    """Per-utterance training with stochastic/soft attention mixing.

    Each epoch visits every pair once in a seeded order. A pair is augmented,
    then decoded with sampled one-hot attention with probability
    ``attention_threshold(epoch)`` and with ``schedule.map_branch`` attention
    otherwise. Gradients of ``schedule.accumulate`` consecutive pairs are
    averaged before each Adam step; with ``jobs > 1`` the pairs of one group
    run on a thread pool and their gradients are summed in visit order, so
    results do not depend on ``jobs``.
    """
    if not dataset:
        raise ValueError("training set is empty")
    if params is None:
        params = init_params(model_cfg, schedule.seed)
    state = AdamState()
    order_rng = np.random.default_rng([schedule.seed, 7919])
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None
    history = []
    try:
        for epoch in range(schedule.max_epochs):
            threshold = attention_threshold(epoch, schedule)
            order = [int(u) for u in order_rng.permutation(len(dataset))]
            tot_loss = tot_len = tot_match = 0.0
            for g0 in range(0, len(order), schedule.accumulate):
                jobs_in = []
                for uid in order[g0:g0 + schedule.accumulate]:
                    rng = pair_rng(schedule.seed, uid, epoch)
                    pair = augment(dataset[uid], rng, schedule.p_reverse, schedule.p_crop)
                    mode = "sampled" if rng.random() < threshold else schedule.map_branch
                    jobs_in.append((uid, pair, mode, rng))

                def run(item):
                    uid, pair, mode, rng = item
                    try:
                        return utterance_step(pair, params, model_cfg, loss_cfg, mode, rng)
                    except NumericalError:
                        raise NumericalError(f"non-finite loss at epoch {epoch}, utterance {uid}") from None

                results = list(pool.map(run, jobs_in)) if pool else [run(x) for x in jobs_in]
                grads = {k: sum(r.grads[k] for r in results) / len(results) for k in params}
                adam_step({k: p.data for k, p in params.items()}, grads, state, schedule.learning_rate)
                for r in results:
                    tot_loss += r.loss
                    tot_len += r.len_err
                    tot_match += r.match_ratio
            n = len(dataset)
            m = EpochMetrics(epoch, tot_loss / n, tot_len / n, tot_match / n)
            history.append(m)
            log.info("epoch %d loss=%.4f len_err=%.4f match=%.3f", epoch, m.loss, m.len_err, m.match_ratio)
            if callback is not None:
                callback(m, params)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, history


def write_metrics(history: list[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "len_err", "match_ratio"])
        for m in history:
            w.writerow([m.epoch, f"{m.loss:.6f}", f"{m.len_err:.6f}", f"{m.match_ratio:.6f}"])


# --------------------------------------------------------------------- config


def _coerce(value: str, kind):
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def load_config(path=None, overrides: dict | None = None) -> tuple[ModelConfig, LossConfig, TrainSchedule]:
    """Read ``key=value`` lines into the three config dataclasses.

    Unknown keys are an error. ``overrides`` win over file values.
    """
    values: dict[str, str] = {}
    if path is not None:
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
            values[key.strip()] = val.strip()
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = str(v)
    built = []
    for cls in (ModelConfig, LossConfig, TrainSchedule):
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                kw[f.name] = _coerce(values.pop(f.name), f.type)
        built.append(cls(**kw))
    if values:
        raise ValueError(f"unknown config keys: {', '.join(sorted(values))}")
    return tuple(built)
