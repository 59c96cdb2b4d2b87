"""Train at several MAP thresholds and report held-out alignment quality.

usage: python scripts/threshold_sweep.py [--epochs 150] [--thresholds 0.5 0.9 1.0]
"""
import argparse

import numpy as np

from durmod.align import encode_moves, length_error_ms_per_sec, match_ratio
from durmod.infer import modify_duration
from durmod.model import ModelConfig
from durmod.train import LossConfig, TrainSchedule, synth_dataset, train


def evaluate(pairs, params, cfg):
    match, err = [], []
    for p in pairs:
        r = modify_duration(p.X, params, cfg)
        match.append(match_ratio(encode_moves(r.path), encode_moves(p.true_path)))
        err.append(length_error_ms_per_sec(r.T_hat, p.Y.n_frames))
    return float(np.mean(match)), float(np.mean(err))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.9, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = synth_dataset(240, seed=1)
    train_set, heldout = data[:200], data[200:220]
    cfg = ModelConfig(d_model=32, n_enc_blocks=3, n_dec_blocks=3)
    for th in args.thresholds:
        sched = TrainSchedule(max_epochs=args.epochs, learning_rate=1e-3, warmup_epochs=10,
                              threshold_high=th, seed=args.seed)
        params, _ = train(train_set, cfg, LossConfig(), sched)
        m, e = evaluate(heldout, params, cfg)
        print(f"threshold={th:.2f} match_ratio={m:.3f} len_err_ms_per_sec={e:.1f}", flush=True)


if __name__ == "__main__":
    main()
