"""End-to-end protocols assembled from the library pieces.

Seed convention: one integer seeds both the weight initialisation and the
EMI realisation of the benchmark record.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .converter import (ConverterParams, Waveform, add_emi, read_waveform_csv, simulate,
                        write_waveform_csv)
from .estimators import init_weights
from .training import (emi_seeds, fit_samples, prepare_sample, restore, sample_params)


def benchmark_measurement(cfg: dict, seed: int | None = None, noise: bool = True):
    """Clean and EMI-corrupted benchmark records."""
    p = C.converter_params(cfg)
    clean = simulate(p, (0.0, cfg["sim_span"]), cfg["sim_dt"])
    noisy = add_emi(clean, C.emi_config(cfg, seed), p) if noise else clean.copy()
    return clean, noisy


def new_estimator(kind: str, cfg: dict, seed: int):
    if kind == "snn":
        return init_weights(seed, "snn", **C.snn_kwargs(cfg))
    return init_weights(seed, "ff")


def relative_errors(est_params, true_params) -> tuple:
    return tuple(abs(e - t) / t for e, t in zip(est_params, true_params))


def train_benchmark(kind: str, cfg: dict, seed: int | None = None, callback=None,
                    meas: Waveform | None = None, resume=None):
    """Single-condition protocol.

    Returns ``(estimator restored to its best checkpoint, best, history, state)``.
    """
    seed = cfg["seed"] if seed is None else seed
    if meas is None:
        _, meas = benchmark_measurement(cfg, seed)
    est = new_estimator(kind, cfg, seed)
    tcfg = C.train_config(cfg, kind, "single")
    best, history, state = fit_samples(est, [prepare_sample(meas, tcfg)],
                                       C.converter_params(cfg), tcfg, 1, callback, resume,
                                       cfg.get("stop_after") or None)
    if best is not None:
        restore(est, best)
    return est, best, history, state


def _dataset_item(args):
    p, sim_dt, sim_span, emi = args
    return p, add_emi(simulate(p, (0.0, sim_span), sim_dt), emi, p)


def build_dataset(cfg: dict, seed: int | None = None, jobs: int = 1):
    """Multi-condition dataset: uniform parameter draws, independent EMI seeds."""
    seed = cfg["seed"] if seed is None else seed
    n = cfg["n_waveforms"]
    rng = np.random.default_rng(seed)
    base = C.converter_params(cfg)
    params = [sample_params(C.param_ranges(cfg), rng, base) for _ in range(n)]
    items = [(p, cfg["sim_dt"], cfg["sim_span"], C.emi_config(cfg, s))
             for p, s in zip(params, emi_seeds(seed + 1, n))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_dataset_item, items))
    return [_dataset_item(a) for a in items]


def train_multi_condition(kind: str, cfg: dict, dataset, seed: int | None = None,
                          callback=None, resume=None):
    seed = cfg["seed"] if seed is None else seed
    est = new_estimator(kind, cfg, seed)
    tcfg = C.train_config(cfg, kind, "multi")
    samples = [prepare_sample(w, tcfg, p.unknowns) for p, w in dataset]
    best, history, state = fit_samples(est, samples, C.converter_params(cfg), tcfg,
                                       tcfg.batch_size or len(samples), callback, resume,
                                       cfg.get("stop_after") or None)
    if best is not None:
        restore(est, best)
    return est, best, history, state


def save_dataset(dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("index", "L", "C", "Rs", "Vg", "d", "R", "fs", "file"))
        for i, (p, wav) in enumerate(dataset):
            name = f"wave_{i:04d}.csv"
            w.writerow((i, repr(p.L), repr(p.C), repr(p.Rs), repr(p.Vg), repr(p.d), repr(p.R),
                        repr(p.fs), name))
            write_waveform_csv(wav, d / name)


def load_dataset(directory):
    d = Path(directory)
    index = d / "params.csv"
    if not index.exists():
        raise FileNotFoundError(f"no dataset at {d} (expected params.csv)")
    out = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            p = ConverterParams(*(float(row[k]) for k in ("L", "C", "Rs", "Vg", "d", "R", "fs")))
            out.append((p, read_waveform_csv(d / row["file"])))
    return out
