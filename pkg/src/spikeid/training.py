"""Reconstruction loss, Adam with cosine annealing, and the training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .converter import (ConverterParams, EmiConfig, Waveform, add_emi, at_times,
                        rk4_integrate, simulate, subsample)
from .estimators import load_state_dict, normalize_input, snn_forward, state_dict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 3000
    lr: float = 5e-5
    lr_bias_mult: float = 3.0
    clip_norm: float | None = 0.3
    seed: int = 0
    solver_dt: float = 5e-6
    sim_span: float = 1.5e-3
    input_stride: int = 30
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int | None = 1  # multi-condition only; None = whole dataset

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")


@dataclass(frozen=True)
class ParamRanges:
    L_range: tuple = (80e-6, 200e-6)
    C_range: tuple = (5e-6, 15e-6)
    Rs_range: tuple = (0.02, 0.5)

    def __post_init__(self):
        for lo, hi in (self.L_range, self.C_range, self.Rs_range):
            if not 0 < lo < hi:
                raise ValueError("ranges need 0 < lower < upper")


@dataclass
class Checkpoint:
    epoch: int
    loss: float
    params: tuple
    weights: dict = field(repr=False)


# -- loss -------------------------------------------------------------------


def reconstruction_loss(pred_iL: Tensor, pred_Vo: Tensor, meas_iL, meas_Vo) -> Tensor:
    """Sum of per-channel MSEs, each divided by the measured channel variance.

    Works on a single record (n,) or a batch (B, n); a batch returns the
    mean over records.
    """
    mi = np.asarray(meas_iL, dtype=np.float64)
    mv = np.asarray(meas_Vo, dtype=np.float64)
    if pred_iL.shape != mi.shape or pred_Vo.shape != mv.shape:
        raise ad.ShapeError("prediction and measurement must be on the same grid")
    var_i = mi.var(axis=-1, keepdims=True)
    var_v = mv.var(axis=-1, keepdims=True)
    if np.any(var_i < 1e-24) or np.any(var_v < 1e-24):
        raise ValueError("degenerate measurement: channel standard deviation below 1e-12")
    term_i = ad.mean(ad.square(pred_iL - mi) / var_i, axis=-1)
    term_v = ad.mean(ad.square(pred_Vo - mv) / var_v, axis=-1)
    return ad.mean(term_i + term_v)


# -- optimizer --------------------------------------------------------------


def cosine_lr(epoch: int, epochs: int, lr: float) -> float:
    return 0.5 * lr * (1.0 + math.cos(math.pi * epoch / epochs))


def global_norm(grads) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads, max_norm: float):
    """Scale all gradients jointly so their global L2 norm is <= max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


class Adam:
    """Adam over a list of Tensors, with a per-parameter learning-rate multiplier."""

    def __init__(self, params, lr_mults=None, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr_mults = list(lr_mults) if lr_mults is not None else [1.0] * len(self.params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self, grads, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            step = lr * self.lr_mults[i] * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.values = p.values - step

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load(self, state: dict):
        self.t = state["t"]
        self.m = [np.array(a) for a in state["m"]]
        self.v = [np.array(a) for a in state["v"]]


# -- data preparation -------------------------------------------------------


@dataclass
class Sample:
    """One training item: estimator input plus the loss target grid."""

    x: np.ndarray
    target_iL: np.ndarray
    target_Vo: np.ndarray
    true: tuple | None = None


def loss_grid(cfg: TrainConfig) -> np.ndarray:
    n = int(round(cfg.sim_span / cfg.solver_dt))
    return cfg.solver_dt * np.arange(1, n + 1)


def prepare_sample(meas: Waveform, cfg: TrainConfig, true=None) -> Sample:
    """Subsample the measured record for the estimator and align the loss target."""
    x = normalize_input(subsample(meas, cfg.input_stride))
    target = at_times(meas, loss_grid(cfg))
    return Sample(x, target.iL, target.Vo, true)


def predict(est, x):
    if est.kind == "snn":
        params, _, _ = snn_forward(est, x, record=False)
        return params
    return est(x)


def sample_loss(est, samples: list[Sample], known: ConverterParams, cfg: TrainConfig):
    """Forward pass for a batch of samples; returns (loss, params Tensor)."""
    if len(samples) == 1:
        s = samples[0]
        x, ti, tv = s.x, s.target_iL, s.target_Vo
    else:
        x = np.stack([s.x for s in samples])
        ti = np.stack([s.target_iL for s in samples])
        tv = np.stack([s.target_Vo for s in samples])
    params = predict(est, x)
    iL, Vo = rk4_integrate(params[..., 0], params[..., 1], params[..., 2], known,
                           (0.0, cfg.sim_span), cfg.solver_dt)
    return reconstruction_loss(iL, Vo, ti, tv), params


# -- training loops ---------------------------------------------------------


def make_optimizer(est, cfg: TrainConfig) -> Adam:
    mults = [cfg.lr_bias_mult if name == "b_param" else 1.0 for name, _ in est.named_parameters()]
    return Adam(est.parameters(), mults, cfg.adam_betas, cfg.adam_eps)


def fit_samples(est, samples: list[Sample], known: ConverterParams, cfg: TrainConfig,
                batch_size: int = 1, callback=None, resume: dict | None = None,
                stop_after: int | None = None):
    """Core loop. Returns ``(best, history, state)``.

    ``state`` holds everything needed to continue the run bit-identically
    (weights, Adam moments, next epoch, best checkpoint); pass it back as
    ``resume``.  ``stop_after`` ends the run early without changing the
    cosine schedule, which always spans ``cfg.epochs``.
    """
    opt = make_optimizer(est, cfg)
    params_list = est.parameters()
    best = None
    start_epoch = 0
    if resume is not None:
        load_state_dict(est, resume["weights"])
        opt.load(resume["adam"])
        start_epoch = resume["epoch"]
        if resume.get("best") is not None:
            b = resume["best"]
            best = Checkpoint(b["epoch"], b["loss"], tuple(b["params"]), b["weights"])
    end_epoch = cfg.epochs if not stop_after else min(cfg.epochs, stop_after)
    history = []
    for epoch in range(start_epoch, end_epoch):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        snapshot = state_dict(est)
        losses, estimates = [], []
        failed = False
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            try:
                with ad.Tape() as tape:
                    loss, p = sample_loss(est, batch, known, cfg)
                ad.backward(loss, tape, params_list)
            except NonFiniteError as exc:
                log.warning("epoch %d: skipped update (%s)", epoch, exc)
                failed = True
                continue
            losses.append(loss.item() * len(batch))
            estimates.append(p.values.reshape(-1, 3))
            grads = [t.grad for t in params_list]
            if cfg.clip_norm is not None:
                grads, _ = clip_global_norm(grads, cfg.clip_norm)
            opt.step(grads, lr)
        if not losses:
            history.append({"epoch": epoch, "loss": math.nan, "L": math.nan, "C": math.nan,
                            "Rs": math.nan, "lr": lr})
            continue
        n_done = sum(e.shape[0] for e in estimates)
        epoch_loss = sum(losses) / n_done
        mean_est = np.concatenate(estimates).mean(axis=0)
        history.append({"epoch": epoch, "loss": epoch_loss, "L": float(mean_est[0]),
                        "C": float(mean_est[1]), "Rs": float(mean_est[2]), "lr": lr})
        if not failed and (best is None or epoch_loss < best.loss):
            best = Checkpoint(epoch, epoch_loss, tuple(float(v) for v in mean_est), snapshot)
        if callback is not None:
            callback(epoch, history[-1])
    state = {"epoch": end_epoch, "weights": state_dict(est), "adam": opt.state(),
             "best": None if best is None else {"epoch": best.epoch, "loss": best.loss,
                                                "params": list(best.params),
                                                "weights": best.weights}}
    return best, history, state


def train_single(est, meas: Waveform, known: ConverterParams, cfg: TrainConfig,
                 callback=None):
    """Fit ``est`` to one measured record; returns (best Checkpoint, history).

    Each history row describes the weights *before* that epoch's update, so
    the best checkpoint's weights reproduce its recorded loss exactly.
    Epochs whose forward pass overflows are skipped and logged.
    """
    best, history, _ = fit_samples(est, [prepare_sample(meas, cfg)], known, cfg, 1, callback)
    return best, history


def train_multi(est, dataset, known: ConverterParams, cfg: TrainConfig, callback=None):
    """Multi-condition training on (params, noisy waveform) pairs.

    Items are visited in dataset order in minibatches of ``cfg.batch_size``
    (default 1: one Adam step per item; None: the whole dataset per step).
    The best checkpoint is chosen by mean epoch loss.
    """
    samples = [prepare_sample(w, cfg, p.unknowns) for p, w in dataset]
    if not samples:
        raise ValueError("dataset is empty")
    best, history, _ = fit_samples(est, samples, known, cfg, cfg.batch_size or len(samples),
                                   callback)
    return best, history


def restore(est, ckpt: Checkpoint):
    load_state_dict(est, ckpt.weights)
    return est


# -- multi-condition data ---------------------------------------------------


def sample_params(ranges: ParamRanges, rng: np.random.Generator,
                  base: ConverterParams = ConverterParams()) -> ConverterParams:
    """Uniform draw of (L, C, Rs); the remaining constants come from ``base``."""
    L = rng.uniform(*ranges.L_range)
    C = rng.uniform(*ranges.C_range)
    Rs = rng.uniform(*ranges.Rs_range)
    return base.with_unknowns(L, C, Rs)


def emi_seeds(seed: int, n: int) -> list[int]:
    return [int(v) for v in np.random.SeedSequence(seed).generate_state(n)]


def make_dataset(n: int = 200, seed: int = 0, ranges: ParamRanges = ParamRanges(),
                 base: ConverterParams = ConverterParams(), emi: EmiConfig = EmiConfig(),
                 sim_dt: float = 0.5e-6, sim_span: float = 1.5e-3):
    """``n`` (params, noisy waveform) pairs with independent EMI seeds."""
    rng = np.random.default_rng(seed)
    params = [sample_params(ranges, rng, base) for _ in range(n)]
    seeds = emi_seeds(seed + 1, n)
    out = []
    for p, s in zip(params, seeds):
        clean = simulate(p, (0.0, sim_span), sim_dt)
        cfg = EmiConfig(emi.background_sigma_frac, emi.pulse_width, emi.pulse_amp_frac, s)
        out.append((p, add_emi(clean, cfg, p)))
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
