"""Parameter-estimation networks: a three-layer LIF SNN and a tanh MLP.

Both map a 100-point (iL, Vo) window to positive (L, C, Rs) through a
log-space output plus a learned bias ``b_param``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateConfig, Tensor
from .converter import Waveform

B_PARAM_INIT = (np.log(100e-6), np.log(10e-6), np.log(0.1))
PARAM_NAMES = ("L", "C", "Rs")


def normalize_input(w: Waveform) -> np.ndarray:
    """Per-channel z-score over the window (population std); (n, 2)."""
    x = w.channels()
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    ok = sd >= 1e-12
    out[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return out


@dataclass
class SpikeRecord:
    """Spike counts per hidden layer and timestep.

    ``counts[l, k]`` is the number of neurons of layer ``l`` that fired at
    step ``k``; ``rasters`` optionally keeps the full (n_steps, H_l) 0/1
    matrices.
    """

    counts: np.ndarray
    sizes: tuple
    rasters: list | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.sizes = tuple(int(h) for h in self.sizes)
        if self.counts.ndim != 2 or self.counts.shape[0] != len(self.sizes):
            raise ValueError("counts must be (n_layers, n_steps)")
        if np.any(self.counts < 0) or np.any(self.counts > np.array(self.sizes)[:, None]):
            raise ValueError("spike counts must lie in [0, H_l]")

    @classmethod
    def from_rasters(cls, rasters) -> "SpikeRecord":
        rasters = [np.asarray(r, dtype=np.int8) for r in rasters]
        counts = np.stack([r.sum(axis=1) for r in rasters])
        return cls(counts, tuple(r.shape[1] for r in rasters), rasters)

    @property
    def n_steps(self) -> int:
        return self.counts.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes)

    def total_rate(self) -> float:
        return float(self.counts.sum() / (self.n_steps * sum(self.sizes)))


@dataclass
class LifLayer:
    W: Tensor
    beta: float = 0.9
    u_thr: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not self.u_thr > 0:
            raise ValueError("u_thr must be positive")

    @property
    def size(self) -> int:
        return self.W.shape[1]


@dataclass
class LiReadout:
    W_out: Tensor
    b_param: Tensor
    beta_out: float = 0.95

    def __post_init__(self):
        if not 0 < self.beta_out < 1:
            raise ValueError("beta_out must lie in (0, 1)")


@dataclass
class SnnState:
    """Membranes and last spikes carried between calls (persistent mode)."""

    u: list
    s: list
    m: np.ndarray

    @classmethod
    def zeros(cls, sizes, batch_shape=()) -> "SnnState":
        return cls([np.zeros(batch_shape + (h,)) for h in sizes],
                   [np.zeros(batch_shape + (h,)) for h in sizes],
                   np.zeros(batch_shape + (3,)))


def lif_step(layer: LifLayer, u_prev, s_prev_out, s_in,
             surrogate: SurrogateConfig = SurrogateConfig()):
    """One subtract-reset LIF update; returns (u_new, s_out).

    The reset term uses the previous output spikes as a constant, so no
    gradient flows through it.
    """
    drive = ad.matmul(s_in, layer.W)
    reset = np.asarray(s_prev_out.values if isinstance(s_prev_out, Tensor) else s_prev_out,
                       dtype=np.float64) * layer.u_thr
    u = ad.add(ad.mul(u_prev, layer.beta), drive) - reset
    s = ad.spike_threshold(u - layer.u_thr, surrogate)
    return u, s


class SnnEstimator:
    """Three LIF layers (2->H->H->H) and a leaky-integrator readout (H->3).

    The first layer's weight matrix is the input projection: normalized
    samples are injected as analog current, one sample per timestep.
    """

    kind = "snn"

    def __init__(self, layers: list[LifLayer], readout: LiReadout,
                 surrogate: SurrogateConfig = SurrogateConfig()):
        if len(layers) != 3:
            raise ValueError("SnnEstimator expects exactly 3 LIF layers")
        self.layers = layers
        self.readout = readout
        self.surrogate = surrogate

    @property
    def H(self) -> int:
        return self.layers[0].size

    @property
    def input_proj(self) -> Tensor:
        return self.layers[0].W

    @property
    def layer_sizes(self) -> tuple:
        return tuple(layer.size for layer in self.layers)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"W{i + 1}", layer.W) for i, layer in enumerate(self.layers)]
        out += [("W_out", self.readout.W_out), ("b_param", self.readout.b_param)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def config(self) -> dict:
        return {"H": self.H, "beta": self.layers[0].beta, "beta_out": self.readout.beta_out,
                "u_thr": self.layers[0].u_thr, "alpha": self.surrogate.alpha}

    def forward(self, inputs, init_state: SnnState | None = None, record: bool = True):
        return snn_forward(self, inputs, init_state, record)

    __call__ = forward


def _snn_unroll(est: SnnEstimator, x: np.ndarray, state: SnnState):
    """Layer-by-layer forward over the whole sequence (time on axis 0).

    Layer ``i`` depends only on the spikes of layer ``i-1``, so each
    layer's synaptic drive for all timesteps is one matmul; only the
    membrane recursion loops over time.
    """
    s_in = np.moveaxis(x, -2, 0)
    us, spikes = [], []
    final_u, final_s = [], []
    for i, layer in enumerate(est.layers):
        drive = s_in @ layer.W.values
        u = np.empty_like(drive)
        s = np.empty_like(drive)
        u_prev, s_prev = state.u[i], state.s[i]
        beta, thr = layer.beta, layer.u_thr
        for k in range(drive.shape[0]):
            u_prev = beta * u_prev + drive[k] - thr * s_prev
            s_prev = (u_prev >= thr).astype(np.float64)
            u[k] = u_prev
            s[k] = s_prev
        if not np.all(np.isfinite(u)):
            raise ad.NonFiniteError("snn_forward", f"non-finite membrane in layer {i + 1}")
        us.append(u)
        spikes.append(s)
        final_u.append(u_prev.copy())
        final_s.append(s_prev.copy())
        s_in = s
    readout_drive = s_in @ est.readout.W_out.values
    m = state.m
    b_out = est.readout.beta_out
    for k in range(readout_drive.shape[0]):
        m = b_out * m + readout_drive[k]
    return us, spikes, m, SnnState(final_u, final_s, np.array(m, copy=True))


def _fused_snn(est: SnnEstimator, x: np.ndarray, state: SnnState):
    us, spikes, m_final, final = _snn_unroll(est, x, state)
    Ws = [layer.W for layer in est.layers]
    W_out = est.readout.W_out
    alpha = est.surrogate.alpha
    n_steps = x.shape[-2]
    x_t = np.moveaxis(x, -2, 0)

    def bw(gm):
        b_out = est.readout.beta_out
        # dL/dm[k] = beta_out^(N-k) * gm
        decay = b_out ** np.arange(n_steps - 1, -1, -1)
        lam_m = decay.reshape((-1,) + (1,) * gm.ndim) * gm
        grads = [None] * 4
        s_top = spikes[-1]
        grads[3] = _outer_sum(s_top, lam_m)
        ds = lam_m @ W_out.values.T
        for i in range(2, -1, -1):
            layer = est.layers[i]
            sg = 1.0 / (1.0 + alpha * np.abs(us[i] - layer.u_thr)) ** 2
            du = np.empty_like(ds)
            carry = np.zeros_like(ds[0])
            for k in range(n_steps - 1, -1, -1):
                carry = ds[k] * sg[k] + layer.beta * carry
                du[k] = carry
            pre = spikes[i - 1] if i > 0 else x_t
            grads[i] = _outer_sum(pre, du)
            if i > 0:
                ds = du @ Ws[i].values.T
        return tuple(grads)

    m = ad.custom_op("snn_unroll", (*Ws, W_out), m_final, bw)
    return m, spikes, final


def _outer_sum(a, b):
    """sum over leading (time, batch) axes of a^T b."""
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    return a2.T @ b2


def snn_forward(est: SnnEstimator, inputs, init_state: SnnState | None = None,
                record: bool = True, fused: bool = True):
    """Unroll the SNN over ``inputs`` of shape (N_s, 2) or (B, N_s, 2).

    Returns ``(params, record, final_state)`` where ``params`` is a Tensor
    (..., 3) holding (L, C, Rs).  The record holds 0/1 rasters for an
    unbatched call and batch-summed counts otherwise.  ``fused=False``
    builds the same computation out of tape primitives (slow; kept as a
    cross-check for the fused backward).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != 2 or x.ndim not in (2, 3):
        raise ValueError("inputs must be (N_s, 2) or (B, N_s, 2)")
    batch = x.shape[:-2]
    state = init_state or SnnState.zeros(est.layer_sizes, batch)
    if fused:
        m, spikes, final = _fused_snn(est, x, state)
    else:
        m, spikes, final = _stepwise_snn(est, x, state)
    params = ad.exp(ad.add(m, est.readout.b_param))
    rec = None
    if record:
        if batch:
            counts = np.stack([r.sum(axis=tuple(range(1, r.ndim))) for r in spikes])
            sizes = tuple(h * int(np.prod(batch)) for h in est.layer_sizes)
            rec = SpikeRecord(counts, sizes)
        else:
            rec = SpikeRecord.from_rasters(spikes)
    return params, rec, final


def _stepwise_snn(est: SnnEstimator, x: np.ndarray, state: SnnState):
    u = [Tensor(v) for v in state.u]
    s_prev = [np.asarray(v, dtype=np.float64) for v in state.s]
    m = Tensor(state.m)
    rasters = [[] for _ in est.layers]
    for k in range(x.shape[-2]):
        s_in = Tensor(x[..., k, :])
        for i, layer in enumerate(est.layers):
            u[i], s = lif_step(layer, u[i], s_prev[i], s_in, est.surrogate)
            s_prev[i] = s.values
            rasters[i].append(s.values)
            s_in = s
        m = ad.add(ad.mul(m, est.readout.beta_out), ad.matmul(s_in, est.readout.W_out))
    final = SnnState([t.values.copy() for t in u], [v.copy() for v in s_prev], m.values.copy())
    return m, [np.stack(r) for r in rasters], final


class FfEstimator:
    """Tanh MLP over the flattened (interleaved iL, Vo) window."""

    kind = "ff"

    def __init__(self, weights: list[Tensor], biases: list[Tensor], b_param: Tensor):
        if len(weights) != len(biases) + 1:
            raise ValueError("hidden layers need one bias each; the output layer has none")
        self.weights = weights
        self.biases = biases
        self.b_param = b_param

    @property
    def dims(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, w in enumerate(self.weights):
            out.append((f"W{i + 1}", w))
            if i < len(self.biases):
                out.append((f"b{i + 1}", self.biases[i]))
        out.append(("b_param", self.b_param))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def config(self) -> dict:
        return {"dims": list(self.dims)}

    def forward(self, inputs):
        return ff_forward(self, inputs)

    __call__ = forward


def ff_forward(est: FfEstimator, inputs) -> Tensor:
    """``inputs``: a Waveform, a normalized (N, 2) array or a batch (B, N, 2)."""
    if isinstance(inputs, Waveform):
        inputs = normalize_input(inputs)
    x = np.asarray(inputs, dtype=np.float64)
    flat = x.reshape(x.shape[:-2] + (-1,)) if x.ndim >= 2 else x
    if flat.shape[-1] != est.dims[0]:
        raise ValueError(f"FF estimator expects {est.dims[0]} inputs, got {flat.shape[-1]}")
    h = Tensor(flat)
    for w, b in zip(est.weights[:-1], est.biases):
        h = ad.tanh(ad.add(ad.matmul(h, w), b))
    out = ad.add(ad.matmul(h, est.weights[-1]), est.b_param)
    return ad.exp(out)


# -- construction and persistence ------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_snn(seed: int = 0, H: int = 128, beta: float = 0.9, beta_out: float = 0.95,
             u_thr: float = 1.0, alpha: float = 25.0, n_inputs: int = 2) -> SnnEstimator:
    rng = np.random.default_rng(seed)
    dims = [n_inputs, H, H, H]
    layers = [LifLayer(_uniform(rng, dims[i], (dims[i], dims[i + 1])), beta, u_thr)
              for i in range(3)]
    readout = LiReadout(_uniform(rng, H, (H, 3)),
                        Tensor(B_PARAM_INIT, requires_grad=True), beta_out)
    return SnnEstimator(layers, readout, SurrogateConfig(alpha))


def init_ff(seed: int = 0, dims=(200, 128, 128, 128, 3)) -> FfEstimator:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        weights.append(_uniform(rng, dims[i], (dims[i], dims[i + 1])))
        if i < len(dims) - 2:
            biases.append(_uniform(rng, dims[i], (dims[i + 1],)))
    return FfEstimator(weights, biases, Tensor(B_PARAM_INIT, requires_grad=True))


def init_weights(seed: int = 0, kind: str = "snn", **kw):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; b_param at the prior."""
    if kind == "snn":
        return init_snn(seed, **kw)
    if kind == "ff":
        return init_ff(seed, **kw)
    raise ValueError(f"unknown estimator kind {kind!r}")


def state_dict(est) -> dict:
    return {name: t.values.copy() for name, t in est.named_parameters()}


def load_state_dict(est, state: dict) -> None:
    for name, t in est.named_parameters():
        v = np.asarray(state[name], dtype=np.float64)
        if v.shape != t.shape:
            raise ValueError(f"{name}: shape {v.shape} does not match {t.shape}")
        t.values = v.copy()


def clone(est):
    new = from_config(est.kind, est.config())
    load_state_dict(new, state_dict(est))
    return new


def from_config(kind: str, config: dict):
    if kind == "snn":
        return init_snn(0, H=config["H"], beta=config["beta"], beta_out=config["beta_out"],
                        u_thr=config["u_thr"], alpha=config["alpha"])
    if kind == "ff":
        return init_ff(0, dims=tuple(config["dims"]))
    if kind == "direct":
        return DirectEstimator()
    raise ValueError(f"unknown estimator kind {kind!r}")


def save_checkpoint(est, path, extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with repr so they reload exactly."""
    doc = {
        "format": "spikeid-checkpoint/1",
        "kind": est.kind,
        "config": est.config(),
        "tensors": {name: {"shape": list(t.shape), "values": t.values.ravel().tolist()}
                    for name, t in est.named_parameters()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns ``(estimator, extra)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "spikeid-checkpoint/1":
        raise ValueError(f"{path}: not a spikeid checkpoint")
    est = from_config(doc["kind"], doc["config"])
    state = {name: np.array(t["values"], dtype=np.float64).reshape(t["shape"])
             for name, t in doc["tensors"].items()}
    load_state_dict(est, state)
    return est, doc.get("extra", {})


def estimate(est, w: Waveform, init_state: SnnState | None = None):
    """Inference helper: (L, C, Rs) floats, spike record (SNN) and final state."""
    x = normalize_input(w)
    if est.kind == "snn":
        p, rec, st = snn_forward(est, x, init_state)
        return tuple(float(v) for v in p.values), rec, st
    return tuple(float(v) for v in ff_forward(est, x).values), None, None


class DirectEstimator:
    """No network: the trainable leaf is (log L, log C, log Rs) itself.

    Used to check the solver + loss path in isolation.
    """

    kind = "direct"

    def __init__(self, log_params=B_PARAM_INIT):
        self.log_params = Tensor(log_params, requires_grad=True)

    def named_parameters(self):
        return [("b_param", self.log_params)]

    def parameters(self):
        return [self.log_params]

    def config(self) -> dict:
        return {}

    def forward(self, inputs):
        x = np.asarray(inputs)
        out = ad.exp(self.log_params)
        if x.ndim == 3:
            out = ad.add(out, Tensor(np.zeros((x.shape[0], 3))))
        return out

    __call__ = forward
