"""Averaged buck-converter model, differentiable RK4 and EMI synthesis."""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor


@dataclass(frozen=True)
class ConverterParams:
    """Buck converter constants. Defaults are the benchmark operating point."""

    L: float = 138e-6
    C: float = 10e-6
    Rs: float = 0.1
    Vg: float = 20.0
    d: float = 0.5
    R: float = 10.0
    fs: float = 10e3

    def __post_init__(self):
        if not (self.L > 0 and self.C > 0 and self.R > 0 and self.fs > 0):
            raise ValueError("L, C, R and fs must be positive")
        if not self.Rs >= 0:
            raise ValueError("Rs must be non-negative")
        if not 0 < self.d < 1:
            raise ValueError("duty ratio must lie in (0, 1)")
        if not self.Vg > 0:
            raise ValueError("Vg must be positive")

    def with_unknowns(self, L: float, C: float, Rs: float) -> "ConverterParams":
        return replace(self, L=float(L), C=float(C), Rs=float(Rs))

    @property
    def unknowns(self) -> tuple[float, float, float]:
        return self.L, self.C, self.Rs

    def steady_state(self) -> tuple[float, float]:
        """Equilibrium (iL, Vo) of the averaged model."""
        vo = self.d * self.Vg / (1.0 + self.Rs / self.R)
        return vo / self.R, vo


@dataclass
class Waveform:
    """Uniformly sampled (iL, Vo) record; sample i sits at t0 + i*dt."""

    dt: float
    t0: float
    iL: np.ndarray
    Vo: np.ndarray

    def __post_init__(self):
        self.iL = np.asarray(self.iL, dtype=np.float64)
        self.Vo = np.asarray(self.Vo, dtype=np.float64)
        if self.iL.ndim != 1 or self.iL.shape != self.Vo.shape or self.iL.size == 0:
            raise ValueError("iL and Vo must be non-empty 1-D arrays of equal length")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (np.all(np.isfinite(self.iL)) and np.all(np.isfinite(self.Vo))):
            raise ValueError("waveform samples must be finite")

    def __len__(self):
        return self.iL.size

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def channels(self) -> np.ndarray:
        """(n, 2) array of [iL, Vo] rows."""
        return np.stack([self.iL, self.Vo], axis=1)

    def copy(self) -> "Waveform":
        return Waveform(self.dt, self.t0, self.iL.copy(), self.Vo.copy())


@dataclass(frozen=True)
class EmiConfig:
    background_sigma_frac: float = 0.02
    pulse_width: float = 4e-6
    pulse_amp_frac: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.background_sigma_frac < 0 or self.pulse_amp_frac < 0:
            raise ValueError("EMI fractions must be >= 0")
        if not self.pulse_width > 0:
            raise ValueError("pulse_width must be positive")


# -- model ------------------------------------------------------------------


def buck_rhs(state, p: ConverterParams) -> tuple[float, float]:
    iL, vo = state
    return (p.d * p.Vg - vo - p.Rs * iL) / p.L, (iL - vo / p.R) / p.C


def _rk4_forward(A, b, x0, h, n):
    """Classic RK4 on x' = A x + b; returns states and stage inputs.

    The 2x2 products are written out per component.  Unbatched problems run
    on Python floats since 0-d numpy arithmetic is mostly call overhead.
    """
    scalar = b.ndim == 1
    conv = float if scalar else (lambda v: v)
    a, bb, c, dd = (conv(A[..., i, j]) for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)))
    b0, b1 = conv(b[..., 0]), conv(b[..., 1])
    p, q = conv(x0[..., 0]), conv(x0[..., 1])
    xs = [(p, q)]
    ys = []
    h2, h6 = 0.5 * h, h / 6.0
    for _ in range(n):
        k1p = a * p + bb * q + b0
        k1q = c * p + dd * q + b1
        y2p, y2q = p + h2 * k1p, q + h2 * k1q
        k2p = a * y2p + bb * y2q + b0
        k2q = c * y2p + dd * y2q + b1
        y3p, y3q = p + h2 * k2p, q + h2 * k2q
        k3p = a * y3p + bb * y3q + b0
        k3q = c * y3p + dd * y3q + b1
        y4p, y4q = p + h * k3p, q + h * k3q
        k4p = a * y4p + bb * y4q + b0
        k4q = c * y4p + dd * y4q + b1
        p = p + h6 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        q = q + h6 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        xs.append((p, q))
        ys.append((y2p, y2q, y3p, y3q, y4p, y4q))
    return np.array(xs), np.array(ys)


def _rk4_adjoint(A, xs, ys, G, h):
    """Exact reverse pass of ``_rk4_forward``.

    ``xs`` is (n+1, 2, ...), ``ys`` (n, 6, ...) and ``G[k]`` (2, ...) is
    dL/dx after step k+1.  Returns dL/dA, dL/db and dL/dx0.
    """
    scalar = A.ndim == 2
    if scalar:
        a, bb, c, dd = float(A[0, 0]), float(A[0, 1]), float(A[1, 0]), float(A[1, 1])
        xs, ys, G = xs.tolist(), ys.tolist(), G.tolist()
        zero = 0.0
    else:
        a, bb, c, dd = A[..., 0, 0], A[..., 0, 1], A[..., 1, 0], A[..., 1, 1]
        zero = np.zeros(a.shape)
    g00 = g01 = g10 = g11 = gb0 = gb1 = lp = lq = zero
    h2, h3, h6 = 0.5 * h, h / 3.0, h / 6.0
    for k in range(len(G) - 1, -1, -1):
        lp = lp + G[k][0]
        lq = lq + G[k][1]
        y2p, y2q, y3p, y3q, y4p, y4q = ys[k]
        # stage 4: k4 = A y4 + b, y4 = x + h k3
        dp, dq = h6 * lp, h6 * lq
        g00 = g00 + dp * y4p; g01 = g01 + dp * y4q
        g10 = g10 + dq * y4p; g11 = g11 + dq * y4q
        gb0 = gb0 + dp; gb1 = gb1 + dq
        yp, yq = a * dp + c * dq, bb * dp + dd * dq
        dxp, dxq = lp + yp, lq + yq
        # stage 3: k3 = A y3 + b, y3 = x + h/2 k2
        dp, dq = h3 * lp + h * yp, h3 * lq + h * yq
        g00 = g00 + dp * y3p; g01 = g01 + dp * y3q
        g10 = g10 + dq * y3p; g11 = g11 + dq * y3q
        gb0 = gb0 + dp; gb1 = gb1 + dq
        yp, yq = a * dp + c * dq, bb * dp + dd * dq
        dxp, dxq = dxp + yp, dxq + yq
        # stage 2: k2 = A y2 + b, y2 = x + h/2 k1
        dp, dq = h3 * lp + h2 * yp, h3 * lq + h2 * yq
        g00 = g00 + dp * y2p; g01 = g01 + dp * y2q
        g10 = g10 + dq * y2p; g11 = g11 + dq * y2q
        gb0 = gb0 + dp; gb1 = gb1 + dq
        yp, yq = a * dp + c * dq, bb * dp + dd * dq
        dxp, dxq = dxp + yp, dxq + yq
        # stage 1: k1 = A x + b
        dp, dq = h6 * lp + h2 * yp, h6 * lq + h2 * yq
        xp, xq = xs[k]
        g00 = g00 + dp * xp; g01 = g01 + dp * xq
        g10 = g10 + dq * xp; g11 = g11 + dq * xq
        gb0 = gb0 + dp; gb1 = gb1 + dq
        lp = dxp + a * dp + c * dq
        lq = dxq + bb * dp + dd * dq
    dA = np.stack([np.stack([g00, g01], axis=-1), np.stack([g10, g11], axis=-1)], axis=-2)
    return dA, np.stack([gb0, gb1], axis=-1), np.stack([lp, lq], axis=-1)


def linear_rk4(A: Tensor, b: Tensor, x0, h: float, n: int) -> Tensor:
    """Fixed-step RK4 of x' = A x + b as one tape node.

    ``A`` is (..., 2, 2) and ``b`` is (..., 2); the result is (..., n, 2)
    holding the states after steps 1..n.  The backward rule is the exact
    transpose of the discrete stages, so gradients match the solver's own
    output rather than the continuous ODE.
    """
    A, b = ad.as_tensor(A), ad.as_tensor(b)
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), b.shape).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        xs, ys = _rk4_forward(A.values, b.values, x0, float(h), int(n))
    finite = np.isfinite(xs).reshape(n + 1, -1).all(axis=1)
    if not finite.all():
        step = int(np.argmin(finite))
        raise NonFiniteError("rk4_integrate", f"state became non-finite at step {step}")
    # (n+1, 2, ...) -> (..., n, 2)
    traj = np.moveaxis(np.moveaxis(xs[1:], 0, -1), 0, -1)

    def bw(g):
        G = np.moveaxis(np.moveaxis(g, -1, 0), -1, 0)
        dA, db, _ = _rk4_adjoint(A.values, xs, ys, G, float(h))
        return dA, db

    return ad.custom_op("rk4_integrate", (A, b), traj, bw)


def _n_steps(t_span, dt):
    span = t_span[1] - t_span[0]
    n = int(np.floor(span / dt + 1e-9))
    if n < 1:
        raise ValueError("t_span shorter than one step")
    if abs(span - n * dt) > 1e-6 * dt and abs(span - (n + 1) * dt) > 1e-6 * dt:
        raise ValueError("dt must divide the integration span")
    return n


def rk4_integrate(L, C, Rs, known: ConverterParams, t_span=(0.0, 1.5e-3), dt=5e-6,
                  init=(0.0, 0.0)) -> tuple[Tensor, Tensor]:
    """Integrate the averaged buck model for the unknowns (L, C, Rs).

    The unknowns may be floats or Tensors (scalar or batched 1-D); Vg, d
    and R come from ``known``.  Returns (iL, Vo) sampled at
    t0 + dt*k for k = 1..n, shaped (..., n).
    """
    L, C, Rs = ad.as_tensor(L), ad.as_tensor(C), ad.as_tensor(Rs)
    n = _n_steps(t_span, dt)
    inv_L = 1.0 / L
    inv_C = 1.0 / C
    zero = Tensor(np.zeros(np.broadcast_shapes(L.shape, C.shape, Rs.shape)))
    a11 = zero - Rs * inv_L
    a12 = zero - inv_L
    a21 = zero + inv_C
    a22 = zero - inv_C * (1.0 / known.R)
    A = ad.stack([ad.stack([a11, a12], axis=-1), ad.stack([a21, a22], axis=-1)], axis=-2)
    b = ad.stack([inv_L * (known.d * known.Vg) + zero, zero], axis=-1)
    traj = linear_rk4(A, b, init, dt, n)
    return traj[..., 0], traj[..., 1]


def simulate(p: ConverterParams, t_span=(0.0, 1.5e-3), dt=0.5e-6, init=(0.0, 0.0)) -> Waveform:
    """Ground-truth waveform: ``n`` samples at t0+dt..t1 (zero IC implicit)."""
    iL, vo = rk4_integrate(p.L, p.C, p.Rs, p, t_span, dt, init)
    return Waveform(dt, t_span[0] + dt, iL.values, vo.values)


# -- measurement corruption -------------------------------------------------


def switching_edges(w: Waveform, p: ConverterParams) -> np.ndarray:
    """PWM turn-on and turn-off instants inside the record.

    Sample i covers the period ending at its timestamp, so the record spans
    [t[0] - dt, t[-1]).
    """
    start, stop = w.t0 - w.dt, w.t0 + w.dt * (len(w) - 1)
    Ts = 1.0 / p.fs
    k0 = int(np.floor(start / Ts)) - 1
    k1 = int(np.ceil(stop / Ts)) + 1
    ks = np.arange(k0, k1 + 1)
    edges = np.concatenate([ks * Ts, (ks + p.d) * Ts])
    tol = 1e-9 * Ts
    edges = edges[(edges >= start - tol) & (edges < stop - tol)]
    return np.sort(edges)


def add_emi(w: Waveform, cfg: EmiConfig, p: ConverterParams) -> Waveform:
    """Background Gaussian noise plus signed Gaussian pulses at PWM edges.

    Draw order from ``numpy.random.Generator(PCG64(seed))``: for iL then Vo,
    ``n`` standard normals followed by one sign draw per edge.
    """
    if w.dt * len(w) < 1.0 / p.fs * (1 - 1e-9):
        raise ValueError("waveform must cover at least one switching period")
    if cfg.background_sigma_frac == 0 and cfg.pulse_amp_frac == 0:
        return w.copy()
    rng = np.random.default_rng(cfg.seed)
    t = w.t
    edges = switching_edges(w, p)
    sigma_p = cfg.pulse_width / 2.0
    envelope = np.exp(-((t[None, :] - edges[:, None]) ** 2) / (2.0 * sigma_p ** 2))
    out = []
    for x in (w.iL, w.Vo):
        s = float(np.std(x))
        noise = rng.standard_normal(x.size) * (cfg.background_sigma_frac * s)
        signs = np.where(rng.random(edges.size) < 0.5, -1.0, 1.0)
        pulses = (signs * cfg.pulse_amp_frac * s) @ envelope
        out.append(x + noise + pulses)
    return Waveform(w.dt, w.t0, out[0], out[1])


def subsample(w: Waveform, stride: int) -> Waveform:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return Waveform(w.dt * stride, w.t0, w.iL[::stride], w.Vo[::stride])


def at_times(w: Waveform, times) -> Waveform:
    """Samples of ``w`` at exactly the given (uniform) times."""
    times = np.asarray(times, dtype=np.float64)
    pos = (times - w.t0) / w.dt
    idx = np.rint(pos).astype(int)
    if np.any(np.abs(pos - idx) > 1e-6) or idx.min() < 0 or idx.max() >= len(w):
        raise ValueError("requested times are not on the waveform grid")
    dt = times[1] - times[0] if times.size > 1 else w.dt
    return Waveform(dt, float(times[0]), w.iL[idx], w.Vo[idx])


# -- CSV --------------------------------------------------------------------


def write_waveform_csv(w: Waveform, path) -> None:
    data = np.column_stack([w.t, w.iL, w.Vo])
    buf = io.StringIO()
    buf.write("t,iL,Vo\n")
    np.savetxt(buf, data, fmt="%.17g", delimiter=",")
    Path(path).write_text(buf.getvalue())


def read_waveform_csv(path, dt: float | None = None) -> Waveform:
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    if [h.strip() for h in header.split(",")] != ["t", "iL", "Vo"]:
        raise ValueError(f"{path}: expected header 't,iL,Vo'")
    data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    t = data[:, 0]
    if dt is None:
        if t.size < 2:
            raise ValueError("dt cannot be inferred from a single row")
        dt = (t[-1] - t[0]) / (t.size - 1)
    return Waveform(float(dt), float(t[0]), data[:, 1], data[:, 2])
