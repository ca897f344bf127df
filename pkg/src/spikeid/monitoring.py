"""Degradation tracking and event-driven fault monitoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .converter import ConverterParams, EmiConfig, add_emi, simulate, subsample
from .estimators import SnnState, estimate
from .training import emi_seeds

LOG_COLUMNS = ("cycle", "true_L", "true_C", "true_Rs", "snn_L", "snn_C", "snn_Rs",
               "ff_L", "ff_C", "ff_Rs", "spike_rate", "persistent")


@dataclass(frozen=True)
class DegradationSchedule:
    n_snapshots: int = 50
    L: tuple = (138e-6, 120e-6)
    C: tuple = (10e-6, 7e-6)
    Rs: tuple = (0.1, 0.3)

    def __post_init__(self):
        if self.n_snapshots < 2:
            raise ValueError("need at least two snapshots")
        if min(self.L + self.C + self.Rs) <= 0:
            raise ValueError("schedule values must be positive")

    def params_at(self, i: int, base: ConverterParams = ConverterParams()) -> ConverterParams:
        """Parameters at snapshot ``i`` (1-based), linearly interpolated."""
        if not 1 <= i <= self.n_snapshots:
            raise ValueError(f"snapshot index {i} outside 1..{self.n_snapshots}")
        f = (i - 1) / (self.n_snapshots - 1)
        lerp = lambda ab: ab[0] + f * (ab[1] - ab[0])  # noqa: E731
        return base.with_unknowns(lerp(self.L), lerp(self.C), lerp(self.Rs))


@dataclass(frozen=True)
class Scenario:
    kind: str = "healthy"
    cycles: int = 40
    fault_cycle: int = 21
    rs_healthy: float = 0.1
    rs_fault: float = 0.3

    def __post_init__(self):
        if self.kind not in ("healthy", "abrupt", "gradual"):
            raise ValueError(f"unknown scenario {self.kind!r}")
        if self.cycles < 2:
            raise ValueError("need at least two cycles")
        if self.kind == "abrupt" and not 1 <= self.fault_cycle <= self.cycles:
            raise ValueError("fault_cycle must lie in [1, cycles]")

    def rs_at(self, cycle: int) -> float:
        if self.kind == "healthy":
            return self.rs_healthy
        if self.kind == "abrupt":
            return self.rs_fault if cycle >= self.fault_cycle else self.rs_healthy
        f = (cycle - 1) / max(self.cycles - 1, 1)
        return self.rs_healthy + f * (self.rs_fault - self.rs_healthy)


@dataclass
class MonitorLog:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["cycle"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:-1]]
                           + [int(bool(r["persistent"]))])

    @classmethod
    def from_csv(cls, path) -> "MonitorLog":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                row = {c: float(rec[c]) for c in LOG_COLUMNS[1:-1]}
                row["cycle"] = int(rec["cycle"])
                row["persistent"] = bool(int(rec["persistent"]))
                rows.append(row)
        return cls(rows)


def _snapshot(p: ConverterParams, seed: int, emi: EmiConfig, stride: int):
    clean = simulate(p)
    noisy = add_emi(clean, EmiConfig(emi.background_sigma_frac, emi.pulse_width,
                                     emi.pulse_amp_frac, seed), p)
    return subsample(noisy, stride)


def _row(cycle, p, snn_est, ff_est, rate, persistent):
    return {"cycle": cycle, "true_L": p.L, "true_C": p.C, "true_Rs": p.Rs,
            "snn_L": snn_est[0], "snn_C": snn_est[1], "snn_Rs": snn_est[2],
            "ff_L": ff_est[0], "ff_C": ff_est[1], "ff_Rs": ff_est[2],
            "spike_rate": rate, "persistent": persistent}


def run_degradation(snn, ff, sched: DegradationSchedule = DegradationSchedule(), seed: int = 0,
                    base: ConverterParams = ConverterParams(), emi: EmiConfig = EmiConfig(),
                    stride: int = 30):
    """Fresh-state inference on one independent noisy record per snapshot.

    Returns ``(log, summary)``; summary maps model -> parameter -> mean
    relative error.
    """
    log = MonitorLog()
    seeds = emi_seeds(seed, sched.n_snapshots)
    for i in range(1, sched.n_snapshots + 1):
        p = sched.params_at(i, base)
        w = _snapshot(p, seeds[i - 1], emi, stride)
        s_est, rec, _ = estimate(snn, w)
        f_est, _, _ = estimate(ff, w)
        log.rows.append(_row(i, p, s_est, f_est, rec.total_rate(), False))
    return log, degradation_summary(log)


def degradation_summary(log: MonitorLog) -> dict:
    out = {}
    for model in ("snn", "ff"):
        out[model] = {name: float(np.mean(np.abs(log.column(f"{model}_{name}")
                                                 - log.column(f"true_{name}"))
                                          / log.column(f"true_{name}")))
                      for name in ("L", "C", "Rs")}
    return out


def run_event_driven(snn, ff, sc: Scenario, seed: int = 0, persistent: bool = True,
                     base: ConverterParams = ConverterParams(), emi: EmiConfig = EmiConfig(),
                     stride: int = 30) -> MonitorLog:
    """Monitor ``sc.cycles`` snapshots; the SNN optionally carries its state."""
    log = MonitorLog()
    seeds = emi_seeds(seed, sc.cycles)
    state: SnnState | None = None
    for c in range(1, sc.cycles + 1):
        p = base.with_unknowns(base.L, base.C, sc.rs_at(c))
        w = _snapshot(p, seeds[c - 1], emi, stride)
        s_est, rec, final = estimate(snn, w, state if persistent else None)
        if persistent:
            state = final
        f_est, _, _ = estimate(ff, w)
        log.rows.append(_row(c, p, s_est, f_est, rec.total_rate(), persistent))
    return log


def rs_mae(log: MonitorLog, window: tuple, which: str = "snn") -> float:
    """Mean |Rs estimate - true Rs| over cycles ``window[0]..window[1]`` inclusive."""
    lo, hi = window
    rows = [r for r in log.rows if lo <= r["cycle"] <= hi]
    if not rows:
        raise ValueError(f"no cycles in window {window}")
    return float(np.mean([abs(r[f"{which}_Rs"] - r["true_Rs"]) for r in rows]))


def detect_fault(rates, threshold_pp: float = 2.0) -> int | None:
    """First cycle (1-based) whose rate rose >= ``threshold_pp`` points over the previous one."""
    r = np.asarray(rates, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two cycles")
    jumps = np.nonzero(np.diff(r) >= threshold_pp / 100.0 - 1e-12)[0]
    return int(jumps[0]) + 2 if jumps.size else None


def window_rate(log: MonitorLog, window: tuple) -> float:
    lo, hi = window
    return float(np.mean([r["spike_rate"] for r in log.rows if lo <= r["cycle"] <= hi]))
