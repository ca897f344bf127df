"""Spike sparsity, operation counts and energy-per-inference estimates."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimators import SpikeRecord


@dataclass(frozen=True)
class EnergyCatalog:
    """Published per-operation energies (J/op)."""

    mac_energy: float = 15e-9     # Cortex-M class MCU with CMSIS-NN kernels
    sop_energy: float = 9.9e-12   # 40-nm neuromorphic processor

    def __post_init__(self):
        if not (self.mac_energy > 0 and self.sop_energy > 0):
            raise ValueError("per-op energies must be positive")


def _check(rec: SpikeRecord):
    if rec.n_steps == 0 or rec.n_layers == 0:
        raise ValueError("empty spike record")


def sparsity(rec: SpikeRecord) -> float:
    """Fraction of possible hidden-layer spike events that did not occur."""
    _check(rec)
    return 1.0 - rec.counts.sum() / (rec.n_steps * sum(rec.sizes))


def count_macs(layer_dims) -> int:
    """Dense multiply-accumulates for one pass; bias adds not counted."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("need at least two layer sizes")
    return sum(a * b for a, b in zip(dims[:-1], dims[1:]))


def count_sops(rec: SpikeRecord, fanouts) -> int:
    """Synaptic operations: each presynaptic spike costs one add per target."""
    _check(rec)
    fanouts = [int(f) for f in fanouts]
    if len(fanouts) != rec.n_layers:
        raise ValueError(f"got {len(fanouts)} fan-outs for {rec.n_layers} spiking layers")
    per_layer = rec.counts.sum(axis=1)
    return int(np.dot(per_layer, fanouts))


def snn_fanouts(est) -> tuple:
    """Targets of each hidden layer: the next LIF layer, then the readout."""
    return est.layer_sizes[1:] + (est.readout.W_out.shape[1],)


def input_projection_ops(est, n_steps: int) -> int:
    """Dense analog ops of the 2->H input projection (not SOPs)."""
    fan_in, h = est.input_proj.shape
    return int(fan_in * h * n_steps)


def rate_profiles(rec: SpikeRecord):
    """Per-layer mean firing rate and per-timestep rate series (n_layers, N_s)."""
    _check(rec)
    sizes = np.array(rec.sizes, dtype=np.float64)
    series = rec.counts / sizes[:, None]
    return series.mean(axis=1), series


@dataclass
class EnergyReport:
    macs: int
    sops: int
    ff_energy: float
    snn_energy: float
    ratio: float | None
    ff_power: float
    snn_power: float
    snapshot_rate: float


def energy_report(macs: int, sops: int, cat: EnergyCatalog = EnergyCatalog(),
                  snapshot_rate: float = 1.0) -> EnergyReport:
    """Estimated energy per inference and always-on power at ``snapshot_rate`` Hz."""
    ff = macs * cat.mac_energy
    snn = sops * cat.sop_energy
    ratio = ff / snn if sops > 0 else None
    return EnergyReport(int(macs), int(sops), ff, snn, ratio, ff * snapshot_rate,
                        snn * snapshot_rate, snapshot_rate)


def efficiency_rows(rec: SpikeRecord, est, ff_dims=(200, 128, 128, 128, 3),
                    cat: EnergyCatalog = EnergyCatalog(), snapshot_rate: float = 1.0):
    """Rows for the efficiency CSV: (metric, value, unit, source)."""
    means, _ = rate_profiles(rec)
    macs = count_macs(ff_dims)
    sops = count_sops(rec, snn_fanouts(est))
    proj = input_projection_ops(est, rec.n_steps)
    rep = energy_report(macs, sops, cat, snapshot_rate)
    rep_incl = energy_report(macs, sops + proj, cat, snapshot_rate)
    rows = [("sparsity", sparsity(rec), "fraction", "measured")]
    rows += [(f"rate_layer{i + 1}", float(r), "fraction", "measured") for i, r in enumerate(means)]
    rows += [
        ("macs", macs, "MAC", "counted"),
        ("sops", sops, "SOP", "measured"),
        ("input_projection_ops", proj, "op", "counted"),
        ("sops_incl_input", sops + proj, "op", "measured"),
        ("ff_energy_uJ", rep.ff_energy * 1e6, "uJ", "estimated"),
        ("snn_energy_uJ", rep.snn_energy * 1e6, "uJ", "estimated"),
        ("snn_energy_incl_input_uJ", rep_incl.snn_energy * 1e6, "uJ", "estimated"),
        ("ratio", "" if rep.ratio is None else rep.ratio, "x", "estimated"),
        ("always_on_uW", rep.snn_power * 1e6, "uW", "estimated"),
        ("ff_always_on_uW", rep.ff_power * 1e6, "uW", "estimated"),
    ]
    return rows


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_efficiency_csv(path, rows) -> None:
    write_rows(path, ("metric", "value", "unit", "source"), rows)


def write_raster_csv(path, rec: SpikeRecord) -> None:
    """One row per spike event: layer (1-based), neuron, timestep."""
    if rec.rasters is None:
        raise ValueError("record has no rasters (batched forward?)")
    rows = []
    for li, r in enumerate(rec.rasters):
        ts, ns = np.nonzero(r)
        order = np.lexsort((ts, ns))
        rows += [(li + 1, int(ns[j]), int(ts[j])) for j in order]
    write_rows(path, ("layer", "neuron", "timestep"), rows)


def write_rate_series_csv(path, rec: SpikeRecord) -> None:
    _, series = rate_profiles(rec)
    header = ("timestep",) + tuple(f"layer{i + 1}" for i in range(rec.n_layers))
    rows = [(k,) + tuple(float(v) for v in series[:, k]) for k in range(rec.n_steps)]
    write_rows(path, header, rows)
