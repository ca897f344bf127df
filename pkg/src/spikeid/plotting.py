"""Figures rendered from the CSV outputs by ``spikeid report``.

Every function takes already-loaded arrays and a target path; styling is
deliberately plain.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PARAM_UNITS = {"L": (1e6, "uH"), "C": (1e6, "uF"), "Rs": (1.0, "ohm")}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_waveforms(t, clean, noisy, path, fits=None):
    """Clean vs noisy records, optionally overlaid with reconstructions."""
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for ax, ch, label in zip(axes, ("iL", "Vo"), ("iL [A]", "Vo [V]")):
        ax.plot(t * 1e3, noisy[ch], lw=0.6, color="0.6", label="noisy")
        ax.plot(t * 1e3, clean[ch], lw=1.2, color="k", label="clean")
        for name, (tf, fit) in (fits or {}).items():
            ax.plot(tf * 1e3, fit[ch], lw=1.0, ls="--", label=name)
        ax.set_ylabel(label)
        ax.legend(loc="lower right", fontsize=8)
    axes[-1].set_xlabel("time [ms]")
    _save(fig, path)


def plot_convergence(histories: dict, truth: dict, path):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, name in zip(axes, ("L", "C", "Rs")):
        scale, unit = PARAM_UNITS[name]
        for label, h in histories.items():
            ax.plot(h["epoch"], h[name] * scale, lw=0.8, label=label)
        ax.axhline(truth[name] * scale, color="k", ls=":", lw=1)
        ax.set_title(f"{name} [{unit}]")
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=8)
    _save(fig, path)


def plot_loss(histories: dict, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, h in histories.items():
        ax.semilogy(h["epoch"], h["loss"], lw=0.8, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("reconstruction loss")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_raster(layers, neurons, steps, path, n_show=64, n_layers=3):
    fig, axes = plt.subplots(n_layers, 1, figsize=(7, 6), sharex=True)
    for li, ax in enumerate(np.atleast_1d(axes), start=1):
        sel = (layers == li) & (neurons < n_show)
        ax.scatter(steps[sel], neurons[sel], s=2, color="k", marker="|")
        ax.set_ylim(-1, n_show)
        ax.set_ylabel(f"layer {li}")
    np.atleast_1d(axes)[-1].set_xlabel("timestep")
    _save(fig, path)


def plot_rate_series(steps, series: dict, path):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for label, r in series.items():
        ax.plot(steps, np.asarray(r) * 100, lw=1, label=label)
    ax.set_xlabel("timestep")
    ax.set_ylabel("spike rate [%]")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_tracking(log: dict, path):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    x = log["cycle"]
    for ax, name in zip(axes, ("L", "C", "Rs")):
        scale, unit = PARAM_UNITS[name]
        ax.plot(x, log[f"true_{name}"] * scale, color="k", lw=1.5, label="true")
        ax.plot(x, log[f"snn_{name}"] * scale, "o-", ms=2, lw=0.8, label="SNN")
        ax.plot(x, log[f"ff_{name}"] * scale, "s-", ms=2, lw=0.8, label="FF")
        ax.set_title(f"{name} [{unit}]")
        ax.set_xlabel("snapshot")
    axes[0].legend(fontsize=8)
    _save(fig, path)


def plot_scenarios(logs: dict, path, fault_cycle=None):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for label, log in logs.items():
        ax.plot(log["cycle"], log["spike_rate"] * 100, "o-", ms=2, lw=1, label=label)
    if fault_cycle is not None:
        ax.axvline(fault_cycle, color="r", ls=":", lw=1)
    ax.set_xlabel("monitoring cycle")
    ax.set_ylabel("spike rate [%]")
    ax.legend(fontsize=8)
    _save(fig, path)
