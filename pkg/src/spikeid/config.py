"""Single table of experiment settings shared by the CLI, manifests and tests.

Config files are ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

from pathlib import Path

from .converter import ConverterParams, EmiConfig
from .monitoring import DegradationSchedule, Scenario
from .training import ParamRanges, TrainConfig

# key: (default, help)
DEFAULTS: dict[str, tuple] = {
    "seed": (0, "master seed (weights init and EMI noise)"),
    # converter
    "Vg": (20.0, "input voltage [V]"),
    "d": (0.5, "duty ratio"),
    "R": (10.0, "load resistance [ohm]"),
    "fs": (10e3, "switching frequency [Hz]"),
    "L_true": (138e-6, "benchmark inductance [H]"),
    "C_true": (10e-6, "benchmark capacitance [F]"),
    "Rs_true": (0.1, "benchmark series resistance [ohm]"),
    "sim_dt": (0.5e-6, "ground-truth integration step [s]"),
    "sim_span": (1.5e-3, "simulated record length [s]"),
    # EMI
    "emi_sigma": (0.02, "background noise sigma, fraction of channel std"),
    "emi_pulse_width": (4e-6, "edge pulse envelope width [s] (sigma = width/2)"),
    "emi_pulse_amp": (0.25, "edge pulse peak, fraction of channel std"),
    # estimators
    "stride": (30, "subsampling stride for the estimator input"),
    "H": (128, "hidden width of the SNN"),
    "beta": (0.9, "LIF membrane decay"),
    "beta_out": (0.95, "leaky-integrator readout decay"),
    "u_thr": (1.0, "LIF firing threshold"),
    "alpha": (25.0, "fast-sigmoid surrogate slope"),
    # single-condition training
    "epochs": (3000, "training epochs (single condition)"),
    "lr": (5e-5, "Adam learning rate (single condition)"),
    "lr_bias_mult": (3.0, "learning-rate multiplier for b_param"),
    "clip_norm": (0.3, "global gradient-norm clip for the SNN (FF is not clipped)"),
    "solver_dt": (5e-6, "RK4 step for the predicted waveform [s]"),
    "stop_after": (0, "stop after this many epochs of the schedule (0 = run all)"),
    # multi-condition training
    "multi_epochs": (6000, "training epochs (multi condition)"),
    "multi_lr": (1e-4, "Adam learning rate (multi condition)"),
    "n_waveforms": (200, "multi-condition dataset size"),
    "batch_size": (1, "multi-condition minibatch size, fixed order (0 = whole dataset)"),
    "L_min": (80e-6, "multi-condition L lower bound [H]"),
    "L_max": (200e-6, "multi-condition L upper bound [H]"),
    "C_min": (5e-6, "multi-condition C lower bound [F]"),
    "C_max": (15e-6, "multi-condition C upper bound [F]"),
    "Rs_min": (0.02, "multi-condition Rs lower bound [ohm]"),
    "Rs_max": (0.5, "multi-condition Rs upper bound [ohm]"),
    # monitoring
    "snapshots": (50, "degradation snapshots"),
    "L_end": (120e-6, "inductance at the last degradation snapshot [H]"),
    "C_end": (7e-6, "capacitance at the last degradation snapshot [F]"),
    "Rs_end": (0.3, "series resistance at the last snapshot / after a fault [ohm]"),
    "cycles": (40, "event-driven monitoring cycles"),
    "fault_cycle": (21, "cycle at which the abrupt fault appears"),
    "threshold_pp": (2.0, "spike-rate jump (percentage points) flagged as a fault"),
    # efficiency
    "mac_energy": (15e-9, "energy per MAC [J]"),
    "sop_energy": (9.9e-12, "energy per SOP [J]"),
    "snapshot_rate": (1.0, "monitoring snapshots per second for always-on power"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw):
    default = DEFAULTS[key][0]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve(overrides: dict | None = None, path=None) -> dict:
    """Defaults <- config file <- explicit overrides; unknown keys are an error."""
    raw = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text()))
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    cfg = {k: v[0] for k, v in DEFAULTS.items()}
    for k, v in raw.items():
        cfg[k] = _coerce(k, v)
    return cfg


def converter_params(cfg: dict) -> ConverterParams:
    return ConverterParams(cfg["L_true"], cfg["C_true"], cfg["Rs_true"], cfg["Vg"], cfg["d"],
                           cfg["R"], cfg["fs"])


def emi_config(cfg: dict, seed: int | None = None) -> EmiConfig:
    return EmiConfig(cfg["emi_sigma"], cfg["emi_pulse_width"], cfg["emi_pulse_amp"],
                     cfg["seed"] if seed is None else seed)


def train_config(cfg: dict, kind: str, protocol: str = "single") -> TrainConfig:
    multi = protocol == "multi"
    return TrainConfig(
        epochs=cfg["multi_epochs"] if multi else cfg["epochs"],
        lr=cfg["multi_lr"] if multi else cfg["lr"],
        lr_bias_mult=cfg["lr_bias_mult"],
        clip_norm=cfg["clip_norm"] if kind == "snn" else None,
        seed=cfg["seed"],
        solver_dt=cfg["solver_dt"],
        sim_span=cfg["sim_span"],
        input_stride=cfg["stride"],
        batch_size=cfg["batch_size"] or None,
    )


def param_ranges(cfg: dict) -> ParamRanges:
    return ParamRanges((cfg["L_min"], cfg["L_max"]), (cfg["C_min"], cfg["C_max"]),
                       (cfg["Rs_min"], cfg["Rs_max"]))


def schedule(cfg: dict) -> DegradationSchedule:
    return DegradationSchedule(cfg["snapshots"], (cfg["L_true"], cfg["L_end"]),
                               (cfg["C_true"], cfg["C_end"]), (cfg["Rs_true"], cfg["Rs_end"]))


def scenario(cfg: dict, kind: str) -> Scenario:
    return Scenario(kind, cfg["cycles"], cfg["fault_cycle"], cfg["Rs_true"], cfg["Rs_end"])


def snn_kwargs(cfg: dict) -> dict:
    return {"H": cfg["H"], "beta": cfg["beta"], "beta_out": cfg["beta_out"],
            "u_thr": cfg["u_thr"], "alpha": cfg["alpha"]}
