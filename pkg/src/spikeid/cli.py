"""Command-line driver: ``spikeid <subcommand> [--key value ...]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .autodiff import NonFiniteError
from .converter import read_waveform_csv, rk4_integrate, subsample, write_waveform_csv
from .efficiency import (EnergyCatalog, efficiency_rows, write_efficiency_csv, write_raster_csv,
                         write_rate_series_csv, write_rows)
from .estimators import PARAM_NAMES, estimate, load_checkpoint, save_checkpoint
from .experiments import (benchmark_measurement, build_dataset, load_dataset, relative_errors,
                          save_dataset, train_benchmark, train_multi_condition)
from .monitoring import detect_fault, rs_mae, run_degradation, run_event_driven, window_rate

log = logging.getLogger("spikeid")
OUT_ENV = "SPIKEID_OUT"
UNITS = {"L": (1e6, "uH"), "C": (1e6, "uF"), "Rs": (1.0, "ohm")}


class CliError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _out_dir(args) -> Path:
    root = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), args.command)
    p = Path(root)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out: Path, command: str, cfg: dict, extra: dict) -> None:
    lines = [f"subcommand = {command}", f"version = {__version__}", f"output_dir = {out}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    lines += [f"{k} = {cfg[k]!r}" for k in C.DEFAULTS]
    (out / f"manifest_{command}.txt").write_text("\n".join(lines) + "\n")


def _write_history(path, history) -> None:
    rows = [(h["epoch"], h["loss"], h["L"], h["C"], h["Rs"], h["lr"]) for h in history]
    write_rows(path, ("epoch", "loss", "L", "C", "Rs", "lr"), rows)


def _append_history(path, history) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[k])) for k in ("loss", "L", "C", "Rs", "lr")])


def _read_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([_num(r[k]) for r in rows]) for k in rows[0]}


def _num(v):
    try:
        return float(v)
    except ValueError:
        return np.nan


def _table1(true, results: dict) -> str:
    head = f"{'':8s}{'True':>9s}" + "".join(f"{name + ' value':>16s}{'error':>9s}"
                                            for name in results)
    lines = [head]
    for i, name in enumerate(PARAM_NAMES):
        scale, unit = UNITS[name]
        line = f"{name + ' (' + unit + ')':8s}{true[i] * scale:9.4g}"
        for est_params in results.values():
            err = abs(est_params[i] - true[i]) / true[i] * 100
            line += f"{est_params[i] * scale:16.4g}{err:8.1f}%"
        lines.append(line)
    return "\n".join(lines)


def _table1_rows(true, results: dict):
    rows = []
    for model, est_params in results.items():
        errs = relative_errors(est_params, true)
        for i, name in enumerate(PARAM_NAMES):
            rows.append((model, name, true[i], est_params[i], errs[i] * 100))
    return rows


def _load_ckpt(path, cfg, want_kind=None, need_multi=False):
    if path is None:
        raise CliError(f"a {want_kind or ''} checkpoint is required".replace("  ", " "))
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    est, extra = load_checkpoint(path)
    if want_kind and est.kind != want_kind:
        raise CliError(f"{path}: expected a {want_kind} checkpoint, got {est.kind}")
    if est.kind == "snn":
        mismatch = {k: (v, cfg[k]) for k, v in est.config().items() if cfg[k] != v}
        if mismatch:
            raise CliError(f"{path}: checkpoint/config mismatch {mismatch}")
    if need_multi and extra.get("protocol") != "multi":
        raise CliError(f"{path} was not trained on the multi-condition protocol; "
                       f"run `spikeid train --protocol multi` first")
    return est


def _load_wave(args, cfg):
    if getattr(args, "waveform", None):
        return read_waveform_csv(args.waveform)
    return benchmark_measurement(cfg, cfg["seed"])[1]


# -- subcommands ------------------------------------------------------------


def cmd_simulate(args, cfg, out):
    clean, noisy = benchmark_measurement(cfg, cfg["seed"], noise=not args.no_noise)
    write_waveform_csv(clean, out / "clean.csv")
    write_waveform_csv(noisy, out / "noisy.csv")
    write_waveform_csv(subsample(noisy, cfg["stride"]), out / "subsampled.csv")
    print(f"wrote {len(clean)} samples to {out}")
    if args.dataset:
        ds = build_dataset(cfg, cfg["seed"], args.jobs)
        save_dataset(ds, out / "dataset")
        print(f"wrote {len(ds)}-waveform dataset to {out / 'dataset'}")


def cmd_train(args, cfg, out):
    tag = f"{args.mode}_{args.protocol}"
    resume = None
    if args.resume:
        resume = _read_state(args.resume)
    if args.protocol == "multi":
        if not args.dataset:
            raise CliError("--protocol multi needs --dataset DIR (see `spikeid simulate --dataset`)")
        try:
            dataset = load_dataset(args.dataset)
        except FileNotFoundError as exc:
            raise CliError(str(exc)) from None
        est, best, history, state = train_multi_condition(args.mode, cfg, dataset, resume=resume)
    else:
        est, best, history, state = train_benchmark(args.mode, cfg, resume=resume)
    hist_path = out / f"history_{tag}.csv"
    if resume is not None and hist_path.exists():
        _append_history(hist_path, history)
    else:
        _write_history(hist_path, history)
    _write_state(out / f"train_state_{tag}.json", state)
    if best is None:
        raise NonFiniteError("train", "no finite epoch")
    save_checkpoint(est, out / f"{tag}_best.json",
                    {"protocol": args.protocol, "epoch": best.epoch, "loss": best.loss,
                     "params": list(best.params), "seed": cfg["seed"]})
    if args.protocol == "single":
        true = C.converter_params(cfg).unknowns
        print(f"best checkpoint: epoch {best.epoch}, loss {best.loss:.6g}")
        print(_table1(true, {args.mode.upper() + "+ODE": best.params}))
        write_rows(out / f"summary_{tag}.csv", ("model", "param", "true", "value", "error_pct"),
                   _table1_rows(true, {args.mode: best.params}))
    else:
        print(f"best checkpoint: epoch {best.epoch}, mean loss {best.loss:.6g}")


def _write_state(path, state):
    def enc(o):
        if isinstance(o, np.ndarray):
            return {"__nd__": o.tolist(), "shape": list(o.shape)}
        raise TypeError(type(o))
    Path(path).write_text(json.dumps(state, default=enc))


def _read_state(path):
    def dec(d):
        if "__nd__" in d:
            return np.array(d["__nd__"], dtype=np.float64).reshape(d["shape"])
        return d
    try:
        return json.loads(Path(path).read_text(), object_hook=dec)
    except FileNotFoundError:
        raise CliError(f"resume state not found: {path}") from None


def cmd_eval(args, cfg, out):
    w = _load_wave(args, cfg)
    p = C.converter_params(cfg)
    results = {}
    for kind, path in (("snn", args.snn), ("ff", args.ff)):
        if path is None:
            continue
        est = _load_ckpt(path, cfg, kind)
        params, _, _ = estimate(est, subsample(w, cfg["stride"]))
        results[kind] = params
        iL, Vo = rk4_integrate(*params, p, (0.0, cfg["sim_span"]), cfg["solver_dt"])
        t = cfg["solver_dt"] * np.arange(1, iL.shape[0] + 1)
        write_rows(out / f"fit_{kind}.csv", ("t", "iL", "Vo"),
                   [(float(a), float(b), float(c)) for a, b, c in zip(t, iL.values, Vo.values)])
    if not results:
        raise CliError("give --snn and/or --ff checkpoints")
    print(_table1(p.unknowns, {k.upper() + "+ODE": v for k, v in results.items()}))
    write_rows(out / "eval.csv", ("model", "param", "true", "value", "error_pct"),
               _table1_rows(p.unknowns, results))


def cmd_efficiency(args, cfg, out):
    est = _load_ckpt(args.checkpoint, cfg, "snn")
    w = _load_wave(args, cfg)
    _, rec, _ = estimate(est, subsample(w, cfg["stride"]))
    cat = EnergyCatalog(cfg["mac_energy"], cfg["sop_energy"])
    rows = efficiency_rows(rec, est, cat=cat, snapshot_rate=cfg["snapshot_rate"])
    write_efficiency_csv(out / "efficiency.csv", rows)
    write_raster_csv(out / "raster.csv", rec)
    write_rate_series_csv(out / "rates.csv", rec)
    for metric, value, unit, source in rows:
        shown = f"{value:.6g}" if isinstance(value, float) else value
        print(f"{metric:26s}{shown!s:>14s} {unit:9s}({source})")


def cmd_degrade(args, cfg, out):
    snn = _load_ckpt(args.snn, cfg, "snn", need_multi=True)
    ff = _load_ckpt(args.ff, cfg, "ff", need_multi=True)
    log_, summary = run_degradation(snn, ff, C.schedule(cfg), cfg["seed"],
                                    C.converter_params(cfg), C.emi_config(cfg), cfg["stride"])
    log_.to_csv(out / "degradation.csv")
    rows = [(m.upper() + "+ODE",) + tuple(summary[m][n] * 100 for n in PARAM_NAMES)
            for m in ("ff", "snn")]
    write_rows(out / "degradation_summary.csv", ("model", "L_err_pct", "C_err_pct", "Rs_err_pct"),
               rows)
    print(f"{'':10s}{'L error':>10s}{'C error':>10s}{'Rs error':>10s}")
    for r in rows:
        print(f"{r[0]:10s}" + "".join(f"{v:9.1f}%" for v in r[1:]))


def cmd_monitor(args, cfg, out):
    snn = _load_ckpt(args.snn, cfg, "snn", need_multi=True)
    ff = _load_ckpt(args.ff, cfg, "ff", need_multi=True)
    kinds = ("healthy", "abrupt", "gradual") if args.scenario == "all" else (args.scenario,)
    n, fc = cfg["cycles"], cfg["fault_cycle"]
    summary = []
    for kind in kinds:
        lg = run_event_driven(snn, ff, C.scenario(cfg, kind), cfg["seed"], not args.no_persist,
                              C.converter_params(cfg), C.emi_config(cfg), cfg["stride"])
        lg.to_csv(out / f"monitor_{kind}.csv")
        hit = detect_fault(lg.column("spike_rate"), cfg["threshold_pp"])
        print(f"[{kind}] fault detected at cycle {hit}" if hit else f"[{kind}] no fault detected")
        if kind == "abrupt":
            windows = (("abrupt_pre", (1, fc - 1)), ("abrupt_post", (fc, n)))
        else:
            windows = ((kind, (1, n)),)
        for label, win in windows:
            early = window_rate(lg, (win[0], min(win[0] + 9, win[1])))
            late = window_rate(lg, (max(win[1] - 9, win[0]), win[1]))
            summary.append((label, early * 100, late * 100, rs_mae(lg, win, "snn"),
                            rs_mae(lg, win, "ff"), "" if hit is None else hit))
    write_rows(out / "monitor_summary.csv",
               ("scenario", "early_rate_pct", "late_rate_pct", "snn_rs_mae", "ff_rs_mae",
                "detected_cycle"), summary)
    print(f"{'scenario':14s}{'early':>8s}{'late':>8s}{'SNN MAE':>10s}{'FF MAE':>10s}")
    for s in summary:
        print(f"{s[0]:14s}{s[1]:7.1f}%{s[2]:7.1f}%{s[3]:10.3f}{s[4]:10.3f}")


def cmd_report(args, cfg, out):
    from . import plotting

    src = Path(args.input) if args.input else out
    made = []
    def have(*names):
        return all((src / n).exists() for n in names)

    if have("clean.csv", "noisy.csv"):
        clean, noisy = _read_csv(src / "clean.csv"), _read_csv(src / "noisy.csv")
        fits = {k.upper(): (d["t"], d) for k in ("snn", "ff") if have(f"fit_{k}.csv")
                for d in [_read_csv(src / f"fit_{k}.csv")]}
        plotting.plot_waveforms(clean["t"], clean, noisy, out / "waveforms.png", fits)
        made.append("waveforms.png")
    hists = {}
    for mode in ("snn", "ff"):
        if have(f"history_{mode}_single.csv"):
            hists[mode.upper()] = _read_csv(src / f"history_{mode}_single.csv")
    if hists:
        truth = dict(zip(PARAM_NAMES, C.converter_params(cfg).unknowns))
        plotting.plot_convergence(hists, truth, out / "convergence.png")
        plotting.plot_loss(hists, out / "loss.png")
        made += ["convergence.png", "loss.png"]
    if have("raster.csv"):
        r = _read_csv(src / "raster.csv")
        if r:
            plotting.plot_raster(r["layer"], r["neuron"], r["timestep"], out / "raster.png")
            made.append("raster.png")
    if have("rates.csv"):
        r = _read_csv(src / "rates.csv")
        plotting.plot_rate_series(r["timestep"], {k: v for k, v in r.items() if k != "timestep"},
                                  out / "rates.png")
        made.append("rates.png")
    if have("degradation.csv"):
        plotting.plot_tracking(_read_csv(src / "degradation.csv"), out / "tracking.png")
        made.append("tracking.png")
    logs = {k: _read_csv(src / f"monitor_{k}.csv") for k in ("healthy", "abrupt", "gradual")
            if have(f"monitor_{k}.csv")}
    if logs:
        plotting.plot_scenarios(logs, out / "scenarios.png", cfg["fault_cycle"])
        made.append("scenarios.png")
    write_rows(out / "report_index.csv", ("figure",), [(m,) for m in made])
    print("\n".join(f"wrote {out / m}" for m in made) or "nothing to plot")


COMMANDS = {
    "simulate": (cmd_simulate, "generate clean/noisy benchmark waveforms (and a dataset)"),
    "train": (cmd_train, "train an estimator (single or multi condition)"),
    "eval": (cmd_eval, "evaluate checkpoints on a waveform (summary table)"),
    "efficiency": (cmd_efficiency, "spike sparsity, op counts and energy estimate"),
    "degrade": (cmd_degrade, "track a 50-snapshot degradation trajectory"),
    "monitor": (cmd_monitor, "event-driven monitoring with persistent membranes"),
    "report": (cmd_report, "render figures from CSV outputs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikeid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<subcommand>)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for dataset generation")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            sp.add_argument("--no-noise", action="store_true", help="skip EMI corruption")
            sp.add_argument("--dataset", action="store_true",
                            help="also write the multi-condition dataset")
        elif name == "train":
            sp.add_argument("--mode", choices=("snn", "ff"), default="snn")
            sp.add_argument("--protocol", choices=("single", "multi"), default="single")
            sp.add_argument("--dataset", help="dataset directory (multi protocol)")
            sp.add_argument("--resume", help="train_state_*.json to continue from")
        elif name in ("eval", "degrade", "monitor"):
            sp.add_argument("--snn", help="SNN checkpoint")
            sp.add_argument("--ff", help="FF checkpoint")
            if name == "eval":
                sp.add_argument("--waveform", help="measured waveform CSV (default: benchmark)")
            if name == "monitor":
                sp.add_argument("--scenario", default="all",
                                choices=("healthy", "abrupt", "gradual", "all"))
                sp.add_argument("--no-persist", action="store_true",
                                help="reset SNN membranes every cycle")
        elif name == "efficiency":
            sp.add_argument("--checkpoint", help="SNN checkpoint")
            sp.add_argument("--waveform", help="measured waveform CSV (default: benchmark)")
        elif name == "report":
            sp.add_argument("--in", dest="input", help="directory holding the CSV outputs")
        grp = sp.add_argument_group("config keys")
        for key, (default, help_) in C.DEFAULTS.items():
            grp.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="V",
                             help=f"{help_} (default: {default!r})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    try:
        cfg = C.resolve(overrides, args.config)
        out = _out_dir(args)
        extra = {k: v for k, v in vars(args).items()
                 if not k.startswith("cfg_") and k not in ("command", "verbose")}
        _write_manifest(out, args.command, cfg, extra)
        COMMANDS[args.command][0](args, cfg, out)
    except (C.ConfigError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
