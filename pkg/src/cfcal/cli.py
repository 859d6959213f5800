"""Command-line front end: clean, simulate, calibrate, propagate, report.

Every command writes its outputs plus a ``manifest.json`` into ``--out-dir``.
Exit codes: 0 success, 2 bad input (missing files, malformed data or
config), 3 numerical failure (collision under the error policy, infeasible
calibration, non-finite results).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .calibration import (InfeasibleError, ParamBounds, calibrate, load_calibration_spec,
                          platoons_from_index)
from .cf_models import LinearParams, load_param_file, model_kind, write_param_file
from .error_propagation import (FIG4_PARAMS, ErrorSeries, figure_case, multi_vehicle_error, propagate,
                               write_error_csv)
from .measures import IntervalSpec, aggregate_macro, load_fuel_coefficients, mse
from .simulation import CollisionError, load_scenario, simulate_platoon
from .trajectory_data import (CleaningConfig, Corridor, TrajectoryFormatError, build_platoons,
                              clean_trajectory, load_trajectories, write_trajectories)

log = logging.getLogger("cfcal")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


# -- manifest ----------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    inputs: dict[str, str]  # path -> sha256
    config: dict
    seed: int | None
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Path):
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _read_yaml(path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: not valid YAML ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a mapping at top level")
    return doc


def _resolve(base: Path | None, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() or base is None else base / p


# -- clean ------------------------------------------------------------------------------

def cmd_clean(args, out_dir: Path, man: RunManifest):
    cfg_path = args.config
    conf = _read_yaml(cfg_path) if cfg_path else {}
    base = Path(cfg_path).parent if cfg_path else None
    cc = CleaningConfig(angle_threshold=float(args.angle_threshold or conf.get("angle_threshold", 30.0)),
                        window=int(args.window or conf.get("window", 5)))
    schema = conf.get("schema")
    if args.schema:
        schema = _read_yaml(args.schema)
    elif isinstance(schema, str):
        schema = _read_yaml(_resolve(base, schema))
    corridor_path = args.corridor or _resolve(base, conf.get("corridor"))
    corridor = Corridor.from_file(corridor_path) if corridor_path else None
    data = load_trajectories(args.input, schema=schema, corridor=corridor)
    man.inputs = {str(p): sha256_file(p) for p in [args.input, cfg_path, args.schema, corridor_path] if p}
    man.config = {"angle_threshold": cc.angle_threshold, "window": cc.window,
                  "schema": schema, "corridor": str(corridor_path) if corridor_path else None}

    cleaned, diag = {}, []
    for vid, tr in data.items():
        out, drift = clean_trajectory(tr, cc)
        cleaned[vid] = out
        diag.append((vid, len(drift), ";".join(repr(float(tr.t[i])) for i in drift)))
    out_csv = out_dir / (args.output or "cleaned.csv")
    write_trajectories(out_csv, cleaned, extra_cleaned=True)
    diag_csv = out_dir / "clean_diagnostics.csv"
    with open(diag_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "drift_points", "drift_times"])
        w.writerows(diag)
    total = sum(d[1] for d in diag)
    log.info("cleaned %d vehicles, replaced %d drift points", len(cleaned), total)
    return [out_csv, diag_csv]


# -- simulate -----------------------------------------------------------------------------

def cmd_simulate(args, out_dir: Path, man: RunManifest):
    path = args.scenario or args.config
    if not path:
        raise InputError("simulate needs a scenario file (positional or --config)")
    sc, cfg = load_scenario(path)
    man.inputs = {str(path): sha256_file(path)}
    man.config = {"scenario": _read_yaml(path), "sim": asdict(cfg)}
    res = simulate_platoon(sc, cfg)
    if not np.all(np.isfinite(res.x)):
        raise NumericalError("simulation produced non-finite positions")
    out_csv = out_dir / (args.output or "simulated.csv")
    write_trajectories(out_csv, res.to_trajectories(include_lead=not args.followers_only))
    outputs = [out_csv]
    if res.collision_events:
        log.warning("%d collision events clamped", len(res.collision_events))
    if args.svg:
        outputs.append(_svg_lines(out_dir / "simulated.svg", [(vid, res.t, res.x[j]) for j, vid in
                                                              enumerate(res.vehicle_ids)],
                                  "t (s)", "position (m)"))
    return outputs


# -- calibrate ----------------------------------------------------------------------------

def cmd_calibrate(args, out_dir: Path, man: RunManifest):
    spec_path = args.spec or args.config
    if not spec_path:
        raise InputError("calibrate needs a spec file (--spec or --config)")
    kind, spec, bounds, opts = load_calibration_spec(spec_path)
    if args.model:
        kind = model_kind(args.model).name
        bounds = ParamBounds.default(kind)
    if args.objective:
        spec = type(spec)(**{**spec.__dict__, "kind": args.objective})
    budget = args.budget if args.budget is not None else opts["budget"]
    seed = args.seed if args.seed is not None else opts["seed"]
    data = load_trajectories(args.data)
    index = build_platoons(data)
    platoons = platoons_from_index(data, index)
    if not platoons:
        raise InputError("no usable platoons (need vehicles with recorded leaders)")
    man.inputs = {str(p): sha256_file(p) for p in [args.data, spec_path]}
    man.seed = seed
    result = calibrate(platoons, kind, spec, bounds, budget=budget, seed=seed,
                       class_mode=opts["class_mode"], popsize=opts["popsize"], threads=args.threads)
    man.config = {"model": kind, "budget": budget, "spec": result.spec}
    if not np.isfinite(result.objective):
        raise NumericalError("calibration ended with a non-finite objective")
    out_json = out_dir / (args.output or "calibration.json")
    out_json.write_text(result.dumps())
    params_yaml = out_dir / "calibrated_params.yaml"
    write_param_file(params_yaml, result.objective_kind, result.model_spec())
    return [out_json, params_yaml]


# -- propagate -------------------------------------------------------------------------------

def _linear_from(conf: dict, args) -> LinearParams:
    if args.params:
        try:
            k1, k2, k3 = (float(v) for v in args.params.split(","))
        except ValueError:
            raise InputError("--params expects k1,k2,k3") from None
        return LinearParams(k1, k2, k3)
    if "params" in conf:
        p = conf["params"]
        return LinearParams(float(p["k1"]), float(p["k2"]), float(p["k3"]))
    if "param_label" in conf:
        table = load_param_file(conf["param_file"]) if "param_file" in conf else load_param_file()
        return table[conf["param_label"]]["Linear"][conf.get("class", "small")]
    return FIG4_PARAMS


def _read_residuals(path) -> np.ndarray:
    """CSV with columns n, t, r (n = 0 is the head and must carry zeros)."""
    rows = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for col in ("n", "t", "r"):
            if rd.fieldnames is None or col not in rd.fieldnames:
                raise InputError(f"{path}: missing required column {col!r}")
        for i, row in enumerate(rd, start=2):
            try:
                rows.append((int(row["n"]), int(row["t"]), float(row["r"])))
            except ValueError:
                raise InputError(f"{path}: line {i}: cannot parse residual row") from None
    if not rows:
        raise InputError(f"{path}: no residual rows")
    N = max(r[0] for r in rows) + 1
    T = max(r[1] for r in rows) + 1
    r = np.zeros((N, T))
    for n, t, val in rows:
        r[n, t] = val
    return r


def cmd_propagate(args, out_dir: Path, man: RunManifest):
    conf = _read_yaml(args.config) if args.config else {}
    case = args.case or conf.get("case")
    residuals = args.residuals or conf.get("residuals")
    k = _linear_from(conf, args)
    steps = args.steps or conf.get("steps")
    vehicles = args.vehicles or conf.get("vehicles")
    convention = args.convention or conf.get("convention", "simulation")
    man.inputs = {str(p): sha256_file(p) for p in [args.config, residuals] if p}
    if residuals:
        r = _read_residuals(residuals)
        es = propagate(r, k) if convention == "simulation" else _literal(r, k)
        first = 0
    elif case in ("fig2", "fig4", "zero"):
        kw = {}
        if steps:
            kw["T"] = int(steps)
        if case == "fig2":
            if args.size is not None:
                kw["size"] = args.size
            if args.t_err is not None:
                kw["t_err"] = args.t_err
            es = figure_case("fig2", **kw)
            first = 1
        else:
            n = int(vehicles or 3)
            T = int(steps or 20)
            r = np.zeros((n + 1, T + 1))
            if case == "fig4":
                r[1, 1] = args.size if args.size is not None else 5.0
            es = propagate(r, k) if convention == "simulation" else _literal(r, k)
            es = ErrorSeries(es.eps_a[1:], es.eps_v[1:], es.eps_x[1:], es.r[1:])
            first = 1
    else:
        raise InputError("propagate needs --case fig2|fig4|zero or --residuals FILE")
    man.config = {"case": case, "residuals": str(residuals) if residuals else None, "params": k.as_dict(),
                  "steps": steps, "vehicles": vehicles, "convention": convention, "size": args.size}
    if not np.all(np.isfinite(es.eps_x)):
        raise NumericalError("error series diverged to non-finite values")
    out_csv = out_dir / (args.output or "propagation.csv")
    write_error_csv(out_csv, es, first_vehicle=first)
    outputs = [out_csv]
    if args.svg:
        t = np.arange(es.eps_x.shape[1])
        outputs.append(_svg_lines(out_dir / "propagation.svg",
                                  [(f"vehicle {n + first}", t, es.eps_x[n]) for n in range(es.eps_x.shape[0])],
                                  "t (steps)", "position error"))
    return outputs


def _literal(r, k):
    e = multi_vehicle_error(r, k, convention="literal")
    v = np.cumsum(e, axis=1)
    return ErrorSeries(e, v, np.cumsum(v, axis=1), r)


# -- report ----------------------------------------------------------------------------------

TABLE_ROWS = ["Acceleration (m/s^2)", "Speed (m/s)", "Average travel time (s)",
              "Average fuel consumption (L/100km)"]


def _paired(obs: dict, sim: dict, exclude: set):
    """Stack (a, v) samples matched on (vehicle id, timestamp)."""
    ao, as_, vo, vs = [], [], [], []
    ids = sorted(set(obs) & set(sim) - exclude)
    for vid in ids:
        o, s = obs[vid], sim[vid]
        ko = {round(float(t), 6): i for i, t in enumerate(o.t)}
        idx = [(ko[round(float(t), 6)], j) for j, t in enumerate(s.t) if round(float(t), 6) in ko]
        if not idx:
            continue
        io, js = map(list, zip(*idx))
        ao.append(o.a[io])
        as_.append(s.a[js])
        vo.append(o.v[io])
        vs.append(s.v[js])
    if not ao:
        raise InputError("observed and simulated files share no (id, t) samples")
    return ids, np.concatenate(ao), np.concatenate(as_), np.concatenate(vo), np.concatenate(vs)


def _macro_mse(mo, ms):
    To, Ts = mo.travel_times(), ms.travel_times()
    eo, es = mo.fuels(), ms.fuels()
    okT = np.isfinite(To) & np.isfinite(Ts)
    oke = np.isfinite(eo) & np.isfinite(es)
    mT = float(np.mean((To[okT] - Ts[okT]) ** 2)) if okT.any() else float("nan")
    me = float(np.mean((eo[oke] - es[oke]) ** 2)) if oke.any() else float("nan")
    return mT, me


def cmd_report(args, out_dir: Path, man: RunManifest):
    conf = _read_yaml(args.config) if args.config else {}
    base = Path(args.config).parent if args.config else None
    obs_path = args.obs or _resolve(base, conf.get("obs"))
    sims = [tuple(s.split("=", 1)) for s in (args.sim or [])]
    if any(len(s) != 2 for s in sims):
        raise InputError("--sim expects LABEL=PATH")
    if not sims:
        sims = [(lab, _resolve(base, p)) for lab, p in (conf.get("sims") or {}).items()]
    if not obs_path or not sims:
        raise InputError("report needs --obs and at least one --sim LABEL=PATH")
    if args.intervals:
        iv_doc = _read_yaml(args.intervals)
    elif isinstance(conf.get("intervals"), str):
        iv_doc = _read_yaml(_resolve(base, conf["intervals"]))
    else:
        iv_doc = conf.get("intervals")
    if not iv_doc:
        raise InputError("report needs an interval spec (--intervals FILE)")
    iv = IntervalSpec.from_dict(iv_doc)
    fuel_path = args.fuel or _resolve(base, conf.get("fuel_file"))
    fuel = load_fuel_coefficients(fuel_path) if fuel_path else load_fuel_coefficients()
    bins = int(args.bins or conf.get("bins", 20))
    exclude = set(args.exclude or conf.get("exclude", []))

    obs = load_trajectories(obs_path)
    inputs = [obs_path] + [p for _, p in sims] + [p for p in (args.intervals, fuel_path, args.config) if p]
    man.inputs = {str(p): sha256_file(p) for p in inputs}
    man.config = {"sims": {lab: str(p) for lab, p in sims}, "intervals": iv.to_dict(), "bins": bins,
                  "exclude": sorted(exclude), "fuel_sha256": fuel.sha256}

    table = {}  # (model, method) -> row values
    samples = {"acceleration": {"observed": None}, "speed": {"observed": None}}
    for label, path in sims:
        model, method = label.split("/", 1) if "/" in label else ("-", label)
        sim = load_trajectories(path)
        ids, ao, as_, vo, vs = _paired(obs, sim, exclude)
        sel = set(ids)
        mo = aggregate_macro({k: obs[k] for k in sel}, iv, fuel)
        ms = aggregate_macro({k: sim[k] for k in sel}, iv, fuel)
        mT, me = _macro_mse(mo, ms)
        table[(model, method)] = [mse(ao, as_), mse(vo, vs), mT, me]
        samples["acceleration"][label] = as_
        samples["speed"][label] = vs
        if samples["acceleration"]["observed"] is None:
            samples["acceleration"]["observed"] = ao
            samples["speed"]["observed"] = vo

    methods = list(dict.fromkeys(m for _, m in table))
    models = list(dict.fromkeys(m for m, _ in table))
    out_table = out_dir / "mse_table.csv"
    with open(out_table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["CF model", "Measurements"] + methods)
        for model in models:
            for r, name in enumerate(TABLE_ROWS):
                cells = [table[(model, m)][r] if (model, m) in table else "" for m in methods]
                w.writerow([model, name] + [c if c == "" else repr(float(c)) for c in cells])
    outputs = [out_table]
    for qty, by_label in samples.items():
        pooled = np.concatenate(list(by_label.values()))
        edges = np.histogram_bin_edges(pooled, bins=bins)
        counts = {lab: np.histogram(vals, bins=edges)[0] for lab, vals in by_label.items()}
        path = out_dir / f"hist_{qty}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi"] + list(counts))
            for b in range(len(edges) - 1):
                w.writerow([repr(float(edges[b])), repr(float(edges[b + 1]))] + [int(c[b]) for c in counts.values()])
        outputs.append(path)
        if args.svg:
            outputs.append(_svg_hist(out_dir / f"hist_{qty}.svg", edges, counts, qty))
    return outputs


# -- svg -----------------------------------------------------------------------------------

def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise InputError("--svg needs matplotlib (pip install 'artifact[plot]')") from None
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cfcal"
    import matplotlib.pyplot as plt
    return plt


def _svg_lines(path, series, xlabel, ylabel):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, x, y in series:
        ax.plot(x, y, label=str(label), lw=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _svg_hist(path, edges, counts, qty):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    centers = 0.5 * (edges[:-1] + edges[1:])
    for label, c in counts.items():
        ax.step(centers, c / max(c.sum(), 1), where="mid", label=label)
    ax.set_xlabel(qty)
    ax.set_ylabel("share of samples")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# -- entry point ------------------------------------------------------------------------------

COMMANDS = {"clean": cmd_clean, "simulate": cmd_simulate, "calibrate": cmd_calibrate,
            "propagate": cmd_propagate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfcal", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    p.add_argument("--config", help="YAML config for the chosen command")
    p.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")
    p.add_argument("--threads", type=int, default=1, help="worker threads for objective evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"cfcal {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("clean", help="remove drift points, smooth and differentiate trajectories")
    c.add_argument("input")
    c.add_argument("--output", help="file name inside --out-dir (default cleaned.csv)")
    c.add_argument("--angle-threshold", type=float)
    c.add_argument("--window", type=int)
    c.add_argument("--schema", help="YAML mapping canonical column names to file headers")
    c.add_argument("--corridor", help="YAML corridor polylines for UTM projection")

    s = sub.add_parser("simulate", help="roll a platoon scenario forward")
    s.add_argument("scenario", nargs="?")
    s.add_argument("--output")
    s.add_argument("--followers-only", action="store_true", help="omit the replayed head from the output")
    s.add_argument("--svg", action="store_true")

    k = sub.add_parser("calibrate", help="fit model parameters to trajectory data")
    k.add_argument("data")
    k.add_argument("--spec", help="calibration spec YAML (or use --config)")
    k.add_argument("--output")
    k.add_argument("--budget", type=int)
    k.add_argument("--model")
    k.add_argument("--objective", choices=["MiC", "MaC", "BiC"])

    e = sub.add_parser("propagate", help="error-propagation series for impulse cases or given residuals")
    e.add_argument("--case", choices=["fig2", "fig4", "zero"])
    e.add_argument("--residuals", help="CSV with columns n, t, r")
    e.add_argument("--params", help="linear-law k1,k2,k3")
    e.add_argument("--steps", type=int)
    e.add_argument("--vehicles", type=int)
    e.add_argument("--size", type=float)
    e.add_argument("--t-err", type=int)
    e.add_argument("--convention", choices=["simulation", "literal"])
    e.add_argument("--output")
    e.add_argument("--svg", action="store_true")

    r = sub.add_parser("report", help="MSE table and distribution data for simulated vs observed")
    r.add_argument("--obs")
    r.add_argument("--sim", action="append", help="LABEL=PATH or MODEL/METHOD=PATH; repeatable")
    r.add_argument("--intervals", help="interval spec YAML")
    r.add_argument("--fuel", help="fuel coefficient CSV")
    r.add_argument("--bins", type=int)
    r.add_argument("--exclude", nargs="*", help="vehicle ids left out of the comparison")
    r.add_argument("--svg", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.out_dir)
    man = RunManifest(args.command, {}, {}, args.seed, started=_now())
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, out_dir, man)
    except (CollisionError, InfeasibleError, NumericalError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, TrajectoryFormatError, FileNotFoundError, IsADirectoryError, KeyError,
            ValueError, yaml.YAMLError) as exc:
        msg = f"missing key {exc}" if isinstance(exc, KeyError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    man.finished = _now()
    man.outputs = {Path(p).name: sha256_file(p) for p in outputs}
    man.write(out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
