"""Command-line front end.

Subcommands: ``linearize``, ``region``, ``sweep``, ``simulate``,
``min-horizon``.  Settings come from built-in defaults (the CSTR study),
then an optional flat JSON ``--config`` file, then command-line flags.

Exit codes: 0 success, 1 configuration error, 2 infeasible or numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DivergenceError, ModelError, get_model, linearize
from .ocp import SolverSettings, min_horizon, receding_horizon
from .region import (RegionError, SearchSettings, TerminalRegion, characterize,
                     ellipse_points, sweep)
from .synthesis import SynthesisError, Tuning, Weights, synthesize

log = logging.getLogger("qihmpc")

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2

CSTR_ICS = [[-0.001, -0.050], [-0.625, 0.380], [0.400, 0.230]]

# tuning used for the study's regions, per approach
STUDY_TUNING = {
    "ca": Tuning("ca", kappa=0.1059),
    "ac": Tuning("ac", rho_x=50.0, rho_u=20.0),
    "lqr": Tuning("lqr", rho_x=50.0, rho_u=1500.0),
}

# the five comparison rows (approach, kappa, rho_x, rho_u)
COMPARISON_ROWS = [
    Tuning("ca", kappa=0.1059),
    Tuning("ac", rho_x=50.0, rho_u=0.0),
    Tuning("ac", rho_x=50.0, rho_u=20.0),
    Tuning("lqr", rho_x=50.0, rho_u=1.0),
    Tuning("lqr", rho_x=50.0, rho_u=1500.0),
]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "cstr2"
    params: dict = field(default_factory=dict)
    W_x: list = field(default_factory=lambda: [[10.0, 0.0], [0.0, 2.0]])
    W_u: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 0.5]])
    approach: str | None = None   # None: command default (region/min-horizon: all, simulate: lqr)
    kappa: float | None = None
    rho_x: float | None = None
    rho_u: float | None = None
    method: str = "ineq"
    lyapunov_form: str = "standard"
    T_p: float | None = None
    dt: float = 1.0
    T_max: float = 40.0
    t_end: float = 60.0
    ics: list = field(default_factory=lambda: [list(x) for x in CSTR_ICS])
    out: str = "out"
    beta: float = 0.98
    samples: int = 3600
    shells: int = 8
    seed: int = 0
    schedule: str = "ac1"
    grid: list | None = None
    factor: float = 1.5
    cap: float = 1e4
    rho_x_star: float = 50.0
    region: str | None = None
    jobs: int = 1

    def validate(self):
        if self.approach not in (None, "ca", "ac", "lqr", "all"):
            raise ConfigError(f"approach: expected ca|ac|lqr|all, got {self.approach!r}")
        if self.method not in ("norm", "ineq", "both"):
            raise ConfigError(f"method: expected norm|ineq|both, got {self.method!r}")
        if self.lyapunov_form not in ("standard", "transposed"):
            raise ConfigError(f"lyapunov_form: expected standard|transposed, got {self.lyapunov_form!r}")
        for name in ("dt", "T_max", "t_end", "factor", "cap"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name}: must be a positive number, got {v!r}")
        if self.T_p is not None and not self.T_p > 0:
            raise ConfigError(f"T_p: must be positive, got {self.T_p!r}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta: must lie in (0, 1), got {self.beta!r}")
        if self.samples < 8 or self.shells < 1:
            raise ConfigError("samples/shells: too small")
        if self.grid is not None and len(self.grid) == 0:
            raise ConfigError("grid: empty sweep grid")
        if not self.ics:
            raise ConfigError("ics: at least one initial condition is required")
        return self

    def weights(self):
        try:
            return Weights(np.array(self.W_x, float), np.array(self.W_u, float))
        except (SynthesisError, ValueError) as exc:
            raise ConfigError(f"W_x/W_u: {exc}") from exc

    def search_settings(self):
        return SearchSettings(beta=self.beta, n_angles=self.samples, n_shells=self.shells,
                              n_lipschitz=self.samples, seed=self.seed)

    def tuning(self, approach):
        """Study tuning for ``approach``, with flag overrides when it was selected explicitly."""
        base = STUDY_TUNING[approach]
        if approach != self.approach:
            return base
        return Tuning(approach,
                      kappa=self.kappa if self.kappa is not None else base.kappa,
                      rho_x=self.rho_x if self.rho_x is not None else base.rho_x,
                      rho_u=self.rho_u if self.rho_u is not None else base.rho_u)


def load_config(path):
    """Read a flat JSON object of RunConfig fields."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}: unknown field {key!r}")
    return data


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _short(v):
    return f"{'-' if v is None else format(v, '.6g'):>10}"


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    path.write_text(json.dumps(obj, indent=2, default=default, allow_nan=True) + "\n", encoding="utf-8")
    return path


def region_to_json(region: TerminalRegion, tuning: Tuning | None = None):
    return {
        "label": region.label,
        "method": region.method,
        "P": region.P,
        "K": region.K,
        "alpha": region.alpha,
        "gamma": region.gamma,
        "area": region.area,
        "tuning": dataclasses.asdict(tuning) if tuning else None,
    }


def region_from_json(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return TerminalRegion(np.array(d["P"], float), float(d["alpha"]), float(d["gamma"]),
                              np.array(d["K"], float), d.get("method", "ineq"), d.get("label", ""))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"region file {path}: {exc}") from exc


def _tag(t: Tuning):
    if t.approach == "ca":
        return f"ca_kappa{t.kappa:g}" if t.kappa is not None else "ca"
    return f"{t.approach}_rx{t.rho_x:g}_ru{t.rho_u:g}"


def _say(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _build(cfg):
    try:
        model = get_model(cfg.model, cfg.params)
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc
    return model, linearize(model), cfg.weights()


def _region(cfg, model, lin, w, tuning, method):
    try:
        synth = synthesize(lin, w, tuning, lyapunov_form=cfg.lyapunov_form)
    except SynthesisError as exc:
        raise ConfigError(f"{tuning.approach}: {exc}") from exc
    try:
        return synth, characterize(model, synth, method, cfg.search_settings())
    except RegionError as exc:
        raise RegionError(f"{synth.label()}: {exc}") from exc


def cmd_linearize(cfg):
    model, lin, _ = _build(cfg)
    ev = lin.eigenvalues()
    np.set_printoptions(precision=4, suppress=True)
    _say(f"model: {model.name}")
    _say(f"A =\n{lin.A}")
    _say(f"B =\n{lin.B}")
    _say("eigenvalues(A) = " + ", ".join(f"{e.real:.4f}" + (f"{e.imag:+.4f}j" if e.imag else "") for e in ev))
    out = Path(cfg.out)
    write_json(out / "linearize.json", {
        "model": model.name, "A": lin.A, "B": lin.B,
        "eigenvalues": [[float(e.real), float(e.imag)] for e in ev],
        "X_s": model.X_s, "U_s": model.U_s,
    })
    return EXIT_OK


def cmd_region(cfg):
    model, lin, w = _build(cfg)
    if cfg.approach in (None, "all"):
        tunings = COMPARISON_ROWS
    else:
        tunings = [cfg.tuning(cfg.approach)]
    methods = ["norm", "ineq"] if cfg.method == "both" else [cfg.method]
    out = Path(cfg.out)
    rows = []
    th = np.linspace(0, 2 * np.pi, 361)
    circle = np.vstack([np.cos(th), np.sin(th)])
    for t in tunings:
        for meth in methods:
            synth, reg = _region(cfg, model, lin, w, t, meth)
            p = synth.params
            rows.append([t.approach, p["rho_x"], p["rho_u"], p["kappa"], meth, reg.gamma, reg.alpha, reg.area])
            tag = f"{_tag(t)}_{meth}"
            if model.n_x == 2:
                pts = ellipse_points(reg.P, reg.alpha, circle).T
                write_csv(out / f"boundary_{tag}.csv", ["theta", "x1", "x2"],
                          ([a, x, y] for a, (x, y) in zip(th, pts)))
            write_json(out / f"region_{tag}.json", region_to_json(reg, t))
            _say(f"{synth.label():32s} {meth:4s} gamma={reg.gamma:.6g} alpha={reg.alpha:.6g} "
                 f"area={reg.area if reg.area is None else format(reg.area, '.6g')}")
    write_csv(out / "regions.csv", ["approach", "rho_x", "rho_u", "kappa", "method", "gamma", "alpha", "area"], rows)
    return EXIT_OK


def cmd_sweep(cfg):
    model, lin, w = _build(cfg)
    res = sweep(model, lin, w, cfg.schedule, grid=cfg.grid, factor=cfg.factor, cap=cfg.cap,
                rho_x_star=cfg.rho_x_star, kappa=cfg.kappa if cfg.kappa is not None else 0.1059,
                method=cfg.method if cfg.method != "both" else "ineq",
                settings=cfg.search_settings(), lyapunov_form=cfg.lyapunov_form)
    header = ["approach", "rho_x", "rho_u", "kappa", "gamma", "alpha", "area", "feasible", "best", "error"]
    rows = []
    for i, r in enumerate(res.rows):
        rows.append([r.approach, r.rho_x, r.rho_u, r.kappa, r.gamma, r.alpha, r.area, r.feasible,
                     i == res.best_index, r.error])
        flag = "*" if i == res.best_index else " "
        _say(f"{flag} rho_x={_short(r.rho_x)} rho_u={_short(r.rho_u)} kappa={_short(r.kappa)} "
             f"gamma={r.gamma:.6g} alpha={r.alpha:.6g} area={r.area:.6g}" + ("" if r.feasible else f"  [{r.error}]"))
    write_csv(Path(cfg.out) / f"sweep_{cfg.schedule}.csv", header, rows)
    if res.best is None:
        _say("no feasible row in sweep")
        return EXIT_FAILURE
    return EXIT_OK


TRACE_HEADER_2 = ["t", "x1", "x2", "X1", "X2", "u1", "u2", "U1", "U2",
                  "V", "log10V", "terminal_value", "xx", "log10xx", "feasible"]


def trace_rows(trace):
    n_x = trace.states.shape[1]
    n_u = trace.inputs.shape[1]
    header = (["t"] + [f"x{i + 1}" for i in range(n_x)] + [f"X{i + 1}" for i in range(n_x)]
              + [f"u{i + 1}" for i in range(n_u)] + [f"U{i + 1}" for i in range(n_u)]
              + ["V", "log10V", "terminal_value", "xx", "log10xx", "feasible"])
    X, U = trace.abs_states, trace.abs_inputs
    xx = trace.xx
    with np.errstate(divide="ignore"):
        lv, lxx = np.log10(trace.V), np.log10(xx)
    rows = []
    for k in range(len(trace)):
        rows.append([trace.times[k], *trace.states[k], *X[k], *trace.inputs[k], *U[k],
                     trace.V[k], lv[k], trace.terminal_value[k], xx[k], lxx[k], bool(trace.feasible[k])])
    return header, rows


def _simulate_one(args):
    model, w, reg, x0, T_p, cfg_dt, T_max, t_end = args
    scan = None
    if T_p is None:
        scan = min_horizon(model, w, reg, np.asarray(x0, float), cfg_dt, T_max)
        if not scan.found:
            return None, scan
        T_p = scan.T_p_min
    return receding_horizon(model, w, reg, x0, T_p, t_end, cfg_dt), scan


def _pool_map(fn, jobs, n):
    if n <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, jobs))


def cmd_simulate(cfg):
    model, lin, w = _build(cfg)
    if cfg.region:
        reg = region_from_json(cfg.region)
    else:
        approach = "lqr" if cfg.approach in (None, "all") else cfg.approach
        _, reg = _region(cfg, model, lin, w, cfg.tuning(approach), "ineq" if cfg.method == "both" else cfg.method)
    out = Path(cfg.out)
    jobs = [(model, w, reg, np.asarray(x0, float), cfg.T_p, cfg.dt, cfg.T_max, cfg.t_end) for x0 in cfg.ics]
    results = _pool_map(_simulate_one, jobs, cfg.jobs)
    summary = {"region": region_to_json(reg), "runs": []}
    failed = False
    for i, (x0, (trace, scan)) in enumerate(zip(cfg.ics, results), start=1):
        name = f"P{i}"
        entry = {"ic": name, "x0": list(map(float, x0))}
        if trace is None:
            entry.update(status=f"infeasible for every T_p <= {cfg.T_max:g}", T_p=None)
            summary["runs"].append(entry)
            failed = True
            print(f"{name}: infeasible for every horizon up to T_max={cfg.T_max:g}", file=sys.stderr)
            continue
        header, rows = trace_rows(trace)
        write_csv(out / f"trace_{name}.csv", header, rows)
        dV = np.diff(trace.V)
        lo, hi = model.input_box
        entry.update(
            status=trace.status,
            T_p=trace.T_p,
            final_norm=float(np.linalg.norm(trace.states[-1])),
            max_V_increase=float(dV.max()) if dV.size else 0.0,
            inputs_in_box=bool(np.all(trace.inputs >= lo - 1e-9) and np.all(trace.inputs <= hi + 1e-9)),
            terminal_ok=bool(np.all(trace.terminal_value <= trace.alpha * (1 + 1e-6))),
            cost=trace.cost,
            iterations=int(trace.iterations.sum()),
        )
        summary["runs"].append(entry)
        ok = trace.status == "ok"
        failed |= not ok
        if not ok:
            print(f"{name}: {trace.status}", file=sys.stderr)
        _say(f"{name}: T_p={trace.T_p:g} status={trace.status} |x(end)|={entry['final_norm']:.3e} "
             f"max dV={entry['max_V_increase']:.3e}")
    write_json(out / "simulate_summary.json", summary)
    return EXIT_FAILURE if failed else EXIT_OK


def _horizon_cell(args):
    model, w, reg, x0, dt, T_max = args
    return min_horizon(model, w, reg, np.asarray(x0, float), dt, T_max).T_p_min


def cmd_min_horizon(cfg):
    model, lin, w = _build(cfg)
    approaches = ["ca", "ac", "lqr"] if cfg.approach in (None, "all") else [cfg.approach]
    regions = {}
    for a in approaches:
        _, regions[a] = _region(cfg, model, lin, w, cfg.tuning(a), "ineq" if cfg.method == "both" else cfg.method)
    jobs = [(model, w, regions[a], x0, cfg.dt, cfg.T_max) for a in approaches for x0 in cfg.ics]
    cells = _pool_map(_horizon_cell, jobs, cfg.jobs)
    n_ic = len(cfg.ics)
    header = ["approach"] + [f"P{i + 1}" for i in range(n_ic)]
    rows, table = [], {}
    any_missing = False
    for j, a in enumerate(approaches):
        vals = cells[j * n_ic:(j + 1) * n_ic]
        table[a] = vals
        any_missing |= any(v is None for v in vals)
        rows.append([a] + [f"{v:g}" if v is not None else f"infeasible>{cfg.T_max:g}" for v in vals])
        _say(f"{a:4s} " + " ".join(f"{c:>14s}" for c in rows[-1][1:]))
    out = Path(cfg.out)
    write_csv(out / "min_horizon.csv", header, rows)
    write_json(out / "min_horizon.json", {
        "T_max": cfg.T_max, "dt": cfg.dt, "ics": cfg.ics, "min_horizon": table,
        "regions": {a: region_to_json(r) for a, r in regions.items()},
    })
    if any_missing:
        print(f"some cells are infeasible up to T_max={cfg.T_max:g}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


COMMANDS = {
    "linearize": cmd_linearize,
    "region": cmd_region,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "min-horizon": cmd_min_horizon,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _ic(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad initial condition {text!r}; expected 'x1,x2'")
    return vals


def _grid(text):
    text = text.strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}")


def _param(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k.strip(), json.loads(v)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError(f"bad value in {text!r}")


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, not numerical failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON file of settings")
    common.add_argument("--model", help="cstr2 | linear-test")
    common.add_argument("--param", type=_param, action="append", metavar="KEY=VALUE",
                        help="model parameter override (repeatable)")
    common.add_argument("--approach", choices=["ca", "ac", "lqr", "all"])
    common.add_argument("--kappa", type=float)
    common.add_argument("--rho-x", dest="rho_x", type=float)
    common.add_argument("--rho-u", dest="rho_u", type=float)
    common.add_argument("--method", choices=["norm", "ineq", "both"])
    common.add_argument("--lyapunov-form", dest="lyapunov_form", choices=["standard", "transposed"])
    common.add_argument("--tp", dest="T_p", type=float, help="prediction horizon (default: per-IC minimum)")
    common.add_argument("--dc", dest="dt", type=float, help="control interval")
    common.add_argument("--t-end", dest="t_end", type=float)
    common.add_argument("--t-max", dest="T_max", type=float)
    common.add_argument("--ic", dest="ics", type=_ic, action="append", metavar="X1,X2")
    common.add_argument("--out", help="output directory")
    common.add_argument("--beta", type=float, help="shrink factor for alpha")
    common.add_argument("--samples", type=int, help="angular samples per shell")
    common.add_argument("--seed", type=int)
    common.add_argument("--schedule", choices=["ca", "ac1", "ac2", "lqr1", "lqr2"])
    common.add_argument("--grid", type=_grid, help="comma-separated sweep values")
    common.add_argument("--factor", type=float, help="geometric sweep factor")
    common.add_argument("--cap", type=float, help="largest sweep value")
    common.add_argument("--rho-x-star", dest="rho_x_star", type=float)
    common.add_argument("--region", help="region JSON written by the region command")
    common.add_argument("--jobs", type=int, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="qihmpc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def config_from_args(ns):
    data = {}
    if ns.config:
        data.update(load_config(ns.config))
    for f in dataclasses.fields(RunConfig):
        v = getattr(ns, f.name, None)
        if v is not None and f.name != "params":
            data[f.name] = v
    if ns.param:
        params = dict(data.get("params") or {})
        params.update(dict(ns.param))
        data["params"] = params
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(ns)
        return COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RegionError, DivergenceError, SynthesisError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
