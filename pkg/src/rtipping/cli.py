"""Command-line front end.

    rtipping <subcommand> [--config FILE] [--beta ...] [--out DIR] [options]

Parameters come from (lowest to highest precedence) the model defaults, a flat
``key = value`` config file, and command-line flags.  Every run writes its
outputs plus a ``manifest.json`` that records the resolved configuration, so
``rtipping <subcommand> --config <out>/manifest.cfg`` reruns it exactly.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import InvalidParameterError, RTippingError

log = logging.getLogger("rtipping")

OUT_ENV = "RTIPPING_OUT"
DEFAULT_OUT = "rtipping-out"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# config key -> (type, help); model keys map onto ModelParams fields
MODEL_KEYS = {
    "beta": (float, "linear decay rate beta (default 0.15)"),
    "lambda_r": (float, "growth coupling lambda_r (default 4*beta)"),
    "L": (float, "habitat width L (default 25)"),
    "a": (float, "half-displacement a = d/2 (default 15.65)"),
    "r": (float, "shift rate r (default 1)"),
    "Z": (float, "truncation half-length Z (default 150)"),
    "tol_bvp": (float, "collocation residual tolerance (default 1e-8)"),
    "tol_ode": (float, "time-integration absolute tolerance (default 1e-8)"),
    "tol_newton": (float, "Newton tolerance for fixed points (default 1e-10)"),
}


def _floats(text: str):
    return [float(x) for x in str(text).replace(",", " ").split()]


RUN_KEYS = {
    "kind": (str, "pulse kind: stable, unstable, trivial or all"),
    "n_scan": (int, "spectral scan grid size (default 400)"),
    "t_end": (float, "pullback horizon (default 1000)"),
    "snapshots": (_floats, "comma-separated snapshot times for pullback field output"),
    "r_lo": (float, "lower rate of a tracking/extinct bracket"),
    "r_hi": (float, "upper rate of a tracking/extinct bracket"),
    "tol_r": (float, "bisection bracket width"),
    "d_values": (_floats, "comma-separated displacements d = 2a for the diagram"),
    "r_max": (float, "largest probed rate (default 50)"),
    "refine": (lambda s: str(s).lower() in ("1", "true", "yes", "on"), "also run the miss-function refinement"),
}

DEFAULT_BRACKET = (0.5, 2.0)
DEFAULT_D = (28.0, 32.0, 36.0, 40.0, 50.0, 60.0)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def read_config(path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment, blank lines ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in MODEL_KEYS and key not in RUN_KEYS and key not in ("workers", "out"):
            raise UsageError(f"{path}:{n}: unknown key '{key}'")
        out[key] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    conv = (MODEL_KEYS.get(key) or RUN_KEYS.get(key) or (str, ""))[0]
    if key == "workers":
        conv = int
    try:
        return conv(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid value for '{key}': {value!r} ({exc})") from None


def resolve(args) -> dict:
    """Merge defaults, config file and flags into one flat dictionary."""
    raw = read_config(args.config) if args.config else {}
    for key in list(MODEL_KEYS) + list(RUN_KEYS) + ["workers", "out"]:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    cfg = {k: _coerce(k, v) for k, v in raw.items()}
    cfg.setdefault("out", os.environ.get(OUT_ENV, DEFAULT_OUT))
    cfg.setdefault("workers", os.cpu_count() or 1)
    return cfg


def model_params(cfg: dict):
    from .model import ModelParams
    kw = {k: cfg[k] for k in MODEL_KEYS if cfg.get(k) is not None}
    try:
        return ModelParams(**kw)
    except InvalidParameterError as exc:
        raise UsageError(f"invalid model parameters: {exc}") from None


# ---------------------------------------------------------------- output


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17e}"
    return "" if x is None else str(x)


class Writer:
    """Collects outputs in memory and commits them atomically into ``out``."""

    def __init__(self, out: str, command: str, cfg: dict):
        self.out = Path(out)
        self.command = command
        self.cfg = cfg
        self.files = {}

    def csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
        self.files[name] = buf.getvalue()

    def json(self, name, obj):
        self.files[name] = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"

    def commit(self, status: str, summary: dict, started: float):
        manifest = {
            "command": self.command,
            "config": {k: v for k, v in self.cfg.items() if k != "out"},
            "status": status,
            "summary": summary,
            "files": sorted(self.files),
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "elapsed_s": round(time.time() - started, 3),
        }
        self.json("manifest.json", manifest)
        self.files["manifest.cfg"] = "".join(
            f"{k} = {_cfg_value(v)}\n" for k, v in sorted(manifest["config"].items()) if v is not None)
        self.out.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            _atomic_write(self.out / name, text)
        return manifest


def _cfg_value(v):
    if isinstance(v, (list, tuple)):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if hasattr(obj, "value"):  # enums
        return obj.value
    return obj


# ---------------------------------------------------------------- commands


def cmd_pulse(cfg, w: Writer):
    from .pulses import compute_pulse, pointwise_order
    p = model_params(cfg)
    kinds = ("stable", "unstable") if cfg.get("kind", "all") == "all" else (cfg["kind"],)
    summary = {}
    pulses = {}
    for kind in kinds:
        pl = compute_pulse(kind, p)
        pulses[kind] = pl
        w.csv(f"pulse_{kind}.csv", ["z", "u", "v"], zip(pl.z, pl.u, pl.v))
        summary[kind] = {"max_u": float(pl.u.max()), "xi": pl.xi, "nodes": len(pl.z), "residual": pl.residual}
    if len(pulses) == 2:
        summary["order"] = pointwise_order(pulses["stable"], pulses["unstable"])
    w.json("pulse.json", summary)
    return summary


def cmd_spectrum(cfg, w: Writer):
    from .pulses import compute_pulse
    from .spectrum import dense_oracle, find_eigenvalues
    p = model_params(cfg)
    kind = cfg.get("kind", "all")
    kinds = ("trivial", "unstable", "stable") if kind == "all" else (kind,)
    summary = {}
    for k in kinds:
        pl = compute_pulse(k, p)
        rep = find_eigenvalues(pl, n_scan=cfg.get("n_scan", 400))
        d = rep.to_dict()
        d["dense_oracle"] = dense_oracle(pl, lam_min=rep.window[0])
        summary[k] = d
        w.csv(f"spectrum_scan_{k}.csv", ["lambda", "rotation"], rep.scan)
    w.json("spectrum.json", summary)
    return summary


def cmd_pullback(cfg, w: Writer):
    from . import mol
    from .pullback import T_END, compute_pullback, prepare
    p = model_params(cfg)
    setup = prepare(p)
    run = compute_pullback(setup, p.r, t_end=cfg.get("t_end", T_END))
    sysr = setup.system.with_rate(p.r)
    w.csv("pullback_summary.csv", ["t", "gamma", "l2_norm", "max_u"], mol.summary_rows(run.trajectory, sysr))
    times = cfg.get("snapshots")
    if times:
        w.csv("pullback_snapshots.csv", ["t", "z", "u"], mol.snapshot_rows(run.trajectory, sysr, times))
    d1, d2 = setup.thresholds()
    summary = {"r": p.r, "classification": run.classification.value, "dist_stable": run.dist_stable,
               "norm_end": run.norm_end, "delta1": d1, "delta2": d2, "t_start": run.t_start,
               "t_end": run.t_end, "sup_error": run.sup_error, "steps": run.trajectory.stats}
    w.json("pullback.json", summary)
    return summary


def _bracket(cfg):
    return cfg.get("r_lo", DEFAULT_BRACKET[0]), cfg.get("r_hi", DEFAULT_BRACKET[1])


def cmd_critical_rate(cfg, w: Writer):
    from .critical import bisect_rc, bracket_invariant_ok, refine_from_bisection
    from .pullback import prepare
    p = model_params(cfg)
    setup = prepare(p)
    res = bisect_rc(setup, *_bracket(cfg), tol_r=cfg.get("tol_r", 1e-4))
    w.csv("bisection_history.csv", ["r", "outcome"], [(r, o.value) for r, o in res.history])
    summary = {"d": res.d, "r_c": res.r_c, "r_lo": res.r_lo, "r_hi": res.r_hi, "method": "bisection",
               "bracket_invariant": bracket_invariant_ok(res.history)}
    if cfg.get("refine"):
        het = refine_from_bisection(setup, res)
        summary.update(method="miss-function", r_c_refined=het.r_c, miss_slope=het.miss_slope)
    w.json("critical_rate.json", summary)
    return summary


def cmd_diagram(cfg, w: Writer):
    from .critical import bracket_invariant_ok, sweep_diagram
    p = model_params(cfg)
    dv = cfg.get("d_values") or list(DEFAULT_D)
    diag = sweep_diagram(p, dv, r_max=cfg.get("r_max", 50.0), tol_r=cfg.get("tol_r", 1e-3),
                         workers=int(cfg["workers"]))
    # no-tipping rows carry r_c = inf
    rows = [(e.d, np.inf if e.status == "no-tipping" else (np.nan if e.r_c is None else e.r_c),
             e.r_lo, e.r_hi, e.status) for e in diag.entries]
    w.csv("diagram.csv", ["d", "r_c", "bracket_lo", "bracket_hi", "status"], rows)
    summary = {"entries": [{"d": e.d, "r_c": e.r_c, "r_lo": e.r_lo, "r_hi": e.r_hi, "status": e.status,
                            "message": e.message, "bracket_invariant": bracket_invariant_ok(e.history),
                            "history": [(r, o.value) for r, o in e.history]} for e in diag.entries],
               "r_max": diag.r_max, "tol_r": diag.tol_r}
    w.json("diagram.json", summary)
    errors = [e for e in diag.entries if e.status == "error"]
    if errors:
        raise _PartialFailure(summary, f"{len(errors)} diagram entries failed")
    return summary


class _PartialFailure(RTippingError):
    def __init__(self, summary, msg):
        super().__init__(msg)
        self.summary = summary


def _heteroclinic(cfg):
    from .critical import bisect_rc, refine_heteroclinic
    from .pullback import prepare
    p = model_params(cfg)
    setup = prepare(p)
    res = bisect_rc(setup, *_bracket(cfg), tol_r=cfg.get("tol_r", 1e-4))
    het = refine_heteroclinic(setup, res.r_lo, res.r_hi)
    return setup, res, het


def cmd_heteroclinic(cfg, w: Writer):
    from . import mol
    setup, res, het = _heteroclinic(cfg)
    sysr = setup.system.with_rate(het.r_c)
    w.csv("heteroclinic_summary.csv", ["t", "gamma", "l2_norm", "max_u"], mol.summary_rows(het.trajectory, sysr))
    summary = dict(het.to_dict(), r_c_bisection=res.r_c, bisection_bracket=[res.r_lo, res.r_hi])
    w.json("heteroclinic.json", summary)
    return summary


def cmd_transversality(cfg, w: Writer):
    from .critical import transversality
    setup, res, het = _heteroclinic(cfg)
    tv = transversality(het, setup)
    summary = {"inner_product": tv.inner_product, "degenerate": tv.degenerate, "raw_norm": tv.raw_norm,
               "miss_slope": het.miss_slope, "sign_matches_miss_slope": bool(np.sign(tv.inner_product)
                                                                           == np.sign(het.miss_slope)),
               "heteroclinic": het.to_dict()}
    w.json("transversality.json", summary)
    return summary


def verify_hypotheses(p) -> dict:
    """H1-H5 at parameters ``p``; returns {name: {"pass": bool, ...}}."""
    from .model import ShiftField
    from .pulses import compute_pulse, pointwise_order
    from .spectrum import find_eigenvalues
    out = {}
    pulses = {k: compute_pulse(k, p) for k in ("trivial", "unstable", "stable")}
    order = pointwise_order(pulses["stable"], pulses["unstable"])
    pos = pointwise_order(pulses["unstable"], pulses["trivial"], interior_only=True)
    out["H1"] = {"pass": bool(order["verdict"] and pos["verdict"]), "stable_above_edge": order,
                 "edge_above_zero": pos}
    for k, h in (("trivial", "H2"), ("unstable", "H3"), ("stable", "H4")):
        rep = find_eigenvalues(pulses[k])
        out[h] = {"pass": bool(rep.verdicts[h]), "eigenvalues": rep.eigenvalues,
                  "essential_boundary": rep.essential_boundary}
    sf = ShiftField(p.a)
    g = np.linspace(-p.a, p.a, 401)
    vals = sf.g(g)
    h5 = {"g_ends": [float(sf.g(-p.a)), float(sf.g(p.a))], "dg_ends": [float(sf.dg(-p.a)), float(sf.dg(p.a))],
          "g_min_interior": float(vals[1:-1].min())}
    h5["pass"] = bool(abs(vals[0]) < 1e-12 and abs(vals[-1]) < 1e-12 and vals[1:-1].min() > 0
                      and h5["dg_ends"][0] > 0 > h5["dg_ends"][1])
    out["H5"] = h5
    return out


def cmd_verify(cfg, w: Writer):
    p = model_params(cfg)
    report = verify_hypotheses(p)
    w.json("verify.json", report)
    w.csv("verify.csv", ["hypothesis", "pass"], [(k, v["pass"]) for k, v in report.items()])
    for k, v in report.items():
        print(f"{k}: {'PASS' if v['pass'] else 'FAIL'}")
    if not all(v["pass"] for v in report.values()):
        raise _PartialFailure(report, "hypothesis check failed: "
                              + ", ".join(k for k, v in report.items() if not v["pass"]))
    return report


COMMANDS = {
    "pulse": (cmd_pulse, "steady pulses u1* (edge) and u2* (base)", ("kind",)),
    "spectrum": (cmd_spectrum, "point spectrum of the pulses", ("kind", "n_scan")),
    "pullback": (cmd_pullback, "pullback attractor at rate r and its classification", ("t_end", "snapshots")),
    "critical-rate": (cmd_critical_rate, "bisection for the critical rate", ("r_lo", "r_hi", "tol_r", "refine")),
    "diagram": (cmd_diagram, "R-tipping diagram r_c(d)", ("d_values", "r_max", "tol_r")),
    "heteroclinic": (cmd_heteroclinic, "critical-rate heteroclinic via the miss function",
                     ("r_lo", "r_hi", "tol_r")),
    "transversality": (cmd_transversality, "transversality inner product at r_c", ("r_lo", "r_hi", "tol_r")),
    "verify": (cmd_verify, "check hypotheses H1-H5", ()),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="flat 'key = value' file; flags override it")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    g.add_argument("--workers", type=int, help="concurrent evaluations (default: available cores)")
    g.add_argument("-v", "--verbose", action="store_true")
    m = common.add_argument_group("model parameters (config keys in brackets)")
    for key, (_, help_) in MODEL_KEYS.items():
        m.add_argument(f"--{key.replace('_', '-')}", dest=key, help=f"{help_} [{key}]")
    parser = argparse.ArgumentParser(prog="rtipping", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="Exit codes: 0 success, 2 usage error, 3 numerical failure.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, help_, keys) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        for key in keys:
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, help=f"{RUN_KEYS[key][1]} [{key}]")
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = resolve(args)
        model_params(cfg)
    except (UsageError, OSError) as exc:
        print(f"rtipping: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    fn = COMMANDS[args.command][0]
    w = Writer(cfg["out"], args.command, cfg)
    try:
        summary = fn(cfg, w)
    except UsageError as exc:
        print(f"rtipping: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _PartialFailure as exc:
        w.commit("failed", exc.summary, started)
        print(f"rtipping {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RTippingError as exc:
        w.commit("failed", {"error": type(exc).__name__, "message": str(exc)}, started)
        print(f"rtipping {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    w.commit("ok", summary, started)
    print(f"wrote {len(w.files)} files to {w.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
