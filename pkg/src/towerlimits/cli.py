"""Command line front end for experiments, persistence and static plots.

Subcommands: algebra (sequence inversion, norms, envelopes), tower (build and
inspect finite towers), operator (periodicity scans), renewal (iterate
decomposition residuals), verify (limit-law experiments with pass/fail rules).

Exit codes: 0 success, 1 numerical or precondition failure (including failed
acceptance rules), 2 usage or config parse failure.  Configs are flat
key = value files with [section] headers and # comments; unknown keys are
errors.  Every emitted file carries the config hash, and a RunManifest pins
seed, versions and outputs so a run can be reproduced bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, limit_lab
from .errors import NumericalError, PreconditionError
from .limit_lab import ExperimentConfig, IidSurrogate, center_observable
from .renewal import boundary_identities, decompose_iterate
from .seq_algebra import (
    causal_invert,
    circle_invert,
    compute_algebra_constant,
    convolve,
    load_seq,
    ogamma_norm,
    save_seq,
    verify_convolution_envelope,
)
from .tower_core import (
    FiniteTower,
    LsvSystem,
    TowerObservable,
    load_tower,
    observable_identity,
    observable_log_deriv,
    save_tower,
    two_cell_tower,
)
from .transfer_ops import periodicity_scan, save_scan_report

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    """Malformed config file or command line: maps to exit code 2."""


# --- config files ----------------------------------------------------------------


def parse_config(path) -> dict:
    """Flat key = value sections; # comments; unknown sections allowed here,
    unknown keys rejected later by each section consumer."""
    sections: dict = {}
    current = None
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value or [section]")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in sections[current]:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        sections[current][key] = val
    return sections


def config_file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _reject_unknown(sec: dict, allowed: set, where: str) -> None:
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(sorted(unknown))}")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


_SYSTEM_KEYS = {"kind", "alpha", "n_max", "k_density", "tower_file", "two_cell_p"}


def build_system(sec: dict, base_dir: Path):
    _reject_unknown(sec, _SYSTEM_KEYS, "system")
    kind = sec.get("kind", "lsv")
    if kind == "lsv":
        if "alpha" not in sec:
            raise ConfigError("[system] kind=lsv needs alpha")
        kwargs = {}
        if "n_max" in sec:
            kwargs["n_max"] = int(sec["n_max"])
        if "k_density" in sec:
            kwargs["k_density"] = int(sec["k_density"])
        return LsvSystem(float(sec["alpha"]), **kwargs)
    if kind == "iid":
        return IidSurrogate()
    if kind == "tower":
        if "tower_file" in sec:
            return load_tower(base_dir / sec["tower_file"])
        if "two_cell_p" in sec:
            return two_cell_tower(float(sec["two_cell_p"]))
        raise ConfigError("[system] kind=tower needs tower_file or two_cell_p")
    raise ConfigError(f"unknown system kind {kind!r}")


_OBS_KEYS = {"name", "values", "constant", "center"}


def build_observable(sec: dict, system) -> TowerObservable:
    _reject_unknown(sec, _OBS_KEYS, "observable")
    name = sec.get("name", "identity")
    if name == "identity":
        f = observable_identity()
    elif name == "logderiv":
        if not isinstance(system, LsvSystem):
            raise ConfigError("logderiv needs an lsv system")
        f = observable_log_deriv(system.alpha)
    elif name == "zero":
        f = TowerObservable(
            "holder_on_interval",
            lambda x: np.zeros_like(np.asarray(x, dtype=float)),
            mean_removed=True, label="0")
    elif name == "iid_exponential":
        f = limit_lab.iid_exponential_observable()
    elif name == "cellwise":
        if "values" not in sec:
            raise ConfigError("cellwise observable needs values")
        f = TowerObservable(
            "cellwise_constant", np.asarray(_floats(sec["values"])), label="cellwise")
    elif name == "constant":
        c = float(sec.get("constant", "1"))
        f = TowerObservable(
            "holder_on_interval",
            lambda x, _c=c: np.full(np.shape(x), _c, dtype=float),
            mean_removed=(c == 0.0), label=f"const {c}")
    else:
        raise ConfigError(f"unknown observable name {name!r}")
    if _bool(sec.get("center", "false")):
        f = center_observable(system, f)
    return f


_EXPERIMENT_KEYS = {
    "kind", "n_grid", "samples", "seed", "sigma2_source", "sigma2_value",
    "interval", "kappa", "t_grid", "expected_exponent", "rho", "K",
    "scan_t_grid", "gk_orbit",
}

_VERIFY_KINDS = {"clt", "be", "llt", "lattice", "charfn", "identities", "scan"}
_KIND_TO_LAB = {"clt": "clt", "be": "berry_esseen", "llt": "llt",
                "lattice": "lattice_llt", "charfn": "charfn"}


def build_experiment(sections: dict, base_dir: Path, kind: str,
                     seed_override: int | None) -> ExperimentConfig:
    exp = dict(sections.get("experiment", {}))
    _reject_unknown(exp, _EXPERIMENT_KEYS, "experiment")
    system = build_system(sections.get("system", {}), base_dir)
    f = build_observable(sections.get("observable", {}), system)
    kwargs = {
        "system": system,
        "observable": f,
        "n_grid": _ints(exp.get("n_grid", "")),
        "samples": int(exp.get("samples", "1000")),
        "seed": seed_override if seed_override is not None else int(exp.get("seed", "0")),
        "kind": _KIND_TO_LAB[kind],
    }
    if "sigma2_source" in exp:
        kwargs["sigma2_source"] = exp["sigma2_source"]
    if "sigma2_value" in exp:
        kwargs["sigma2_value"] = float(exp["sigma2_value"])
    if "interval" in exp:
        iv = _floats(exp["interval"])
        if len(iv) != 2:
            raise ConfigError("interval needs exactly two numbers")
        kwargs["interval"] = iv
    if "kappa" in exp:
        kwargs["kappa"] = float(exp["kappa"])
    if "t_grid" in exp:
        kwargs["t_grid"] = _floats(exp["t_grid"])
    if "expected_exponent" in exp:
        kwargs["expected_exponent"] = float(exp["expected_exponent"])
    if "rho" in exp:
        kwargs["rho"] = float(exp["rho"])
    if "K" in exp:
        kwargs["K"] = int(exp["K"])
    if "scan_t_grid" in exp:
        text = exp["scan_t_grid"].strip().lower()
        kwargs["scan_t_grid"] = () if text == "none" else _floats(exp["scan_t_grid"])
    if "gk_orbit" in exp:
        kwargs["gk_orbit"] = int(exp["gk_orbit"])
    if "shift_u" in sections:
        kwargs["shift_u"] = build_observable(sections["shift_u"], system)
    if "shift_v" in sections:
        kwargs["shift_v"] = build_observable(sections["shift_v"], system)
    try:
        return ExperimentConfig(**kwargs)
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from exc


# --- acceptance rules ------------------------------------------------------------


def evaluate_rules(rules: dict, summary: dict) -> list:
    """Each rule is `summary_key = <op> args`; returns (key, ok, detail) rows.

    Operators: `<= x`, `>= x`, `== x|true|false`, `in lo,hi` (closed interval),
    `within target,tol` (absolute tolerance).
    """
    results = []
    for key, expr in rules.items():
        if key not in summary:
            raise ConfigError(f"acceptance rule {key!r} matches no report field")
        val = summary[key]
        parts = expr.split(None, 1)
        if len(parts) != 2:
            raise ConfigError(f"acceptance rule {key!r}: expected '<op> args'")
        op, arg = parts
        if op == "<=":
            ok = float(val) <= float(arg)
            detail = f"{val!r} <= {arg}"
        elif op == ">=":
            ok = float(val) >= float(arg)
            detail = f"{val!r} >= {arg}"
        elif op == "==":
            low = arg.strip().lower()
            if low in ("true", "false"):
                ok = bool(val) == (low == "true")
            else:
                ok = float(val) == float(arg)
            detail = f"{val!r} == {arg}"
        elif op == "in":
            lo, hi = _floats(arg)
            ok = lo <= float(val) <= hi
            detail = f"{val!r} in [{lo}, {hi}]"
        elif op == "within":
            target, tol = _floats(arg)
            ok = abs(float(val) - target) <= tol
            detail = f"{val!r} within {target} +- {tol}"
        else:
            raise ConfigError(f"acceptance rule {key!r}: unknown operator {op!r}")
        results.append((key, bool(ok), detail))
    return results


# --- manifest and outputs --------------------------------------------------------


@dataclass
class RunManifest:
    config_path: str
    config_hash: str
    seed: int
    started: str
    finished: str
    versions: dict
    outputs: list


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _versions() -> dict:
    import scipy
    return {"towerlimits": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__}


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _stamp_csv(path: Path, config_hash: str) -> None:
    body = path.read_text(encoding="utf-8")
    path.write_text(f"# config_hash={config_hash}\n{body}", encoding="utf-8")


def _apply_thread_cap(args) -> int:
    cap = args.threads
    if cap is None:
        env = os.environ.get("TOWERLIMITS_THREADS", "")
        cap = int(env) if env.isdigit() else (os.cpu_count() or 1)
    try:  # caps BLAS pools when threadpoolctl is present; otherwise best effort
        import threadpoolctl
        threadpoolctl.threadpool_limits(cap)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(cap))
    return cap


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- plots -----------------------------------------------------------------------


def _write_plot(rep, kind: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ns = np.asarray(rep.n_grid, dtype=float)
    if kind in ("clt", "be"):
        ax.loglog(ns, rep.ks, "o-", label="distance")
        ax.axhline(rep.noise_floor, color="gray", ls="--", label="noise floor")
        ax.axhspan(0, 3 * rep.noise_floor, color="gray", alpha=0.15)
        if kind == "be" and np.isfinite(rep.exponent):
            anchor = rep.ks[rep.window_mask][0] if np.any(rep.window_mask) else rep.ks[0]
            n0 = ns[rep.window_mask][0] if np.any(rep.window_mask) else ns[0]
            ax.loglog(ns, anchor * (ns / n0) ** (-rep.exponent), "r:",
                      label=f"fit n^-{rep.exponent:.3f}")
        ax.set_ylabel("Kolmogorov distance")
    elif kind == "llt":
        ax.errorbar(ns, rep.ratio, yerr=rep.ratio_se, fmt="o-")
        ax.axhline(1.0, color="gray", ls="--")
        ax.set_xscale("log")
        ax.set_ylabel("ratio to target")
    elif kind == "lattice":
        ax.loglog(ns, np.maximum(rep.abs_error, 1e-17), "o-")
        ax.set_ylabel("absolute error")
    elif kind == "charfn":
        for j, t in enumerate(rep.t_grid):
            ax.loglog(ns, np.maximum(rep.deviation[:, j], 1e-17), "o-",
                      label=f"t={t:g}")
        ax.set_ylabel("deviation")
    ax.set_xlabel("n")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# --- subcommands -------------------------------------------------------------


def cmd_algebra(args) -> int:
    out = _out_dir(args)
    if args.algebra_cmd == "invert":
        a = load_seq(args.input)
        if args.side == "causal":
            b = causal_invert(a, args.n_out)
        else:
            b = circle_invert(a, n_out=args.n_out)
        dest = out / (args.out or (Path(args.input).stem + ".inv.seq"))
        save_seq(b, dest)
        conv = convolve(a, b)
        idx = conv.indices
        expect = (idx == 0).astype(float)
        residual = float(np.max(np.abs(conv.entry_norms() - expect)))
        print(f"inverse written to {dest}; convolution residual {residual:.3e}")
        report = {"input": str(args.input), "side": args.side,
                  "n_out": args.n_out, "residual": residual}
        with open(out / (dest.stem + ".report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        return EXIT_OK
    if args.algebra_cmd == "norm":
        a = load_seq(args.input)
        k = compute_algebra_constant(a.gamma)
        print(f"ogamma_norm = {ogamma_norm(a, k):.17g} (gamma={a.gamma}, c={k.c:.6g})")
        return EXIT_OK
    rep = verify_convolution_envelope(args.gamma, args.d, args.t, args.n_max)
    dest = out / (args.out or "envelope.csv")
    with open(dest, "w", encoding="utf-8") as fh:
        fh.write("field,value\n")
        for name in ("gamma", "d_const", "t", "n_max", "c_fit", "min_margin", "argmax_n"):
            fh.write(f"{name},{getattr(rep, name)!r}\n")
    print(f"envelope C={rep.c_fit:.6g}, min margin {rep.min_margin:.3e} -> {dest}")
    return EXIT_OK


def cmd_tower(args) -> int:
    out = _out_dir(args)
    if args.input:
        tower = load_tower(args.input)
    else:
        tower = two_cell_tower(args.two_cell)
    masses = ", ".join(f"{m:.6g}" for m in tower.masses)
    phis = ", ".join(str(p) for p in tower.return_times)
    print(f"tower: {tower.n_cells} cells, {tower.n_states} states; "
          f"masses [{masses}]; return times [{phis}]")
    if args.out:
        dest = out / args.out
        save_tower(tower, dest)
        print(f"saved to {dest}")
    return EXIT_OK


def _parse_t_range(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError("expected --t lo:hi:count")
    lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
    if num < 1 or hi < lo:
        raise ConfigError("bad --t range")
    return np.linspace(lo, hi, num)


def cmd_operator(args) -> int:
    out = _out_dir(args)
    system = LsvSystem(args.alpha)
    if args.f == "logderiv":
        f = center_observable(system, observable_log_deriv(args.alpha))
    elif args.f == "identity":
        f = center_observable(system, observable_identity())
    else:
        f = TowerObservable(
            "holder_on_interval",
            lambda x, _c=args.constant: np.full(np.shape(x), _c, dtype=float),
            mean_removed=(args.constant == 0.0), label=f"const {args.constant}")
    rep = periodicity_scan(system, f, _parse_t_range(args.t), K=args.K,
                           mean_remove=(args.f != "constant"))
    csv_path = out / "scan.csv"
    save_scan_report(rep, csv_path, out / "scan.json")
    print(f"scan: {len(rep.detections)} detections, group {rep.inferred_group}, "
          f"max radius {float(np.max(rep.max_radius)):.6f} -> {csv_path}")
    return EXIT_OK


def cmd_renewal(args) -> int:
    tower = load_tower(args.tower)
    if args.f_values:
        vals = np.asarray(_floats(args.f_values))
    else:
        vals = np.arange(tower.n_states, dtype=float) % 2.0
    residual = max(decompose_iterate(tower, vals, args.t, n)
                   for n in range(1, args.n + 1))
    print(f"iterate decomposition residual over n<={args.n}, t={args.t}: "
          f"{residual:.3e}")
    return EXIT_OK


def _run_identities(sections: dict, base_dir: Path) -> dict:
    system = build_system(sections.get("system", {}), base_dir)
    if not isinstance(system, FiniteTower):
        raise ConfigError("identities need a finite tower system")
    exp = dict(sections.get("experiment", {}))
    _reject_unknown(exp, {"kind", "n_cap", "t_grid", "seed"}, "experiment")
    n_cap = int(exp.get("n_cap", "30"))
    t_list = _floats(exp.get("t_grid", "0,0.37,1.1"))
    vals = None
    if "observable" in sections:
        f = build_observable(sections["observable"], system)
        vals = np.asarray(f.evaluator, dtype=float)
    residual = max(decompose_iterate(system, vals, t, n)
                   for t in t_list for n in range(1, n_cap + 1))
    br = boundary_identities(system, seed=int(exp.get("seed", "0")))
    return {
        "type": "IdentityReport",
        "max_decomposition_residual": residual,
        "max_A_error": br.max_A_error,
        "max_B_error": br.max_B_error,
        "max_C_excess": br.max_C_excess,
    }


def _run_scan(sections: dict, base_dir: Path) -> dict:
    system = build_system(sections.get("system", {}), base_dir)
    if not isinstance(system, LsvSystem):
        raise ConfigError("scan needs an lsv system")
    exp = dict(sections.get("experiment", {}))
    _reject_unknown(exp, {"kind", "t_grid", "K", "mean_remove"}, "experiment")
    if "t_grid" not in exp:
        raise ConfigError("scan needs experiment t_grid")
    f = build_observable(sections.get("observable", {}), system)
    rep = periodicity_scan(
        system, f, _floats(exp["t_grid"]), K=int(exp.get("K", "1024")),
        mean_remove=_bool(exp.get("mean_remove", "true")))
    return {
        "type": "PeriodicityReport",
        "n_detections": len(rep.detections),
        "inferred_group": rep.inferred_group,
        "max_radius": float(np.max(rep.max_radius)),
        "_report": rep,
    }


def cmd_verify(args) -> int:
    out = _out_dir(args)
    sections = parse_config(args.config)
    cfg_hash = config_file_hash(args.config)
    base_dir = Path(args.config).resolve().parent
    kind = args.kind or sections.get("experiment", {}).get("kind", "")
    if kind not in _VERIFY_KINDS:
        raise ConfigError(f"verify kind must be one of {sorted(_VERIFY_KINDS)}, "
                          f"got {kind!r}")
    started = _now()
    outputs = []
    rules = sections.get("acceptance", {})
    seed = args.seed

    if kind in ("identities", "scan"):
        summary = (_run_identities if kind == "identities" else _run_scan)(
            sections, base_dir)
        rep = summary.pop("_report", None)
        summary["config_hash"] = cfg_hash
        json_path = out / f"{kind}.json"
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs.append(str(json_path))
        if rep is not None:
            csv_path = out / f"{kind}.csv"
            save_scan_report(rep, csv_path)
            _stamp_csv(csv_path, cfg_hash)
            outputs.append(str(csv_path))
        used_seed = int(sections.get("experiment", {}).get("seed", "0"))
    else:
        cfg = build_experiment(sections, base_dir, kind, seed)
        runner = {
            "clt": limit_lab.run_clt,
            "be": limit_lab.run_berry_esseen,
            "llt": limit_lab.run_llt,
            "lattice": limit_lab.run_lattice_llt,
            "charfn": limit_lab.run_charfn_compare,
        }[kind]
        rep = runner(cfg)
        summary = limit_lab.report_summary(rep)
        csv_path, json_path = out / f"{kind}.csv", out / f"{kind}.json"
        limit_lab.save_report(rep, csv_path, json_path)
        _stamp_csv(csv_path, rep.provenance.config_hash)
        outputs += [str(csv_path), str(json_path)]
        if args.plot:
            svg_path = out / f"{kind}.svg"
            _write_plot(rep, kind, svg_path)
            outputs.append(str(svg_path))
        used_seed = cfg.seed

    failures = 0
    for key, ok, detail in evaluate_rules(rules, summary):
        print(f"{'PASS' if ok else 'FAIL'} {key}: {detail}")
        failures += 0 if ok else 1
    manifest = RunManifest(
        config_path=str(args.config), config_hash=cfg_hash, seed=used_seed,
        started=started, finished=_now(), versions=_versions(), outputs=outputs)
    outputs.append(str(write_manifest(out, manifest)))
    print(f"verify {kind}: {len(outputs)} files in {out}"
          + (f"; {failures} rule(s) failed" if failures else ""))
    return EXIT_NUMERIC if failures else EXIT_OK


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="towerlimits",
        description="Limit-theorem calculations for slowly mixing systems")
    parser.add_argument("--out-dir", default=".", help="directory for output files")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: TOWERLIMITS_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    alg = sub.add_parser("algebra", help="sequence algebra operations")
    alg_sub = alg.add_subparsers(dest="algebra_cmd", required=True)
    inv = alg_sub.add_parser("invert")
    inv.add_argument("--input", required=True)
    inv.add_argument("--side", choices=("causal", "circle"), default="causal")
    inv.add_argument("--n-out", type=int, default=200)
    inv.add_argument("--out", default=None)
    nrm = alg_sub.add_parser("norm")
    nrm.add_argument("--input", required=True)
    env = alg_sub.add_parser("envelope")
    env.add_argument("--gamma", type=float, required=True)
    env.add_argument("--d", type=float, required=True)
    env.add_argument("--t", type=float, required=True)
    env.add_argument("--n-max", type=int, default=1000)
    env.add_argument("--out", default=None)
    alg.set_defaults(func=cmd_algebra)

    tw = sub.add_parser("tower", help="build or inspect finite towers")
    tw.add_argument("--input", default=None)
    tw.add_argument("--two-cell", type=float, default=0.5)
    tw.add_argument("--out", default=None)
    tw.set_defaults(func=cmd_tower)

    op = sub.add_parser("operator", help="discretized operator diagnostics")
    op_sub = op.add_subparsers(dest="operator_cmd", required=True)
    scan = op_sub.add_parser("scan")
    scan.add_argument("--alpha", type=float, required=True)
    scan.add_argument("--f", choices=("logderiv", "identity", "constant"),
                      default="logderiv")
    scan.add_argument("--constant", type=float, default=1.0)
    scan.add_argument("--t", required=True, help="grid as lo:hi:count")
    scan.add_argument("--K", type=int, default=1024)
    op.set_defaults(func=cmd_operator)

    ren = sub.add_parser("renewal", help="iterate decomposition residuals")
    ren.add_argument("--tower", required=True)
    ren.add_argument("--n", type=int, default=30)
    ren.add_argument("--t", type=float, default=0.0)
    ren.add_argument("--f-values", default=None)
    ren.set_defaults(func=cmd_renewal)

    ver = sub.add_parser("verify", help="run a configured limit-law experiment")
    ver.add_argument("--config", required=True)
    ver.add_argument("--kind", choices=sorted(_VERIFY_KINDS), default=None)
    ver.add_argument("--plot", action="store_true")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        _apply_thread_cap(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PreconditionError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
