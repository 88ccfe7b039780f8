#!/usr/bin/env python3
"""
Command-line driver for the Prekopa identity verifier

    python prekopa_cli.py verify  --config run.cfg --out results
    python prekopa_cli.py certify --config run.cfg
    python prekopa_cli.py limit   --config run.cfg --quiet
    python prekopa_cli.py ibp     --config run.cfg --resolution 32 64

Exit codes: 0 every check passed, 1 execution error, 2 verification failure.
"""

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import numpy as np
import pandas as pd

from config_template import FD_CONFIG, SOLVER_CONFIG, TOLERANCES
from errors import ConfigError, DomainError, HypothesisError, MeshResolutionError, StageError
from fields import CATALOG, make_oracle
from geometry import Disk, Interval, build_mesh
from identity import (IDENTITY_NAMES, SUPPLEMENTARY_IDENTITY_NAMES, TERM_NAMES, beta_limit_sweep,
                      certify_convexity, check_certificate_hypotheses, check_ibp_identities,
                      default_time_step, refinement_ratio, solve_instance, stage, verify_identity)

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_FAIL = 2

MODES = ("verify", "certify_i", "certify_ii", "beta_limit", "ibp_check")
SUBCOMMAND_MODES = {
    "verify": ("verify",),
    "certify": ("certify_i", "certify_ii"),
    "limit": ("beta_limit",),
    "ibp": ("ibp_check",),
}
KNOWN_KEYS = {
    "mode", "domain", "domain.a", "domain.b", "domain.center", "domain.radius", "n",
    "oracle", "beta", "beta_list", "limit.kind", "t_values", "t_grid", "resolution", "h_t",
    "fd.richardson", "refine", "solver", "workers", "output",
}
DEFAULT_OUTPUT = "prekopa_results"
# pointwise Cauchy-Schwarz slack on the Hilbert-Schmidt defect
DEFECT_SLACK = 1e-10


def load_tolerances():
    """Default tolerances, overridden by TOLERANCES from a local config.py if there is one"""
    tolerances = dict(TOLERANCES)
    try:
        from config import TOLERANCES as local_tolerances
    except ImportError:
        return tolerances
    tolerances.update(local_tolerances)
    return tolerances


@dataclass(frozen=True)
class RunConfig:
    mode: str
    domain: object
    oracle: object
    resolution: tuple
    t_values: tuple
    beta: float = None
    beta_list: tuple = ()
    limit_kinds: tuple = ("convex", "concave")
    h_t: float = None
    richardson: bool = False
    refine: bool = True
    solver: str = "direct"
    workers: int = 1
    tolerances: dict = field(default_factory=dict)
    output: str = None
    entries: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.domain.dim

    @property
    def fine_resolution(self):
        return tuple(2 * r for r in self.resolution)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _read_entries(text):
    entries = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {number}: empty key or value in {raw.strip()!r}")
        if key in entries:
            raise ConfigError(f"line {number}: duplicate key '{key}'")
        entries[key] = value
    return entries


def _number(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"'{key}' must be a number, got {value!r}") from None


def _numbers(key, value):
    return [_number(key, part.strip()) for part in value.split(",")]


def _integer(key, value):
    number = _number(key, value)
    if not np.isfinite(number) or number != int(number):
        raise ConfigError(f"'{key}' must be an integer, got {value!r}")
    return int(number)


def _boolean(key, value):
    lowered = value.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"'{key}' must be true or false, got {value!r}")


def _require(entries, key, mode):
    if key not in entries:
        raise ConfigError(f"'{key}' is required for mode {mode}")
    return entries[key]


def _parse_domain(entries):
    kind = entries.get("domain")
    try:
        if kind == "interval":
            if "domain.a" not in entries or "domain.b" not in entries:
                raise ConfigError("interval domain needs domain.a and domain.b")
            return Interval(_number("domain.a", entries["domain.a"]), _number("domain.b", entries["domain.b"]))
        if kind == "disk":
            if "domain.radius" not in entries:
                raise ConfigError("disk domain needs domain.radius")
            center = _numbers("domain.center", entries.get("domain.center", "0, 0"))
            return Disk(tuple(center), _number("domain.radius", entries["domain.radius"]))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"'domain' must be interval or disk, got {kind!r}")


def _parse_resolution(domain, values):
    values = tuple(_integer("resolution", v) for v in values)
    if isinstance(domain, Interval):
        if len(values) != 1:
            raise ConfigError(f"interval resolution takes one integer, got {values}")
        return values
    if len(values) == 1:
        return (values[0], 2 * values[0])
    if len(values) != 2:
        raise ConfigError(f"disk resolution takes one or two integers, got {values}")
    return values


def _parse_oracle(entries, dim):
    name = entries.get("oracle")
    if name not in CATALOG:
        raise ConfigError(f"'oracle' must be one of {sorted(CATALOG)}, got {name!r}")
    params = {}
    for key, value in entries.items():
        if key.startswith("oracle."):
            numbers = _numbers(key, value)
            params[key[len("oracle."):]] = numbers[0] if len(numbers) == 1 else tuple(numbers)
    try:
        return make_oracle(name, dim, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None
    except (HypothesisError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _parse_tolerances(entries):
    tolerances = load_tolerances()
    for key, value in entries.items():
        if key.startswith("tol."):
            tolerances[key[len("tol."):]] = _number(key, value)
    return tolerances


def _check_keys(entries, tolerance_names):
    for key in entries:
        if key in KNOWN_KEYS or key.startswith("oracle."):
            continue
        if key.startswith("tol.") and key[len("tol."):] in tolerance_names:
            continue
        raise ConfigError(f"unknown key '{key}'")


def _parse_times(entries, mode):
    has_values, has_grid = "t_values" in entries, "t_grid" in entries
    if has_values == has_grid:
        raise ConfigError(f"exactly one of t_values or t_grid is required for mode {mode}")
    if has_values:
        return tuple(_numbers("t_values", entries["t_values"]))
    grid = _numbers("t_grid", entries["t_grid"])
    if len(grid) != 3:
        raise ConfigError(f"t_grid takes start, stop, count; got {entries['t_grid']!r}")
    start, stop, count = grid
    if count < 1 or count != int(count):
        raise ConfigError(f"t_grid count must be a positive integer, got {count}")
    return tuple(float(t) for t in np.linspace(start, stop, int(count)))


def _check_validity_box(oracle, domain, t_values, h_t, mode):
    for axis, ((lo, hi), (box_lo, box_hi)) in enumerate(zip(domain.bounding_box(), oracle.x_bounds())):
        if lo < box_lo or hi > box_hi:
            raise ConfigError(f"domain must lie inside the oracle validity box (axis {axis}: "
                              f"[{lo}, {hi}] vs [{box_lo}, {box_hi}])")
    t_lo, t_hi = oracle.t_bounds()
    for t in t_values:
        h = 0.0 if mode == "beta_limit" else (default_time_step(t) if h_t is None else h_t)
        if t - 2 * h < t_lo or t + 2 * h > t_hi:
            raise ConfigError(f"t +- 2h_t must stay inside the oracle validity box "
                              f"(t={t}, h_t={h}, box [{t_lo}, {t_hi}])")
        corners = np.array(list(itertools.product(*domain.bounding_box())))
        if np.any(oracle.value(t, corners) <= 0):
            raise ConfigError(f"{oracle.name} is not positive on the domain at t={t}")


def _check_hypotheses(mode, oracle, beta, n):
    if mode in ("verify", "ibp_check"):
        if beta == n:
            raise ConfigError(f"the identity requires beta != n (beta={beta}, n={n})")
        if beta == 0:
            raise ConfigError("the identity requires beta != 0")
    elif mode in ("certify_i", "certify_ii"):
        try:
            check_certificate_hypotheses("i" if mode == "certify_i" else "ii", oracle, beta, n)
        except HypothesisError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(text):
    """Parse and validate a key = value run configuration"""
    entries = _read_entries(text)
    _check_keys(entries, load_tolerances())
    tolerances = _parse_tolerances(entries)

    mode = entries.get("mode")
    if mode not in MODES:
        raise ConfigError(f"'mode' must be one of {MODES}, got {mode!r}")
    domain = _parse_domain(entries)
    n = domain.dim
    if "n" in entries and _integer("n", entries["n"]) != n:
        raise ConfigError(f"n = {entries['n']} does not match the {entries['domain']} dimension {n}")
    oracle = _parse_oracle(entries, n)
    resolution = _parse_resolution(domain, _numbers("resolution", _require(entries, "resolution", mode)))
    t_values = _parse_times(entries, mode)

    h_t = None
    if "h_t" in entries:
        h_t = _number("h_t", entries["h_t"])
        if not h_t > 0:
            raise ConfigError(f"h_t must be positive, got {h_t}")

    beta, beta_list, kinds = None, (), ("convex", "concave")
    if mode == "beta_limit":
        beta_list = tuple(_numbers("beta_list", _require(entries, "beta_list", mode)))
        if any(b <= n for b in beta_list):
            raise ConfigError(f"the large-beta limit requires every beta > n (n={n})")
        if any(b2 <= b1 for b1, b2 in zip(beta_list, beta_list[1:])):
            raise ConfigError("beta_list must be strictly increasing")
        kind = entries.get("limit.kind", "both")
        if kind not in ("convex", "concave", "both"):
            raise ConfigError(f"'limit.kind' must be convex, concave or both, got {kind!r}")
        kinds = ("convex", "concave") if kind == "both" else (kind,)
    else:
        beta = _number("beta", _require(entries, "beta", mode))
        _check_hypotheses(mode, oracle, beta, n)

    _check_validity_box(oracle, domain, t_values, h_t, mode)

    solver = entries.get("solver", SOLVER_CONFIG["method"])
    if solver not in ("direct", "cg"):
        raise ConfigError(f"'solver' must be direct or cg, got {solver!r}")
    workers = _integer("workers", entries["workers"]) if "workers" in entries else SOLVER_CONFIG["workers"]
    if workers < 1:
        raise ConfigError(f"'workers' must be a positive integer, got {workers}")

    return RunConfig(
        mode=mode,
        domain=domain,
        oracle=oracle,
        resolution=resolution,
        t_values=t_values,
        beta=beta,
        beta_list=beta_list,
        limit_kinds=kinds,
        h_t=h_t,
        richardson=_boolean("fd.richardson", entries.get("fd.richardson", str(FD_CONFIG["richardson"]))),
        refine=_boolean("refine", entries.get("refine", "true")),
        solver=solver,
        workers=workers,
        tolerances=tolerances,
        output=entries.get("output"),
        entries=entries,
    )


def with_resolution(config, values):
    return replace(config, resolution=_parse_resolution(config.domain, values))


# ---------------------------------------------------------------------------
# Per-point work (top level so worker processes can import it)
# ---------------------------------------------------------------------------

def _flag(ok):
    return "pass" if ok else "fail"


def _verify_kwargs(config):
    tol = config.tolerances
    return dict(h_t=config.h_t, richardson=config.richardson, solver=config.solver,
                solver_rtol=tol["solver_residual"], bc_tol=tol["bc_relative"], sign_slack=tol["sign_slack"])


def _verify_point(config, t):
    tol = config.tolerances
    coarse = verify_identity(config.domain, config.resolution, config.oracle, t, config.beta,
                             **_verify_kwargs(config))
    row = coarse.as_row()
    detail = {"t": t, "diagnostics": asdict(coarse.diagnostics), "node_extremes": coarse.node_extremes}
    checks = {
        "identity": coarse.headline_residual <= tol["identity_rel"],
        "hs_defect": coarse.residuals["hs_defect_min"] >= -DEFECT_SLACK,
    }
    if config.refine:
        fine = verify_identity(config.domain, config.fine_resolution, config.oracle, t, config.beta,
                               **_verify_kwargs(config))
        ratio = refinement_ratio(coarse.residuals["moments_vs_decomposition"],
                                 fine.residuals["moments_vs_decomposition"], tol["refinement_floor"])
        row["refinement_ratio"] = ratio
        detail["fine_residuals"] = fine.residuals
        checks["refinement"] = ratio >= tol["refinement_ratio"]
    if coarse.sign_certificate:
        checks["sign"] = all(coarse.sign_certificate.values())
    for name, ok in checks.items():
        row[f"{name}_check"] = _flag(ok)
    row["passed"] = _flag(all(checks.values()))
    return row, detail


def _certify_point(config, t):
    tol = config.tolerances
    case = "i" if config.mode == "certify_i" else "ii"
    certificate = certify_convexity(case, config.oracle, config.domain, [t], config.beta, config.resolution,
                                   slack=tol["sign_slack"], h_t=config.h_t, solver=config.solver,
                                   solver_rtol=tol["solver_residual"], bc_tol=tol["bc_relative"])
    certified = certificate.rows[0]
    report = certified.report
    row = {"t": t, "phi": report.phi, "phi2_decomposition": report.phi2_decomposition,
           "phi2_fd": report.phi2_fd}
    row.update(report.terms)
    for name in TERM_NAMES:
        lo, hi = report.node_extremes[name]
        row[f"{name}_node_min"] = lo
        row[f"{name}_node_max"] = hi
    for name, ok in certified.flags.items():
        row[f"sign_{name}"] = _flag(ok)
    row["fd_vs_decomposition"] = report.residuals["fd_vs_decomposition"]
    row["passed"] = _flag(certified.passed)
    detail = {"t": t, "effective_beta": certificate.effective_beta, "diagnostics": asdict(report.diagnostics)}
    return row, detail


def _ibp_residuals(config, t, resolution):
    instance = solve_instance(config.domain, resolution, config.oracle, t, config.beta,
                              config.solver, config.tolerances["solver_residual"])
    with stage("terms", t):
        checks = check_ibp_identities(instance.mesh, instance.state, config.oracle, t, config.beta,
                                      instance.solution, instance.f)
    return {name: check.residual for name, check in checks.items()}


def _ibp_point(config, t):
    tol = config.tolerances
    coarse = _ibp_residuals(config, t, config.resolution)
    row = {"t": t}
    row.update(coarse)
    checks = {name: coarse[name] <= tol["ibp_rel"] for name in IDENTITY_NAMES}
    detail = {"t": t, "residuals": coarse}
    if config.refine:
        fine = _ibp_residuals(config, t, config.fine_resolution)
        detail["fine_residuals"] = fine
        for name in IDENTITY_NAMES:
            ratio = refinement_ratio(coarse[name], fine[name], tol["refinement_floor"])
            row[f"{name}_ratio"] = ratio
            checks[name] = checks[name] and ratio >= tol["refinement_ratio"]
    for name in IDENTITY_NAMES:
        row[f"{name}_check"] = _flag(checks[name])
    row["passed"] = _flag(all(checks.values()))
    return row, detail


def _limit_point(config, t):
    tol = config.tolerances
    with stage("mesh", t):
        mesh = build_mesh(config.domain, config.resolution)
    rows, details = [], []
    for kind in config.limit_kinds:
        with stage("limit", t):
            sweep = beta_limit_sweep(mesh, config.oracle, t, config.beta_list, kind)
        ok = (not sweep.clamped and sweep.decreasing and abs(sweep.final_error) <= tol["limit_error"])
        for record in sweep.table.to_dict("records"):
            rows.append({"t": t, "kind": kind, **record, "passed": _flag(ok)})
        details.append({"t": t, "kind": kind, "target": sweep.target, "final_error": sweep.final_error,
                        "decay_exponent": sweep.decay_exponent, "decreasing": sweep.decreasing,
                        "clamped": sweep.clamped, "passed": ok})
    return rows, details


def _map_points(worker, config):
    """Evaluate ``worker(config, t)`` for every t, in input order"""
    task = partial(worker, config)
    if config.workers > 1 and len(config.t_values) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(task, config.t_values))
    return [task(t) for t in config.t_values]


POINT_WORKERS = {
    "verify": _verify_point,
    "certify_i": _certify_point,
    "certify_ii": _certify_point,
    "ibp_check": _ibp_point,
    "beta_limit": _limit_point,
}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _plain(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


def emit_report(config, rows, details, passed, out_dir):
    """Write <mode>_summary.json and <mode>_table.csv to ``out_dir``"""
    os.makedirs(out_dir, exist_ok=True)
    summary = {
        "mode": config.mode,
        "status": _flag(passed),
        "config": config.entries,
        "n": config.n,
        "resolution": list(config.resolution),
        "fine_resolution": list(config.fine_resolution) if config.refine else None,
        "tolerances": config.tolerances,
        "points": details,
    }
    summary_path = os.path.join(out_dir, f"{config.mode}_summary.json")
    with open(summary_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(_plain(summary), f, indent=2, ensure_ascii=False)
        f.write("\n")

    table_path = os.path.join(out_dir, f"{config.mode}_table.csv")
    table = pd.DataFrame(rows)
    table.to_csv(table_path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    return summary_path, table_path


def _print_rows(config, rows, say):
    for row in rows:
        status = "✅" if row["passed"] == "pass" else "❌"
        if config.mode == "beta_limit":
            say(f"  {status} t={row['t']:g} {row['kind']:8s} beta={row['beta']:<10g} error={row['error']:.3e}")
            continue
        say(f"\n{status} t = {row['t']:g}")
        if config.mode == "verify":
            say(f"  • phi''  fd={row['phi2_fd']:.10g}  moments={row['phi2_moments']:.10g}  "
                f"decomposition={row['phi2_decomposition']:.10g}")
            say(f"  • fd vs decomposition: {row['fd_vs_decomposition']:.3e}")
            if "refinement_ratio" in row:
                say(f"  • refinement ratio: {row['refinement_ratio']:.2f}")
        elif config.mode == "ibp_check":
            for name in IDENTITY_NAMES + SUPPLEMENTARY_IDENTITY_NAMES:
                say(f"  • {name}: {row[name]:.3e}")
        else:
            for name in TERM_NAMES:
                say(f"  • {name}: {row[name]:.6e} ({row[f'sign_{name}']})")
            say(f"  • phi'': {row['phi2_decomposition']:.10g} ({row['sign_phi2']})")


def run(config, out_dir=None, quiet=False):
    """Execute the configured mode for every t and write the reports; returns the exit code"""
    say = (lambda *args: None) if quiet else print
    out_dir = out_dir or config.output or DEFAULT_OUTPUT

    say(f"🔬 PREKOPA IDENTITY CHECK: {config.mode.upper()}")
    say("=" * 40)
    say(f"  • domain: {config.domain}")
    say(f"  • oracle: {config.oracle.name} {config.oracle.params()}")
    say(f"  • resolution: {config.resolution}, {len(config.t_values)} t value(s)")

    try:
        results = _map_points(POINT_WORKERS[config.mode], config)
        rows, details = [], []
        for point_rows, point_details in results:
            if config.mode == "beta_limit":
                rows.extend(point_rows)
                details.extend(point_details)
            else:
                rows.append(point_rows)
                details.append(point_details)
        passed = all(row["passed"] == "pass" for row in rows)
        _print_rows(config, rows, say)
        summary_path, table_path = emit_report(config, rows, details, passed, out_dir)
    except Exception as exc:
        cause = exc.cause if isinstance(exc, StageError) else exc
        if isinstance(cause, MeshResolutionError):
            print(f"❌ FAIL: {exc}")
            return EXIT_FAIL
        print(f"❌ ERROR: {exc}")
        return EXIT_ERROR

    say(f"\n📁 Summary: {summary_path}")
    say(f"📁 Table:   {table_path}")
    if passed:
        print(f"✅ PASS: {config.mode}, {len(rows)} row(s)")
        return EXIT_PASS
    print(f"❌ FAIL: {config.mode}, {sum(row['passed'] != 'pass' for row in rows)} failing row(s)")
    return EXIT_FAIL


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Numerical check of the second-derivative identity for the dimensional Prekopa functional")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("verify", "compare the three phi'' computations"),
                            ("certify", "term-by-term sign certificate (convex or concave case)"),
                            ("limit", "large-beta limit sweep"),
                            ("ibp", "integration-by-parts identity residuals")):
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", required=True, help="key = value run file")
        command.add_argument("--out", default=None, help=f"output directory (default {DEFAULT_OUTPUT})")
        command.add_argument("--resolution", type=int, nargs="+", default=None,
                             help="override the resolution: m (interval) or m_r [m_theta] (disk)")
        command.add_argument("--quiet", action="store_true", help="print only the final status line")
    args = parser.parse_args(argv)

    try:
        with open(args.config, encoding="utf-8") as f:
            config = parse_config(f.read())
        if args.resolution:
            config = with_resolution(config, args.resolution)
        if config.mode not in SUBCOMMAND_MODES[args.command]:
            raise ConfigError(f"mode {config.mode} cannot run under the '{args.command}' command")
    except (OSError, ConfigError) as exc:
        print(f"❌ Configuration error: {exc}")
        return EXIT_ERROR
    return run(config, out_dir=args.out, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
