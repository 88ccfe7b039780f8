#!/usr/bin/env python3
"""
Refinement Study - observed convergence orders of the Neumann solver and of the identity checks
"""

import argparse
import os

import numpy as np
import pandas as pd

from elliptic import (apply_strong_operator, assemble, manufactured_solution_error, solve_neumann,
                      strong_residuals)
from fields import make_oracle
from geometry import Disk, Interval, build_mesh
from identity import IDENTITY_NAMES, check_ibp_identities, solve_instance, verify_identity
from measure import build_measure

DISK_LEVELS = [(16, 32), (32, 64), (64, 128)]
INTERVAL_LEVELS = [(32,), (64,), (128,), (256,)]


def observed_order(table, column, h_column="h"):
    """Slope of log(error) against log(h) over the rows with a positive error"""
    data = table[table[column] > 0]
    if len(data) < 2:
        return float("nan")
    return float(np.polyfit(np.log(data[h_column]), np.log(data[column]), 1)[0])


def pairwise_ratios(table, column):
    values = table[column].to_numpy()
    return values[:-1] / values[1:]


def disk_manufactured(points):
    """f = r cos(theta) with u = (r^3 / 8 - 3 r / 8) cos(theta), du/dr = 0 at r = 1"""
    x, y = points[:, 0], points[:, 1]
    r2 = x * x + y * y
    return x, x * (r2 / 8.0 - 3.0 / 8.0)


def interval_manufactured(points):
    """f = cos(pi x) with u = -cos(pi x) / pi^2 on [0, 1]"""
    x = points[:, 0]
    return np.cos(np.pi * x), -np.cos(np.pi * x) / np.pi ** 2


def neumann_study(domain, levels, manufactured):
    """Manufactured-solution errors with phi = 1 at each resolution"""
    print(f"\n🧮 NEUMANN SOLVER: {type(domain).__name__.upper()}")
    print("=" * 40)

    oracle = make_oracle("Constant", domain.dim)
    rows = []
    for resolution in levels:
        mesh = build_mesh(domain, resolution)
        state = build_measure(mesh, oracle, 0.0, 3.0)
        grid_f, _ = manufactured(mesh.grid.nodes)
        f, exact = manufactured(mesh.interior_nodes)
        sol = solve_neumann(assemble(mesh, state), grid_f, state)
        errors = manufactured_solution_error(mesh, state, sol, exact)
        strong = apply_strong_operator(mesh, state, oracle, 0.0, 3.0, sol)
        outside, core = strong_residuals(mesh, strong, f)
        rows.append({
            "resolution": "x".join(str(r) for r in resolution),
            "h": mesh.spacing[0],
            "l2": errors["l2"],
            "l2_mu": errors["l2_mu"],
            "strong_residual": outside,
            "core_residual": core,
            "bc_residual": sol.diagnostics.bc_residual,
        })
        print(f"  • {rows[-1]['resolution']:>8s}: L2 error {errors['l2']:.3e}, "
              f"max |L u - f| {rows[-1]['strong_residual']:.3e}")

    table = pd.DataFrame(rows)
    for column in ("l2", "strong_residual"):
        print(f"  📈 observed order ({column}): {observed_order(table, column):.2f}")
    return table


def identity_study(domain, levels, oracle, t, beta):
    """Spread between the moment formula and the four-term decomposition, and the
    integration-by-parts residuals, under refinement"""
    print(f"\n🔍 IDENTITY: {oracle.name}, beta={beta}, t={t}")
    print("=" * 40)

    rows = []
    for resolution in levels:
        report = verify_identity(domain, resolution, oracle, t, beta)
        instance = solve_instance(domain, resolution, oracle, t, beta)
        checks = check_ibp_identities(instance.mesh, instance.state, oracle, t, beta,
                                      instance.solution, instance.f)
        row = {
            "resolution": "x".join(str(r) for r in resolution),
            "h": instance.mesh.spacing[0],
            "moments_vs_decomposition": report.residuals["moments_vs_decomposition"],
            "fd_vs_decomposition": report.residuals["fd_vs_decomposition"],
        }
        row.update({name: checks[name].residual for name in IDENTITY_NAMES})
        rows.append(row)
        print(f"  • {row['resolution']:>8s}: spread {row['moments_vs_decomposition']:.3e}")

    table = pd.DataFrame(rows)
    for column in ("moments_vs_decomposition",) + IDENTITY_NAMES:
        ratios = ", ".join(f"{r:.2f}" for r in pairwise_ratios(table, column))
        print(f"  📈 {column}: order {observed_order(table, column):.2f} (ratios {ratios})")
    return table


def main(argv=None):
    parser = argparse.ArgumentParser(description="Convergence orders of the Prekopa identity verifier")
    parser.add_argument("--out", default="refinement_results", help="directory for the CSV tables")
    args = parser.parse_args(argv)

    print("🎯 REFINEMENT STUDY")
    print("=" * 50)

    tables = {
        "neumann_disk": neumann_study(Disk((0.0, 0.0), 1.0), DISK_LEVELS, disk_manufactured),
        "neumann_interval": neumann_study(Interval(0.0, 1.0), INTERVAL_LEVELS, interval_manufactured),
        "identity_disk": identity_study(Disk((0.0, 0.0), 1.0), DISK_LEVELS,
                                        make_oracle("AnisotropicConvex", 2), 0.0, 5.0),
        "identity_interval": identity_study(Interval(0.0, 1.0), INTERVAL_LEVELS,
                                            make_oracle("QuadraticConvex", 1), 0.2, 3.0),
    }

    os.makedirs(args.out, exist_ok=True)
    for name, table in tables.items():
        path = os.path.join(args.out, f"{name}.csv")
        table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        print(f"✅ Saved {path}")


if __name__ == "__main__":
    main()
