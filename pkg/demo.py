#!/usr/bin/env python3
"""
Demo script for the Prekopa identity verifier
Shows the closed-form separable case, a disk run and a convexity certificate
"""

from fields import make_oracle
from geometry import Disk, Interval, build_mesh
from identity import TERM_NAMES, beta_limit_sweep, certify_convexity, verify_identity


def show_report(report):
    print(f"   • phi(t) = {report.phi:.10g}")
    print(f"   • phi'' by finite differences: {report.phi2_fd:.10g}")
    print(f"   • phi'' by moments:            {report.phi2_moments:.10g}")
    print(f"   • phi'' by decomposition:      {report.phi2_decomposition:.10g}")
    for name in TERM_NAMES:
        print(f"     - {name}: {report.terms[name]:.6e}")


def main():
    print("🌍 Prekopa Identity Verifier Demo")
    print("=" * 50)

    print("\n📊 Separable field e^t on [0, 1], beta = 3, t = 0.3")
    report = verify_identity(Interval(0.0, 1.0), (64,), make_oracle("SeparableExponential", 1), 0.3, 3.0)
    show_report(report)
    print(f"   • phi''/phi = {report.phi2_moments / report.phi:.10f} (closed form 2.25)")

    print("\n📊 Anisotropic convex field on the unit disk, beta = 5, t = 0")
    report = verify_identity(Disk((0.0, 0.0), 1.0), (32, 64), make_oracle("AnisotropicConvex", 2), 0.0, 5.0)
    show_report(report)
    print(f"   • fd vs decomposition: {report.residuals['fd_vs_decomposition']:.3e}")

    print("\n📋 Convex certificate, QuadraticConvex on the disk, beta = 5")
    certificate = certify_convexity("i", make_oracle("QuadraticConvex", 2), Disk((0.0, 0.0), 1.0),
                                   [-0.5, 0.0, 0.5], 5.0, (16, 32))
    for row in certificate.rows:
        status = "✅" if row.passed else "❌"
        print(f"   {status} t={row.t:+.2f}: phi'' = {row.report.phi2_decomposition:.6e}")

    print("\n🤖 Large-beta limit, phi = 1 on [0, 1]")
    mesh = build_mesh(Interval(0.0, 1.0), (64,))
    sweep = beta_limit_sweep(mesh, make_oracle("Constant", 1), 0.0, [1e2, 1e3, 1e4, 1e5])
    print(sweep.table.to_string(index=False))

    if certificate.passed:
        print("\n✅ Demo complete!")
    else:
        print("\n❌ Demo finished with a failed certificate")


if __name__ == "__main__":
    main()
