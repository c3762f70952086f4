"""Command-line entry point: ``tslab <subcommand> [options]``.

Exit status is 0 on success, 2 on invalid arguments or configuration, and 1
when a run violates its convergence policy (a flow that does not converge,
a kernel check outside tolerance).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import critical_points as cp
from . import harness, kernels
from .activations import ERF, RELU, ActivationKind
from .gradient_flow import FlowConfig, classify, init_student, integrate
from .kernels import GaussHermite, KernelSpec
from .population_loss import build_unit_orthonormal_teacher

log = logging.getLogger("tslab")

EXIT_OK, EXIT_POLICY, EXIT_INVALID = 0, 1, 2


def _kernel(args, kind):
    return KernelSpec.parse(kind, args.kernel) if args.kernel else KernelSpec.default(kind)


def _emit_rows(rows, out, kind):
    if out:
        harness.emit_plot_data(rows, kind, out)
        print(f"wrote {len(rows)} rows to {out}")
    else:
        if not rows:
            return
        cols = list(rows[0])
        print("\t".join(cols))
        for r in rows:
            print("\t".join(f"{r[c]:.10g}" if isinstance(r[c], float) else str(r[c]) for c in cols))


def cmd_kernel_check(args):
    r = np.linspace(0.2, 2.0, 10)
    u = np.linspace(-0.95, 0.95, 20)
    R1, R2, U = np.meshgrid(r, r, u, indexing="ij")
    ok = True
    for kind, tol in ((ERF, 1e-10), (RELU, 1e-6)):
        exact = kernels.g(KernelSpec(kind, kernels.Analytic()), R1, R2, U)
        quad = kernels.g(KernelSpec(kind, GaussHermite(80)), R1, R2, U)
        err = float(np.max(np.abs(exact - quad)))
        passed = err <= tol
        ok &= passed
        print(f"{kind}: max |quadrature - analytic| = {err:.3e} (tol {tol:g}) {'ok' if passed else 'FAIL'}")
    for kind in (ERF, RELU):
        mean, se = kernels.mc_oracle(kind, 1.3, 0.7, 0.4, samples=1_000_000, seed=args.seed)
        exact = kernels.g(KernelSpec(kind, kernels.Analytic()), 1.3, 0.7, 0.4)
        passed = abs(mean - exact) <= 3 * se
        ok &= passed
        print(f"{kind}: Monte Carlo {mean:.6f} +- {se:.1e} vs {exact:.6f} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_POLICY


def cmd_one_neuron(args):
    kinds = [ActivationKind.parse(a) for a in args.activation.split(",")]
    rows = harness.run_one_neuron_table(kinds, harness.parse_int_list(args.k or "1-10"))
    _emit_rows(rows, args.out, "one_neuron")
    return EXIT_OK


def cmd_ca_table(args):
    rows = harness.ca_table(args.n, args.k)
    if args.out:
        harness.write_table(args.out, rows, "schema: ca_table v1")
    else:
        _emit_rows(rows, None, None)
    return EXIT_OK


def cmd_fgrid(args):
    kind = ActivationKind.parse(args.activation)
    spec = _kernel(args, kind)
    r_grid = np.linspace(args.r_min, args.r_max, args.points)
    u_grid = np.linspace(args.u_min, args.u_max, args.points)
    F = cp.f_grid(spec, r_grid, u_grid)
    if args.out:
        harness.emit_plot_data((r_grid, u_grid, F), "fgrid", args.out)
        print(f"wrote {F.shape[0]}x{F.shape[1]} grid to {args.out}")
    finite = F[np.isfinite(F)]
    print(f"{kind}: f in [{finite.min():.4g}, {finite.max():.4g}], "
          f"sign change: {bool(finite.min() < 0 < finite.max())}")
    return EXIT_OK


def cmd_flow(args):
    kind = ActivationKind.parse(args.activation)
    spec = _kernel(args, kind)
    if args.n is None or args.k is None:
        raise ValueError("flow needs --n and --k")
    d = args.d if args.d is not None else args.k + 1
    if args.config:
        parser = harness.configparser.ConfigParser()
        parser.read(args.config)
        cfg = harness.flow_config_from_section(
            parser["flow"] if parser.has_section("flow") else {},
            parser["classifier"] if parser.has_section("classifier") else {})
        cfg.seed = args.seed
    else:
        cfg = FlowConfig(seed=args.seed, newton_polish=args.polish)
    teacher = build_unit_orthonormal_teacher(args.k, d, kind)
    rec = integrate(init_student(args.n, d, cfg, kind), teacher, spec, cfg)
    label = classify(rec, teacher, args.n, args.k, cfg.thresholds) if rec.converged else None
    summary = {"n": args.n, "k": args.k, "d": d, "seed": args.seed, "activation": str(kind),
               "final_loss": rec.final_loss, "grad_norm": rec.final_grad_norm,
               "converged": rec.converged, "steps": rec.steps, "label": label,
               "polished": rec.polished, "status": rec.status}
    if args.n < args.k:
        summary["theory_loss"] = harness.theory_loss(args.n, args.k)
    print(json.dumps(summary, indent=2))
    if args.out:
        harness.emit_plot_data(rec, "trajectory", args.out)
    return EXIT_OK if rec.converged else EXIT_POLICY


def cmd_phase_sweep(args):
    cfg = harness.SweepConfig.from_file(args.config)
    if args.out:
        cfg.output_path = args.out
    cells = harness.run_phase_sweep(cfg)
    for row in harness.summarize(cells, cfg.workers):
        print(f"n={row['n']} k={row['k']}: OptCA {row['frac_OptCA']:.2f} "
              f"PnC {row['frac_PerturbedNCopy']:.2f} Other {row['frac_Other']:.2f} "
              f"mean gap {row['mean_gap']:.3g}")
    print(f"records: {cfg.output_path}\nsummary: {cfg.summary_path}")
    return EXIT_OK


def cmd_hessian_scan(args):
    n_values = harness.parse_int_list(args.n or "2-14")
    if args.ratio:
        rows = harness.run_hessian_scan(n_values, ratios=harness.parse_int_list(args.ratio))
    else:
        rows = harness.run_hessian_scan(n_values, offsets=harness.parse_int_list(args.offset or "1"))
    _emit_rows(rows, args.out, "hessian")
    return EXIT_OK


def cmd_emit(args):
    if not args.out:
        raise ValueError("emit needs --out")
    cells = harness.read_records(args.records)
    harness.emit_plot_data(cells, "phase", args.out)
    print(f"wrote {len(cells)} rows to {args.out}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style sweep/flow configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--activation", default="erf",
                        help="erf, relu, tanh, sigmoid, gelu or softplus:<beta>")
    common.add_argument("--out", help="output file")
    common.add_argument("--kernel", help="analytic | quadrature:<nodes> | mc:<samples>")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tslab",
                                     description="Teacher-student population-loss experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kernel-check", parents=[common], help="compare kernel backends")
    p.set_defaults(func=cmd_kernel_check)

    p = sub.add_parser("one-neuron", parents=[common], help="one-neuron optimum table")
    p.add_argument("--k", help="widths, e.g. 1-10")
    p.set_defaults(func=cmd_one_neuron)

    p = sub.add_parser("ca-table", parents=[common], help="copy-average partitions and losses")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_ca_table)

    p = sub.add_parser("fgrid", parents=[common], help="fixed-point function on an (r, u) grid")
    p.add_argument("--r-min", type=float, default=0.01)
    p.add_argument("--r-max", type=float, default=1.0)
    p.add_argument("--u-min", type=float, default=0.01)
    p.add_argument("--u-max", type=float, default=0.99)
    p.add_argument("--points", type=int, default=50)
    p.set_defaults(func=cmd_fgrid)

    p = sub.add_parser("flow", parents=[common], help="single gradient-flow run")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--d", type=int, help="input dimension (default k+1)")
    p.add_argument("--polish", action="store_true", help="enable the terminal Newton polish")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("phase-sweep", parents=[common], help="run a configured sweep")
    p.set_defaults(func=cmd_phase_sweep)

    p = sub.add_parser("hessian-scan", parents=[common],
                       help="min Hessian eigenvalue at optimal CA points")
    p.add_argument("--n", help="student widths, e.g. 2-14")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--offset", help="k = n + offset, e.g. 1,2,3")
    group.add_argument("--ratio", help="k = ratio * n, e.g. 2,3")
    p.set_defaults(func=cmd_hessian_scan)

    p = sub.add_parser("emit", parents=[common], help="phase records -> plot data")
    p.add_argument("records", help="JSONL record file from phase-sweep")
    p.set_defaults(func=cmd_emit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "phase-sweep" and not args.config:
        parser.error("phase-sweep needs --config")
    try:
        return args.func(args)
    except (ValueError, harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
