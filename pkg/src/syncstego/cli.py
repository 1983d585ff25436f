"""Command-line entry point.

Exit codes: 0 success, 1 validation/format error, 2 numeric error, 3 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import covmodel, devpipe, formats, lattice, report, syncembed
from .costmap import CostFormatError, CostMap, InfeasiblePayloadError, NumericError
from .covmodel import CorrelationModel, DegenerateDataError, ModelFormatError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _grid(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad payload grid {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("payload grid is empty")
    if any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("payloads must be > 0")
    return vals


def _payload(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("payload must be > 0")
    return v


def _write_json(path, obj):
    formats.atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _check_inputs(*paths):
    for p in paths:
        if p is not None and str(p) != "none" and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


def _check_outputs(*paths):
    for p in paths:
        if p is not None and not Path(p).resolve().parent.is_dir():
            raise UsageError(f"output directory does not exist: {Path(p).parent}")


# ------------------------------------------------------------------ loaders


def load_model(spec) -> CorrelationModel:
    if spec is None or spec == "none":
        return CorrelationModel()
    return formats.read_corr(spec)


def load_cover_and_costs(cover_path, costs_path):
    cover = formats.read_qdct(cover_path)
    if costs_path is None:
        return cover, CostMap.quant_proportional(cover)
    costs = formats.read_cost(costs_path)
    if costs.rho.shape[:2] != cover.blocks_shape:
        raise formats.FormatError(
            f"dimension mismatch: {costs_path} is {8 * costs.rho.shape[0]}x{8 * costs.rho.shape[1]}, "
            f"{cover_path} is {cover.height}x{cover.width}")
    return cover, costs


def _q(cover, force_q1):
    return np.ones((8, 8)) if force_q1 else cover.qtable.astype(float)


# ------------------------------------------------------------------ commands


def cmd_make_cover(a):
    _check_outputs(a.out, a.costs_out)
    noise = devpipe.NoiseParams(mu=a.mu, a=a.noise_a, b=a.noise_b)
    cover = devpipe.make_cover(a.size, seed=a.seed, quality=a.quality, noise=noise)
    formats.write_qdct(a.out, cover)
    if a.costs_out:
        costs = CostMap.unit(cover.coefficients.shape) if a.cost_model == "unit" \
            else CostMap.quant_proportional(cover)
        formats.write_cost(a.costs_out, costs)
    print(f"cover {cover.height}x{cover.width}, nzAC={cover.nzac()} -> {a.out}")
    return EXIT_OK


def cmd_estimate_cov(a):
    _check_outputs(a.out, a.report)
    if a.images < 2:
        raise ValidationError(f"need >= 2 samples (images), got {a.images}")
    noise = devpipe.NoiseParams(mu=a.mu, a=a.noise_a, b=a.noise_b)
    t0 = time.perf_counter()
    corr = covmodel.estimate_correlation(a.images, a.size, noise, a.seed, a.threads, a.downscale)
    model = covmodel.sparsify(corr, a.threshold)
    st = covmodel.validate_structure(model, corr)
    formats.write_corr(a.out, model)
    d = st.to_dict()
    d.update(images=a.images, size=a.size, threshold=a.threshold, seed=a.seed, entries=len(model),
             noise={"mu": noise.mu, "a": noise.a, "b": noise.b}, downscale=a.downscale,
             intra_residual_full=covmodel.reorder_to_lattices(corr)[1],
             table_support_fraction=covmodel.table_support_fraction(model, lattice.load_neighbor_tables()))
    if a.report:
        _write_json(a.report, d)
    print(f"{len(model)} entries retained at |rho| >= {a.threshold}; "
          f"canonical-count modes {st.matching_modes}/64; residual {d['intra_residual_full']:.4f}; "
          f"max diagonal-block |rho| {st.max_diagonal_rho:.4f} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_embed(a):
    _check_inputs(a.cover, a.costs, a.model)
    _check_outputs(a.out, a.changes, a.report, a.lattice_csv, a.pmf_diff)
    cover, costs = load_cover_and_costs(a.cover, a.costs)
    model = load_model(a.model)
    q = _q(cover, a.force_q1)
    pmf, cmap, rep, realized = syncembed.synchronized_embed(costs, cover, model, None, a.payload, a.seed, q,
                                                            a.threads)
    formats.write_qdct(a.out, cmap.apply(cover))
    if a.changes:
        formats.write_chg(a.changes, cmap.changes, cmap.latents, q)
    if a.report:
        _write_json(a.report, rep.to_dict(include_runtime=a.timing))
    if a.lattice_csv:
        report.write_lattice_csv(a.lattice_csv, rep)
    if a.pmf_diff:
        report.write_matrix_csv(a.pmf_diff, report.change_probability_difference(realized, pmf))
    print(f"H_in={rep.H_in:.6f} H_out={rep.H_out:.6f} drop={rep.drop:.6f} bits/nzAC "
          f"(+1: {rep.n_plus}, -1: {rep.n_minus}, {rep.runtime_s:.2f}s)")
    return EXIT_OK


def cmd_calibrate(a):
    _check_inputs(*a.cover, a.costs, a.model)
    _check_outputs(a.out, a.pmf_diff)
    if a.costs and len(a.cover) > 1:
        raise UsageError("--costs applies to a single --cover")
    model = load_model(a.model)
    tables = lattice.load_neighbor_tables()
    plan = syncembed.SyncPlan(model, tables)
    rows = []
    diff = None
    for path in a.cover:
        cover, costs = load_cover_and_costs(path, a.costs)
        sched = lattice.build_schedule(cover.blocks_shape[1], cover.blocks_shape[0], tables)
        q = _q(cover, a.force_q1)
        for h in a.grid:
            cal = syncembed.calibrate_payload(costs, cover, model, tables, h, a.seed, q, a.threads, sched, plan)
            rows.append(report.sweep_row(Path(path).name, cal))
            if a.pmf_diff and diff is None:
                diff = report.change_probability_difference(cal.pmf_sync, cal.pmf_baseline)
            print(f"{Path(path).name} H_in={cal.H_in:.4f} H_out={cal.H_out:.6f} drop={cal.H_in - cal.H_out:.6f}")
    report.write_sweep_csv(a.out, rows)
    if a.pmf_diff:
        report.write_matrix_csv(a.pmf_diff, diff)
    return EXIT_OK


def cmd_validate_tables(a):
    if a.tables:
        _check_inputs(a.tables)
    text = Path(a.tables).read_text() if a.tables else None
    table = lattice.load_neighbor_tables(text, validate=True)
    if a.dump:
        for i, n in enumerate(table.counts()):
            print(f"lattice {i}: {n}")
    else:
        print("neighbour tables OK: " + " ".join(str(n) for n in table.counts()))
    return EXIT_OK


def cmd_report(a):
    _check_inputs(a.sweep, a.pmf_diff)
    rows = report.read_sweep_csv(a.sweep) if a.sweep else None
    diff = np.loadtxt(a.pmf_diff, delimiter=",", ndmin=2) if a.pmf_diff else None
    if rows is None and diff is None:
        raise UsageError("nothing to render: give --sweep and/or --pmf-diff")
    for p in report.render(a.out, rows, diff, a.format):
        print(p)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="syncstego", description="Synchronized embedding simulation for JPEG-domain costs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True, threads=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if threads:
            sp.add_argument("--threads", type=int, default=1)

    def noise(sp, a):
        sp.add_argument("--mu", type=float, default=2.0**12)
        sp.add_argument("--noise-a", type=float, default=a)
        sp.add_argument("--noise-b", type=float, default=0.0)

    sp = sub.add_parser("make-cover", help="write a synthetic QDCT cover (and optional COST map)")
    common(sp, threads=False)
    noise(sp, 1.0)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--quality", type=int, default=None, help="JPEG quality for the qtable (default q=1)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--costs-out", default=None)
    sp.add_argument("--cost-model", choices=("quant", "unit"), default="quant")
    sp.set_defaults(func=cmd_make_cover)

    sp = sub.add_parser("estimate-cov", help="estimate and sparsify DCT correlations from synthetic RAW frames")
    common(sp)
    noise(sp, 0.01)
    sp.add_argument("--images", type=int, default=200)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--downscale", type=float, default=2.0)
    sp.add_argument("--threshold", type=float, default=covmodel.DEFAULT_THRESHOLD)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", default=None, help="structure report JSON")
    sp.set_defaults(func=cmd_estimate_cov)

    sp = sub.add_parser("embed", help="synchronized embedding of one cover")
    common(sp)
    sp.add_argument("--cover", required=True)
    sp.add_argument("--costs", default=None, help="COST file (default: quant-proportional)")
    sp.add_argument("--model", default="none", help="CORR file or 'none'")
    sp.add_argument("--payload", type=_payload, required=True, help="bits per nzAC")
    sp.add_argument("--force-q1", action="store_true")
    sp.add_argument("--out", required=True, help="stego QDCT")
    sp.add_argument("--changes", default=None, help="CHG_ change map")
    sp.add_argument("--report", default=None, help="report JSON")
    sp.add_argument("--timing", action="store_true", help="include runtime in the report")
    sp.add_argument("--lattice-csv", default=None)
    sp.add_argument("--pmf-diff", default=None, help="CSV of P(change) sync minus input")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("calibrate", help="payload sweep: H_in -> H_out and matched baseline")
    common(sp)
    sp.add_argument("--cover", required=True, nargs="+")
    sp.add_argument("--costs", default=None)
    sp.add_argument("--model", default="none")
    sp.add_argument("--grid", type=_grid, default=[round(0.1 * k, 1) for k in range(1, 11)])
    sp.add_argument("--force-q1", action="store_true")
    sp.add_argument("--out", required=True, help="sweep CSV")
    sp.add_argument("--pmf-diff", default=None, help="CSV of P(change) sync minus baseline (first run)")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("validate-tables", help="check the neighbour-table asset")
    sp.add_argument("--tables", default=None, help="asset file (default: shipped)")
    sp.add_argument("--dump", action="store_true")
    sp.set_defaults(func=cmd_validate_tables)

    sp = sub.add_parser("report", help="render figures from calibrate/embed CSVs")
    sp.add_argument("--sweep", default=None)
    sp.add_argument("--pmf-diff", default=None)
    sp.add_argument("--format", default="png")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except lattice.TableValidationError as exc:
        print(f"table validation failed:\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except (formats.FormatError, ModelFormatError, CostFormatError, devpipe.PipelineError, ValidationError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericError, InfeasiblePayloadError, DegenerateDataError, OverflowError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
