"""
Command-line entry point.

    hnnrf synth      write a phantom corpus
    hnnrf train      train one HNN (interior or boundary) on corpus cases
    hnnrf proposals  superpixel labels and proposals for one case
    hnnrf aggregate  fit the superpixel forest, or apply it to one case
    hnnrf predict    HNN-I and HNN-RF masks for one case
    hnnrf evaluate   DSC / distance report for mask pairs
    hnnrf crossval   k-fold cross-validation with the full report

Exit codes: 0 ok, 2 usage, 3 I/O, 4 data validation, 5 training divergence.
The default seed is read from HNNRF_SEED when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import aggregate as agg
from . import harness, hnn, proposals
from .container import ContainerVersionError
from .forest import load_forest, save_forest
from .metrics import avg_min_distance, dsc, dsc_coverage_curve, fmt, summarize
from .phantom import PhantomSpec
from .preprocess import MaskVolume, Volume, read_volume, write_volume

SEED_ENV = "HNNRF_SEED"

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("hnnrf")


class UsageError(Exception):
    pass


def _fail(code: int, kind: str, message: str) -> int:
    print(f"hnnrf: error code={code} kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.exit(_fail(EXIT_USAGE, "usage", f"{self.prog}: {message}"))


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        sys.exit(_fail(EXIT_USAGE, "usage", f"{SEED_ENV}={raw!r} is not an integer"))


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ids(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.split(",") if t)


# ---------------------------------------------------------------------------
# flag groups


def _add_seed(p):
    p.add_argument("--seed", type=int, default=_default_seed(), help=f"master seed (default from ${SEED_ENV}, else 0)")


def _add_phantom(p):
    g = p.add_argument_group("phantom")
    d = PhantomSpec()
    g.add_argument("--dims", type=int, nargs=3, default=list(d.dims), metavar=("NX", "NY", "NZ"))
    g.add_argument("--spacing", type=float, nargs=3, default=list(d.spacing), metavar=("SX", "SY", "SZ"))


def _add_hnn(p):
    g = p.add_argument_group("network (applies to both HNN-I and HNN-B)")
    d = harness.PipelineConfig()
    g.add_argument("--stages", type=int, default=d.hnn_interior.num_stages, help="number of conv stages / side outputs")
    g.add_argument("--convs-per-stage", type=int, default=d.hnn_interior.convs_per_stage)
    g.add_argument("--base-channels", type=int, default=d.hnn_interior.base_channels)
    g.add_argument("--lr", type=float, default=None, help="SGD learning rate for both networks (overrides --lr-i/--lr-b)")
    g.add_argument("--lr-i", type=float, default=d.hnn_interior.learning_rate, help="SGD learning rate of HNN-I")
    g.add_argument("--lr-b", type=float, default=d.hnn_boundary.learning_rate, help="SGD learning rate of HNN-B")
    g.add_argument("--epochs", type=int, default=d.hnn_interior.epochs)
    g.add_argument("--plain-fuse-loss", action="store_true", help="unbalanced cross-entropy on the fused output")


def _add_pipeline(p, crossval=False):
    g = p.add_argument_group("pipeline")
    d = harness.PipelineConfig()
    g.add_argument("--window", type=float, nargs=2, default=list(d.window), metavar=("LO", "HI"), help="HU window")
    g.add_argument("--margin", type=int, default=d.margin, help="candidate box margin (voxels)")
    g.add_argument("--jitter", type=int, default=d.jitter, help="candidate box face jitter (voxels)")
    g.add_argument("--min-prob", type=float, default=d.min_prob, help="watershed floor on boundary maps")
    g.add_argument("--rf-trees", type=int, default=d.rf_trees)
    g.add_argument("--rf-mtry", type=int, default=d.rf_mtry)
    g.add_argument("--rf-positive-fraction", type=float, default=d.rf_positive_fraction,
                   help="foreground share that makes a training superpixel positive")
    g.add_argument("--aggregation", choices=("max", "mean"), default=d.aggregation,
                   help="how overlapping proposal probabilities reach pixels")
    g.add_argument("--boundary-target", choices=("boundary", "contour"), default=d.boundary_target,
                   help="HNN-B training target: inner boundary, or inner boundary plus the touching background ring")
    g.add_argument("--threshold-grid", type=_floats, default=d.threshold_grid, help="comma-separated thresholds")
    if crossval:
        g.add_argument("--folds", type=int, default=d.folds)


def _pipeline_config(args) -> harness.PipelineConfig:
    net = dict(
        num_stages=args.stages,
        convs_per_stage=args.convs_per_stage,
        base_channels=args.base_channels,
        epochs=args.epochs,
        balanced_fuse=not args.plain_fuse_loss,
    )
    lr_i = args.lr_i if args.lr is None else args.lr
    lr_b = args.lr_b if args.lr is None else args.lr
    kw = dict(
        hnn_interior=hnn.HnnConfig(learning_rate=lr_i, **net),
        hnn_boundary=hnn.HnnConfig(learning_rate=lr_b, **net),
        window=tuple(args.window),
        margin=args.margin,
        jitter=args.jitter,
        min_prob=args.min_prob,
        rf_trees=args.rf_trees,
        rf_mtry=args.rf_mtry,
        rf_positive_fraction=args.rf_positive_fraction,
        aggregation=args.aggregation,
        boundary_target=args.boundary_target,
        threshold_grid=tuple(args.threshold_grid),
        seed=args.seed,
    )
    if hasattr(args, "folds"):
        kw["folds"] = args.folds
    return harness.PipelineConfig(**kw)


def _echo(args, cfg: harness.PipelineConfig | None = None) -> None:
    """Print every effective setting, one ``# key = value`` line each."""
    items = {k: v for k, v in vars(args).items() if k != "func"}
    for k, v in sorted(items.items()):
        print(f"# {k} = {list(v) if isinstance(v, tuple) else v}")
    if cfg is not None:
        for k, v in cfg.echo():
            print(f"# pipeline.{k} = {v}")


def _select(cases, ids):
    if not ids:
        return cases
    by_id = {c.case_id: c for c in cases}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise FileNotFoundError(f"cases not in corpus: {', '.join(missing)}")
    return [by_id[i] for i in ids]


def _one_case(corpus, case_id) -> harness.Case:
    d = Path(corpus) / case_id
    if not (d / "image.hdr").exists():
        raise FileNotFoundError(f"case {case_id} not found under {corpus}")
    return harness.read_case(d)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = PhantomSpec(dims=tuple(args.dims), spacing=tuple(args.spacing))
    _echo(args)
    out = Path(args.out)
    for c in harness.synth_corpus(args.cases, args.seed, spec):
        harness.write_case(out, c, {"source": "phantom", "master_seed": args.seed})
    print(f"wrote {args.cases} cases to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _pipeline_config(args)
    _echo(args, cfg)
    cases = _select(harness.read_corpus(args.corpus), args.case_ids)
    slices = [sp for c in cases for sp in harness.prepare_case(c, cfg).slices]
    net = cfg.hnn_interior if args.target == "interior" else cfg.hnn_boundary
    target = "interior" if args.target == "interior" else cfg.boundary_target
    res = hnn.train(replace(net, seed=args.seed), slices, target)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hnn.save_params(out, res.params)
    loss_csv = out.with_suffix(".loss.csv")
    _write_rows(loss_csv, ["epoch", "loss"], [[e + 1, repr(v)] for e, v in enumerate(res.loss_curve)])
    if args.figures:
        from .plotting import loss_figure

        loss_figure({args.target: res.loss_curve}, Path(args.figures) / f"loss_{args.target}.png")
    print(f"trained {args.target} network on {res.used_slices} slices; final loss {res.loss_curve[-1]:.6f}")
    print(f"wrote {out} and {loss_csv}")
    return EXIT_OK


def cmd_proposals(args) -> int:
    cfg = _pipeline_config(args)
    _echo(args, cfg)
    params_b = hnn.load_params(args.hnn_b)
    case = _one_case(args.corpus, args.case)
    pc = harness.prepare_case(case, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for sp in pc.slices:
        bundle, _ = hnn.forward(params_b, sp.image[None])
        pset = harness.proposals_from_maps(harness.boundary_maps(bundle), cfg.min_prob)
        proposals.write_pgm(out / f"superpixels_z{sp.slice_index:03d}.pgm", pset.labels)
        sizes = np.bincount(pset.labels.ravel(), minlength=pset.num_level1)
        for k, (p, lev) in enumerate(zip(pset.proposals, pset.levels)):
            rows.append([sp.slice_index, k, lev, int(sizes[list(p)].sum()), " ".join(map(str, p))])
    _write_rows(out / "proposals.csv", ["slice", "proposal", "level", "pixels", "superpixels"], rows)
    print(f"wrote {len(pc.slices)} label images and {len(rows)} proposals to {out}")
    return EXIT_OK


def _load_model(args) -> tuple[harness.FoldModel, harness.PipelineConfig]:
    forest = load_forest(args.forest)
    model = harness.FoldModel(
        fold=int((forest.meta or {}).get("fold", -1)),
        params_i=hnn.load_params(args.hnn_i),
        params_b=hnn.load_params(args.hnn_b),
        forest=forest,
        threshold_i=agg.CalibratedThreshold(float(forest.meta["threshold_i"]), float("nan")),
        threshold_rf=agg.CalibratedThreshold(float(forest.meta["threshold"]), float("nan")),
        loss_i=[],
        loss_b=[],
    )
    return model, harness.config_from_meta(forest.meta)


def _write_prediction(out: Path, pred: harness.CasePrediction, spacing, which=("hnn_i", "hnn_rf")) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in which:
        mask = pred.mask_i if name == "hnn_i" else pred.mask_rf
        prob = pred.prob_i if name == "hnn_i" else pred.prob_rf
        write_volume(out / name, MaskVolume(mask, spacing))
        write_volume(out / f"{name}_prob", Volume(prob, spacing))
        written.append(out / f"{name}.hdr")
    return written


def cmd_predict(args) -> int:
    _echo(args)
    model, cfg = _load_model(args)
    for k, v in cfg.echo():
        print(f"# model.{k} = {v}")
    case = _one_case(args.corpus, args.case)
    pred = harness.apply_case(model, case, cfg)
    for p in _write_prediction(Path(args.out), pred, case.image.spacing):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    if args.mode == "fit":
        for flag in ("out",):
            if getattr(args, flag) is None:
                raise UsageError(f"--mode fit needs --{flag}")
        cfg = _pipeline_config(args)
        _echo(args, cfg)
        cases = _select(harness.read_corpus(args.corpus), args.case_ids)
        params_i, params_b = hnn.load_params(args.hnn_i), hnn.load_params(args.hnn_b)
        audit = harness.AuditLog()
        fitted = harness.fit_aggregator(-1, params_i, params_b, cases, cfg, audit)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_forest(out, fitted.forest)
        if args.features_csv:
            agg.write_features_csv(args.features_csv, fitted.features, fitted.labels)
        print(
            f"forest of {len(fitted.forest.trees)} trees on {fitted.labels.size} superpixels "
            f"({int(fitted.labels.sum())} positive); HNN-RF threshold {fitted.threshold_rf.threshold:.2f}, "
            f"HNN-I threshold {fitted.threshold_i.threshold:.2f}"
        )
        print(f"wrote {out}")
        return EXIT_OK
    for flag in ("forest", "case", "out"):
        if getattr(args, flag) is None:
            raise UsageError(f"--mode apply needs --{flag.replace('_', '-')}")
    _echo(args)
    model, cfg = _load_model(args)
    case = _one_case(args.corpus, args.case)
    pred = harness.apply_case(model, case, cfg)
    for p in _write_prediction(Path(args.out), pred, case.image.spacing, which=("hnn_rf",)):
        print(f"wrote {p}")
    return EXIT_OK


def _mask(path) -> np.ndarray:
    v = read_volume(path)
    if not isinstance(v, MaskVolume):
        raise ValueError(f"{path} is not a binary mask volume")
    return v


def evaluation_rows(names, preds, gts):
    rows = []
    for name, p, g in zip(names, preds, gts):
        if p.voxels.shape != g.voxels.shape:
            raise ValueError(f"{name}: prediction dims {p.dims} != ground-truth dims {g.dims}")
        d = dsc(p, g)
        dist = avg_min_distance(p, g, g.spacing) if p.voxels.any() and g.voxels.any() else float("nan")
        rows.append((name, d, dist))
    return rows


def evaluation_text(rows) -> str:
    lines = ["# hnnrf evaluation", "# Dist is the symmetric mean surface distance (mm)", "[cases]"]
    for name, d, dist in rows:
        lines.append(f"{name}: DSC = {fmt(d)}  Dist = {fmt(dist)}")
    lines.append("[summary]")
    for label, vals in (("DSC", [r[1] for r in rows]), ("Dist", [r[2] for r in rows if not np.isnan(r[2])])):
        if not vals:
            lines.append(f"{label}: undefined (empty masks)")
            continue
        s = summarize(vals)
        std = fmt(s.std) if s.std_defined else "n/a"
        lines.append(f"{label}: mean = {fmt(s.mean)}  std = {std}  min = {fmt(s.min)}  max = {fmt(s.max)}  n = {s.n}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    _echo(args)
    if len(args.pred) != len(args.gt):
        raise UsageError(f"{len(args.pred)} --pred volumes but {len(args.gt)} --gt volumes")
    names = [str(p) for p in args.pred]
    rows = evaluation_rows(names, [_mask(p) for p in args.pred], [_mask(g) for g in args.gt])
    text = evaluation_text(rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluation.txt").write_text(text)
        _write_rows(out / "evaluation.csv", ["pred", "dsc", "dist_mm"], [[n, fmt(d, 6), fmt(m, 6)] for n, d, m in rows])
    curve = dsc_coverage_curve([r[1] for r in rows])
    if args.emit_curve:
        Path(args.emit_curve).parent.mkdir(parents=True, exist_ok=True)
        _write_rows(args.emit_curve, ["dsc_level", "fraction_of_cases"], [[f"{l:.2f}", fmt(f, 6)] for l, f in curve])
    if args.figures:
        from .plotting import coverage_figure

        coverage_figure({"pred": curve}, Path(args.figures) / "coverage.png")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _pipeline_config(args)
    _echo(args, cfg)
    if args.corpus:
        cases = harness.read_corpus(args.corpus)
    else:
        spec = PhantomSpec(dims=tuple(args.dims), spacing=tuple(args.spacing))
        cases = harness.synth_corpus(args.cases, args.seed, spec)
    res = harness.run_crossval(cases, cfg, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(harness.report_text(res))
    (out / "report.csv").write_text(harness.report_csv(res))
    (out / "audit.log").write_text(res.audit.text())
    curves = {m: dsc_coverage_curve([c.dsc[m] for c in res.cases]) for m in harness.METHODS}
    _write_rows(
        out / "coverage.csv",
        ["dsc_level"] + list(harness.METHODS),
        [[f"{curves[harness.METHODS[0]][k][0]:.2f}"] + [fmt(curves[m][k][1], 6) for m in harness.METHODS]
         for k in range(len(curves[harness.METHODS[0]]))],
    )
    loss_rows = []
    for m in res.models:
        for net, losses in (("hnn_i", m.loss_i), ("hnn_b", m.loss_b)):
            loss_rows += [[m.fold, net, e + 1, repr(v)] for e, v in enumerate(losses)]
    _write_rows(out / "loss_curves.csv", ["fold", "network", "epoch", "loss"], loss_rows)
    if args.save_models:
        mdir = out / "models"
        mdir.mkdir(exist_ok=True)
        for m in res.models:
            hnn.save_params(mdir / f"fold{m.fold}_hnn_i.hnn", m.params_i)
            hnn.save_params(mdir / f"fold{m.fold}_hnn_b.hnn", m.params_b)
            save_forest(mdir / f"fold{m.fold}_forest.rf", m.forest)
    if args.figures:
        from .plotting import coverage_figure, dsc_boxplot, loss_figure

        fig = out / "figures"
        coverage_figure(curves, fig / "coverage.png")
        dsc_boxplot({m: [c.dsc[m] for c in res.cases] for m in harness.METHODS}, fig / "dsc_boxplot.png")
        loss_figure(
            {f"fold {m.fold} {n}": l for m in res.models for n, l in (("HNN-I", m.loss_i), ("HNN-B", m.loss_b))},
            fig / "loss_curves.png",
        )
    sys.stdout.write(harness.report_text(res))
    print(f"wrote reports to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt_cls = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="hnnrf", description="HNN-I / HNN-RF organ segmentation pipeline", formatter_class=fmt_cls)
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a phantom corpus", formatter_class=fmt_cls)
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--cases", type=int, default=8)
    _add_seed(p)
    _add_phantom(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one network", formatter_class=fmt_cls)
    p.add_argument("--corpus", required=True)
    p.add_argument("--case-ids", type=_ids, default=(), help="comma-separated case ids (default: all)")
    p.add_argument("--target", choices=("interior", "boundary"), default="interior")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--figures", help="directory for a loss-curve PNG")
    _add_seed(p)
    _add_hnn(p)
    _add_pipeline(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("proposals", help="superpixels and proposals for one case", formatter_class=fmt_cls)
    p.add_argument("--corpus", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--hnn-b", required=True, help="boundary network model file")
    p.add_argument("--out", required=True)
    _add_seed(p)
    _add_hnn(p)
    _add_pipeline(p)
    p.set_defaults(func=cmd_proposals)

    p = sub.add_parser("aggregate", help="fit or apply the superpixel forest", formatter_class=fmt_cls)
    p.add_argument("--mode", choices=("fit", "apply"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--case-ids", type=_ids, default=(), help="fit: training case ids (default: all)")
    p.add_argument("--case", help="apply: case id")
    p.add_argument("--hnn-i", required=True)
    p.add_argument("--hnn-b", required=True)
    p.add_argument("--forest", help="apply: forest model file")
    p.add_argument("--out", help="fit: forest file to write; apply: output directory")
    p.add_argument("--features-csv", help="fit: also write the training feature matrix")
    _add_seed(p)
    _add_hnn(p)
    _add_pipeline(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("predict", help="HNN-I and HNN-RF masks for one case", formatter_class=fmt_cls)
    p.add_argument("--corpus", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--hnn-i", required=True)
    p.add_argument("--hnn-b", required=True)
    p.add_argument("--forest", required=True, help="forest file; also carries thresholds and pipeline settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth", formatter_class=fmt_cls)
    p.add_argument("--pred", nargs="+", required=True, help="predicted mask volumes")
    p.add_argument("--gt", nargs="+", required=True, help="ground-truth mask volumes, same order")
    p.add_argument("--out", help="directory for evaluation.txt / evaluation.csv")
    p.add_argument("--emit-curve", help="CSV path for the DSC coverage curve")
    p.add_argument("--figures", help="directory for a coverage-curve PNG")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="k-fold cross-validation", formatter_class=fmt_cls)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--cases", type=int, default=8, help="number of phantom cases to generate")
    src.add_argument("--corpus", help="read cases from this directory instead of generating them")
    p.add_argument("--out", required=True)
    p.add_argument("--save-models", action="store_true", help="write per-fold model files under OUT/models")
    p.add_argument("--figures", action="store_true", help="render PNG figures under OUT/figures")
    p.add_argument("--jobs", type=int, default=1, help="folds run in parallel")
    _add_seed(p)
    _add_phantom(p)
    _add_hnn(p)
    _add_pipeline(p, crossval=True)
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except hnn.TrainingDivergence as exc:
        return _fail(EXIT_DIVERGED, "divergence", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (ValueError, ContainerVersionError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))


if __name__ == "__main__":
    sys.exit(main())
