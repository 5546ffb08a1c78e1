"""
k-fold cross-validation of the HNN-I / HNN-RF pipeline on a case corpus.

Every trained quantity of a fold is produced by :func:`fit_fold`, which only
ever receives the fold's training cases. Test cases reach :func:`apply_case`
(no ground truth used beyond the stand-in candidate box) and the scoring and
superpixel-oracle steps. Each phase logs the case ids it touched.
"""

from __future__ import annotations

import csv
import io
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import aggregate as agg
from . import hnn, proposals
from .forest import ForestModel, rf_predict, rf_predict_oob, rf_train
from .metrics import Summary, avg_min_distance, dsc, fmt, summarize
from .phantom import PhantomSpec, candidate_box, generate_phantom
from .preprocess import (
    BoundingBox,
    MaskVolume,
    SlicePair,
    Volume,
    contour_from_mask,
    extract_axial_slices,
    hu_window,
    read_volume,
    write_volume,
)

log = logging.getLogger(__name__)

METHODS = ("Opt", "HNN-I", "HNN-RF")


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from a master seed and labels (independent of PYTHONHASHSEED)."""
    words = [zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration and data


def _default_hnn_interior() -> hnn.HnnConfig:
    # the interior target is large and easy; a smaller step keeps the loss curve monotone
    return hnn.HnnConfig(learning_rate=0.1, epochs=60)


def _default_hnn_boundary() -> hnn.HnnConfig:
    # a thin ring needs larger steps to sharpen within the epoch budget
    return hnn.HnnConfig(learning_rate=0.3, epochs=60)


@dataclass(frozen=True)
class PipelineConfig:
    hnn_interior: hnn.HnnConfig = field(default_factory=_default_hnn_interior)
    hnn_boundary: hnn.HnnConfig = field(default_factory=_default_hnn_boundary)
    window: tuple[float, float] = (-160.0, 240.0)
    margin: int = 8
    jitter: int = 4
    min_prob: float = 0.10
    rf_trees: int = 50
    rf_mtry: int = 6
    rf_positive_fraction: float = 0.5
    aggregation: str = "max"
    boundary_target: str = "contour"
    threshold_grid: tuple[float, ...] = agg.THRESHOLD_GRID
    folds: int = 4
    seed: int = 0

    def __post_init__(self):
        for name, c in (("hnn_interior", self.hnn_interior), ("hnn_boundary", self.hnn_boundary)):
            if c.num_stages < 3:
                raise ValueError(f"{name}: proposals use side outputs 2 and 3, so num_stages must be >= 3")
        if self.aggregation not in ("max", "mean"):
            raise ValueError(f"aggregation must be 'max' or 'mean', got {self.aggregation!r}")
        if self.boundary_target not in ("boundary", "contour"):
            raise ValueError(f"boundary_target must be 'boundary' or 'contour', got {self.boundary_target!r}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if not 0 < self.rf_positive_fraction <= 1:
            raise ValueError("rf_positive_fraction must be in (0, 1]")

    def echo(self) -> list[tuple[str, object]]:
        """Every effective setting as sorted (key, value) pairs."""
        flat = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}.{kk}"] = vv
            else:
                flat[k] = v
        return sorted((k, list(v) if isinstance(v, tuple) else v) for k, v in flat.items())


@dataclass
class Case:
    case_id: str
    image: Volume  # HU
    mask: MaskVolume


@dataclass
class PreparedCase:
    case_id: str
    box: BoundingBox
    slices: list[SlicePair]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]  # (train ids, test ids)


def make_fold_plan(case_ids, k: int = 4, seed: int = 0) -> FoldPlan:
    ids = sorted(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if len(ids) < 2 * k:
        raise ValueError(f"{k}-fold cross-validation needs at least {2 * k} cases, got {len(ids)}")
    perm = np.random.default_rng(derive_seed(seed, "folds")).permutation(len(ids))
    chunks = np.array_split(perm, k)
    folds = []
    for f in range(k):
        test = tuple(sorted(ids[i] for i in chunks[f]))
        train = tuple(i for i in ids if i not in test)
        folds.append((train, test))
    return FoldPlan(k, seed, tuple(folds))


def synth_corpus(n_cases: int, seed: int = 0, spec: PhantomSpec | None = None) -> list[Case]:
    spec = spec or PhantomSpec()
    cases = []
    for i in range(n_cases):
        cid = f"case_{i:03d}"
        img, mask = generate_phantom(replace(spec, seed=derive_seed(seed, "phantom", cid)))
        cases.append(Case(cid, img, mask))
    return cases


def write_case(root, case: Case, meta: dict | None = None) -> Path:
    d = Path(root) / case.case_id
    d.mkdir(parents=True, exist_ok=True)
    write_volume(d / "image", case.image)
    write_volume(d / "mask", case.mask)
    lines = [f"case_id = {case.case_id}"] + [f"{k} = {v}" for k, v in sorted((meta or {}).items())]
    (d / "meta").write_text("\n".join(lines) + "\n")
    return d


def read_case(d) -> Case:
    d = Path(d)
    meta = {}
    if (d / "meta").exists():
        for line in (d / "meta").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    image = read_volume(d / "image")
    mask = read_volume(d / "mask")
    if not isinstance(mask, MaskVolume):
        raise ValueError(f"{d}/mask is not a uint8 mask volume")
    if image.voxels.shape != mask.voxels.shape:
        raise ValueError(f"{d}: image dims {image.dims} != mask dims {mask.dims}")
    return Case(meta.get("case_id", d.name), image, mask)


def read_corpus(root) -> list[Case]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} not found")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "image.hdr").exists())
    if not dirs:
        raise FileNotFoundError(f"no cases under {root}")
    return [read_case(p) for p in dirs]


def prepare_case(case: Case, cfg: PipelineConfig) -> PreparedCase:
    box = candidate_box(case.mask, cfg.margin, cfg.jitter, seed=derive_seed(cfg.seed, "box", case.case_id))
    windowed = hu_window(case.image, *cfg.window)
    slices = extract_axial_slices(windowed, case.mask, box, case_id=case.case_id)
    return PreparedCase(case.case_id, box, slices, case.image.dims, case.image.spacing)


# ---------------------------------------------------------------------------
# audit


@dataclass
class AuditLog:
    records: list[tuple[int, str, tuple[str, ...]]] = field(default_factory=list)

    def record(self, fold: int, phase: str, case_ids) -> None:
        self.records.append((fold, phase, tuple(sorted(case_ids))))

    def extend(self, other: "AuditLog") -> None:
        self.records.extend(other.records)

    def text(self) -> str:
        return "".join(f"fold={f} phase={p} cases={','.join(c)}\n" for f, p, c in self.records)

    def leaks(self, plan: FoldPlan) -> list[str]:
        """Fit-phase records that mention a test case of the same fold."""
        bad = []
        for f, phase, ids in self.records:
            if phase.startswith("fit:"):
                test = set(plan.folds[f][1])
                hit = test.intersection(ids)
                if hit:
                    bad.append(f"fold {f} {phase} touched test cases {sorted(hit)}")
        return bad


# ---------------------------------------------------------------------------
# per-fold pipeline


@dataclass
class SliceAnalysis:
    hnn_i: np.ndarray  # fused interior map (crop)
    hnn_b: list[np.ndarray]  # [side2, side3, fused] boundary maps
    proposals: proposals.ProposalSet
    features: np.ndarray


@dataclass
class FoldModel:
    fold: int
    params_i: hnn.NetworkParams
    params_b: hnn.NetworkParams
    forest: ForestModel
    threshold_i: agg.CalibratedThreshold
    threshold_rf: agg.CalibratedThreshold
    loss_i: list[float]
    loss_b: list[float]


def boundary_maps(bundle_b: hnn.PredictionBundle) -> list[np.ndarray]:
    """The three scales used for superpixels: side outputs 2 and 3, then the fused map."""
    return [bundle_b.side_maps[1], bundle_b.side_maps[2], bundle_b.fused_map]


def proposals_from_maps(maps, min_prob: float) -> proposals.ProposalSet:
    tags = ("side2", "side3", "fuse")
    parts = [proposals.watershed(m, min_prob, tag) for m, tag in zip(maps, tags)]
    return proposals.build_hierarchy(parts, maps[-1])


def analyze_case(params_i, params_b, pc: PreparedCase, cfg: PipelineConfig) -> list[SliceAnalysis]:
    """HNN maps, proposals and features for every slice; reads images only."""
    out = []
    for sp in pc.slices:
        bi, bb = hnn.predict(params_i, params_b, sp.image)
        maps = boundary_maps(bb)
        pset = proposals_from_maps(maps, cfg.min_prob)
        feats = agg.proposal_features(pset, sp.image, bi.fused_map, bb.fused_map, sp.slice_index, pc.box)
        out.append(SliceAnalysis(bi.fused_map, maps, pset, feats))
    return out


def _rf_pixel_maps(analyses: list[SliceAnalysis], probs: np.ndarray, mode: str) -> list[np.ndarray]:
    maps, pos = [], 0
    for a in analyses:
        n = len(a.proposals.proposals)
        maps.append(agg.pixel_probability(a.proposals, probs[pos : pos + n], mode))
        pos += n
    return maps


@dataclass
class FittedAggregator:
    forest: ForestModel
    threshold_i: agg.CalibratedThreshold
    threshold_rf: agg.CalibratedThreshold
    features: np.ndarray
    labels: np.ndarray


def fit_aggregator(fold: int, params_i, params_b, train_cases: list[Case], cfg: PipelineConfig, audit: AuditLog) -> FittedAggregator:
    """Forest on training superpixels plus both thresholds, calibrated on out-of-bag maps."""
    ids = [c.case_id for c in train_cases]
    prepared = [prepare_case(c, cfg) for c in train_cases]
    analyses = [analyze_case(params_i, params_b, pc, cfg) for pc in prepared]
    X = np.vstack([a.features for an in analyses for a in an])
    y = np.concatenate(
        [
            agg.proposal_labels(a.proposals, sp.interior_gt, cfg.rf_positive_fraction)
            for an, pc in zip(analyses, prepared)
            for a, sp in zip(an, pc.slices)
        ]
    )
    audit.record(fold, "fit:forest", ids)
    try:
        forest = rf_train(X, y, cfg.rf_trees, cfg.rf_mtry, seed=derive_seed(cfg.seed, fold, "forest"))
    except ValueError as exc:
        raise ValueError(f"fold {fold}: cannot train superpixel forest: {exc}") from exc

    audit.record(fold, "fit:calibrate", ids)
    oob = rf_predict_oob(forest, X)
    gts = [c.mask.voxels for c in train_cases]
    probs_i, probs_rf, pos = [], [], 0
    for an, pc in zip(analyses, prepared):
        n = sum(len(a.proposals.proposals) for a in an)
        probs_rf.append(agg.stack_probabilities(_rf_pixel_maps(an, oob[pos : pos + n], cfg.aggregation), pc.box, pc.dims))
        probs_i.append(agg.stack_probabilities([a.hnn_i for a in an], pc.box, pc.dims))
        pos += n
    thr_i = agg.calibrate_threshold(probs_i, gts, cfg.threshold_grid)
    thr_rf = agg.calibrate_threshold(probs_rf, gts, cfg.threshold_grid)
    forest.meta = {
        "threshold": thr_rf.threshold,
        "threshold_i": thr_i.threshold,
        "fold": fold,
        "aggregation": cfg.aggregation,
        "min_prob": cfg.min_prob,
        "window": list(cfg.window),
        "margin": cfg.margin,
        "jitter": cfg.jitter,
        "seed": cfg.seed,
        "boundary_target": cfg.boundary_target,
        "rf_trees": cfg.rf_trees,
        "rf_mtry": cfg.rf_mtry,
        "rf_positive_fraction": cfg.rf_positive_fraction,
    }
    return FittedAggregator(forest, thr_i, thr_rf, X, y)


_META_FIELDS = ("aggregation", "min_prob", "margin", "jitter", "seed", "boundary_target", "rf_trees", "rf_mtry", "rf_positive_fraction")


def config_from_meta(meta: dict) -> PipelineConfig:
    """Inference settings a forest was fitted with, so saved models reproduce cross-validation."""
    missing = [k for k in _META_FIELDS + ("window",) if k not in meta]
    if missing:
        raise ValueError(f"forest metadata lacks {', '.join(missing)}")
    kw = {k: meta[k] for k in _META_FIELDS}
    return PipelineConfig(window=tuple(float(v) for v in meta["window"]), **kw)


def fit_fold(fold: int, train_cases: list[Case], cfg: PipelineConfig, audit: AuditLog) -> FoldModel:
    """Train both networks and the forest and calibrate thresholds from training cases only."""
    ids = [c.case_id for c in train_cases]
    slices = [sp for c in train_cases for sp in prepare_case(c, cfg).slices]

    audit.record(fold, "fit:hnn_interior", ids)
    cfg_i = replace(cfg.hnn_interior, seed=derive_seed(cfg.seed, fold, "hnn_i"))
    res_i = hnn.train(cfg_i, slices, "interior")
    audit.record(fold, "fit:hnn_boundary", ids)
    cfg_b = replace(cfg.hnn_boundary, seed=derive_seed(cfg.seed, fold, "hnn_b"))
    res_b = hnn.train(cfg_b, slices, cfg.boundary_target)

    fitted = fit_aggregator(fold, res_i.params, res_b.params, train_cases, cfg, audit)
    return FoldModel(
        fold, res_i.params, res_b.params, fitted.forest, fitted.threshold_i, fitted.threshold_rf,
        res_i.loss_curve, res_b.loss_curve,
    )


@dataclass
class CasePrediction:
    case_id: str
    prepared: PreparedCase
    analyses: list[SliceAnalysis]
    prob_i: np.ndarray
    prob_rf: np.ndarray
    mask_i: np.ndarray
    mask_rf: np.ndarray


def apply_case(model: FoldModel, case: Case, cfg: PipelineConfig) -> CasePrediction:
    pc = prepare_case(case, cfg)
    an = analyze_case(model.params_i, model.params_b, pc, cfg)
    X = np.vstack([a.features for a in an])
    rf = rf_predict(model.forest, X)
    prob_rf = agg.stack_probabilities(_rf_pixel_maps(an, rf, cfg.aggregation), pc.box, pc.dims)
    prob_i = agg.stack_probabilities([a.hnn_i for a in an], pc.box, pc.dims)
    return CasePrediction(
        case.case_id,
        pc,
        an,
        prob_i,
        prob_rf,
        (prob_i >= model.threshold_i.threshold).astype(np.uint8),
        (prob_rf >= model.threshold_rf.threshold).astype(np.uint8),
    )


def opt_mask(pred: CasePrediction, gt: MaskVolume) -> np.ndarray:
    """Best volume DSC reachable by selecting level-1 superpixels against the ground truth."""
    pc = pred.prepared
    gts = [sp.interior_gt for sp in pc.slices]
    masks, _ = proposals.optimal_labeling_volume([a.proposals for a in pred.analyses], gts)
    return agg.stack_to_volume(masks, pc.box, pc.dims, pc.spacing).voxels


def _dist_or_nan(a, b, spacing) -> float:
    if not np.any(a) or not np.any(b):
        return float("nan")
    return avg_min_distance(a, b, spacing)


@dataclass
class CaseResult:
    case_id: str
    fold: int
    dsc: dict[str, float]
    dist: dict[str, float]


def score_case(fold: int, pred: CasePrediction, case: Case) -> CaseResult:
    gt = case.mask.voxels
    sp = case.mask.spacing
    masks = {"Opt": opt_mask(pred, case.mask), "HNN-I": pred.mask_i, "HNN-RF": pred.mask_rf}
    return CaseResult(
        case.case_id,
        fold,
        {m: dsc(v, gt) for m, v in masks.items()},
        {m: _dist_or_nan(v, gt, sp) for m, v in masks.items()},
    )


def run_fold(fold: int, plan: FoldPlan, cases: dict[str, Case], cfg: PipelineConfig):
    audit = AuditLog()
    train_ids, test_ids = plan.folds[fold]
    model = fit_fold(fold, [cases[i] for i in train_ids], cfg, audit)
    results = []
    audit.record(fold, "apply:test", test_ids)
    preds = [apply_case(model, cases[i], cfg) for i in test_ids]
    audit.record(fold, "score:test+oracle_opt", test_ids)
    for p in preds:
        results.append(score_case(fold, p, cases[p.case_id]))
    log.info("fold %d done: %s", fold, {r.case_id: round(r.dsc["HNN-RF"], 3) for r in results})
    return model, results, audit


def _run_fold_star(args):
    return run_fold(*args)


@dataclass
class CrossvalResult:
    config: PipelineConfig
    plan: FoldPlan
    models: list[FoldModel]
    cases: list[CaseResult]
    audit: AuditLog

    def summary(self, method: str, metric: str) -> Summary:
        vals = [getattr(c, metric)[method] for c in self.cases]
        vals = [v for v in vals if not np.isnan(v)]
        return summarize(vals) if vals else Summary(float("nan"), float("nan"), float("nan"), float("nan"), 0, False)

    def fold_mean(self, fold: int, method: str, metric: str = "dsc") -> float:
        vals = [getattr(c, metric)[method] for c in self.cases if c.fold == fold]
        return float(np.nanmean(vals))


def run_crossval(cases: list[Case], cfg: PipelineConfig, jobs: int = 1) -> CrossvalResult:
    if len(cases) < 2 * cfg.folds:
        raise ValueError(f"{cfg.folds}-fold cross-validation needs at least {2 * cfg.folds} cases")
    plan = make_fold_plan([c.case_id for c in cases], cfg.folds, cfg.seed)
    by_id = {c.case_id: c for c in cases}
    args = [(f, plan, by_id, cfg) for f in range(plan.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_fold_star, args))
    else:
        outs = [_run_fold_star(a) for a in args]
    audit = AuditLog()
    models, results = [], []
    for model, res, aud in outs:
        models.append(model)
        results.extend(res)
        audit.extend(aud)
    leaks = audit.leaks(plan)
    if leaks:
        raise RuntimeError("test-fold leakage: " + "; ".join(leaks))
    results.sort(key=lambda r: (r.fold, r.case_id))
    return CrossvalResult(cfg, plan, models, results, audit)


def aligned_opt_dsc(case: Case, cfg: PipelineConfig) -> float:
    """
    Superpixel upper bound when the boundary maps are the ground-truth contour
    itself (inner plus outer one-pixel rings), i.e. superpixels aligned with
    the organ by construction.
    """
    pc = prepare_case(case, cfg)
    sets, gts = [], []
    for sp in pc.slices:
        gt = sp.interior_gt.astype(bool)
        ring = contour_from_mask(gt).astype(np.float64)
        sets.append(proposals_from_maps([ring, ring, ring], cfg.min_prob))
        gts.append(gt)
    masks, _ = proposals.optimal_labeling_volume(sets, gts)
    vol = agg.stack_to_volume(masks, pc.box, pc.dims, pc.spacing)
    return dsc(vol, case.mask)


# ---------------------------------------------------------------------------
# reports


def report_text(res: CrossvalResult) -> str:
    out = io.StringIO()
    w = out.write
    w("# hnnrf cross-validation report\n")
    w("# average minimum distance is the symmetric mean surface distance (mm)\n")
    w("[config]\n")
    for k, v in res.config.echo():
        w(f"{k} = {v}\n")
    w("[fold_plan]\n")
    w(f"k = {res.plan.k}\nseed = {res.plan.seed}\n")
    for f, (tr, te) in enumerate(res.plan.folds):
        w(f"fold {f}: train = {','.join(tr)} | test = {','.join(te)}\n")
    w("[thresholds]\n")
    for m in res.models:
        w(
            f"fold {m.fold}: hnn_i = {m.threshold_i.threshold:.2f} (train DSC {fmt(m.threshold_i.train_dsc)})"
            f"  hnn_rf = {m.threshold_rf.threshold:.2f} (train DSC {fmt(m.threshold_rf.train_dsc)})\n"
        )
    w("[fold_mean_dsc]\n")
    for f in range(res.plan.k):
        w(f"fold {f}: " + "  ".join(f"{m} = {fmt(res.fold_mean(f, m))}" for m in METHODS) + "\n")
    for metric, title, scale in (("dsc", "DSC [%]", 100.0), ("dist", "Dist [mm]", 1.0)):
        w(f"[table {title}]\n")
        w(f"{'':<6}" + "".join(f"{m:>10}" for m in METHODS) + "\n")
        sums = {m: res.summary(m, metric) for m in METHODS}
        for stat in ("mean", "std", "min", "max"):
            w(f"{stat.capitalize():<6}" + "".join(f"{fmt(getattr(sums[m], stat) * scale, 2):>10}" for m in METHODS) + "\n")
        missing = [f"{m}: {len(res.cases) - sums[m].n}" for m in METHODS if sums[m].n < len(res.cases)]
        if missing:
            w("cases without a defined value (empty mask): " + ", ".join(missing) + "\n")
    return out.getvalue()


def report_csv(res: CrossvalResult) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["row_type", "case_id", "fold", "method", "dsc", "dist_mm"])
    for c in res.cases:
        for m in METHODS:
            w.writerow(["case", c.case_id, c.fold, m, fmt(c.dsc[m], 6), fmt(c.dist[m], 6)])
    for stat in ("mean", "std", "min", "max"):
        for m in METHODS:
            d, s = res.summary(m, "dsc"), res.summary(m, "dist")
            w.writerow(["summary", stat, "all", m, fmt(getattr(d, stat), 6), fmt(getattr(s, stat), 6)])
    return out.getvalue()
