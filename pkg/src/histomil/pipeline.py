"""End-to-end orchestration: tile, normalise, segment, train, score, survival, report.

Every stage writes into a directory named by a hash of its own settings, its
input files and the hash of the stage before it, so an unchanged rerun finds
all stages cached and any upstream change invalidates everything downstream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from histomil import __version__
from histomil import io
from histomil._parallel import ordered_map
from histomil.figures import emit_figures_data, km_rows
from histomil.mil import (AggregationConfig, Bag, LossConfig, ModelCheckpoint, ScoredBag,
                          Tile4C, TrainingConfig, score_bag, top_predictive_tiles, train)
from histomil.mil.scorer import tile_features
from histomil.nuclei import load_heatmap, save_heatmap, stand_in_segmenter
from histomil.stain import (DEFAULT_TARGET_PROFILE, InsufficientTissueError, StainProfile,
                            fit_stain_profile, normalize_to)
from histomil.survival import (CollinearityError, complete_cases, cox_fit, encode_categorical,
                               km_estimate, logrank_arrays, read_cohort_csv, stratified_analysis,
                               td_auc)
from histomil.survival.records import as_arrays, covariate_values
from histomil.tiling import TileSpec, extract_tiles_report

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    slides_manifest: str = ""
    labels_csv: str = ""
    cohort_csv: str = ""
    output_dir: str = "histomil_out"
    heatmap_dir: str = ""  # external heatmaps; empty = stand-in segmenter
    target_profile: str = ""  # empty = built-in reference profile


@dataclass
class StainSettings:
    sparsity: float = 0.1
    n_iter: int = 50
    od_threshold: float = 0.15
    percentile: float = 99.0
    max_fit_tiles: int = 50
    max_fit_pixels: int = 100_000


@dataclass
class SurvivalSettings:
    covariates: list = field(default_factory=list)  # "name" or "name:reference_level"
    times: list = field(default_factory=lambda: [12.0, 24.0, 36.0])
    stratify_by: list = field(default_factory=list)
    ties: str = "efron"
    subset: str = "holdout"  # or "all"


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    tiling: TileSpec = field(default_factory=TileSpec)
    stain: StainSettings = field(default_factory=StainSettings)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    survival: SurvivalSettings = field(default_factory=SurvivalSettings)
    train_fraction: float = 0.5
    top_k: int = 200
    seed: int = 17

    SECTIONS = {"paths": Paths, "tiling": TileSpec, "stain": StainSettings,
                "aggregation": AggregationConfig, "loss": LossConfig,
                "training": TrainingConfig, "survival": SurvivalSettings}

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "PipelineConfig":
        kwargs = {}
        for key, value in doc.items():
            if key in cls.SECTIONS:
                section = cls.SECTIONS[key]
                known = {f.name for f in fields(section)}
                unknown = set(value) - known
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                try:
                    kwargs[key] = section(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{key}]: {exc}") from exc
            elif key in ("train_fraction", "top_k", "seed"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config section {key!r}")
        cfg = cls(**kwargs)
        # the run seed drives training too
        cfg.training = TrainingConfig(**{**asdict(cfg.training), "seed": cfg.seed})
        if base_dir is not None:
            p = cfg.paths
            for name in ("slides_manifest", "labels_csv", "cohort_csv", "output_dir",
                         "heatmap_dir", "target_profile"):
                v = getattr(p, name)
                if v and not Path(v).is_absolute():
                    setattr(p, name, str(Path(base_dir) / v))
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, base_dir=Path(path).parent)

    def as_dict(self) -> dict:
        return {"paths": asdict(self.paths), "tiling": asdict(self.tiling),
                "stain": asdict(self.stain), "aggregation": asdict(self.aggregation),
                "loss": asdict(self.loss), "training": asdict(self.training),
                "survival": asdict(self.survival), "train_fraction": self.train_fraction,
                "top_k": self.top_k, "seed": self.seed}

    def validate(self):
        p = self.paths
        for name in ("slides_manifest", "labels_csv", "cohort_csv"):
            v = getattr(p, name)
            if not v or not Path(v).exists():
                raise ConfigError(f"paths.{name} does not exist: {v!r}")
        for name in ("heatmap_dir", "target_profile"):
            v = getattr(p, name)
            if v and not Path(v).exists():
                raise ConfigError(f"paths.{name} does not exist: {v!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.survival.subset not in ("holdout", "all"):
            raise ConfigError("survival.subset must be 'holdout' or 'all'")


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, fixed separators)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dir_digest(path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(file_digest(p).encode())
    return h.hexdigest()


# --------------------------------------------------------------------------- stages

def tile_slides(manifest_path, spec: TileSpec, out_dir, threads=None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, errors = [], []
    stats = {"slides": 0, "tiles_kept": 0, "tiles_background": 0, "tiles_failed": 0}
    for entry in io.read_manifest(manifest_path):
        stats["slides"] += 1
        try:
            slide = io.load_slide(entry)
        except Exception as exc:
            errors.append(f"slide {entry['id']}: {exc}")
            continue
        res = extract_tiles_report(slide, spec, threads=threads)
        rows += io.write_tiles(res.tiles, out_dir)
        stats["tiles_kept"] += len(res.tiles)
        stats["tiles_background"] += res.n_background
        stats["tiles_failed"] += len(res.errors)
        errors += [f"slide {slide.id} tile {r},{c}: {msg}" for r, c, msg in res.errors]
    io.write_tile_index(out_dir, rows)
    stats["errors"] = errors
    return stats


def _group_by_slide(index):
    groups: dict[str, list] = {}
    for r in index:
        groups.setdefault(r["slide_id"], []).append(r)
    return groups


def normalize_tiles(tile_dir, target: StainProfile, out_dir, settings: StainSettings = StainSettings(),
                    seed=17, threads=None) -> dict:
    """Fit one stain profile per slide on pooled tile pixels and map every tile onto ``target``."""
    tile_dir, out_dir = Path(tile_dir), Path(out_dir)
    (out_dir / "profiles").mkdir(parents=True, exist_ok=True)
    index = io.read_tile_index(tile_dir)
    kept, errors = [], []
    for slide_id, rows in sorted(_group_by_slide(index).items()):
        rng = np.random.default_rng([seed, zlib.crc32(slide_id.encode())])
        pick = sorted(rng.choice(len(rows), min(len(rows), settings.max_fit_tiles), replace=False))
        pixels = np.concatenate([io.read_png_rgb(tile_dir / rows[i]["path"]).reshape(-1, 3) for i in pick])
        if len(pixels) > settings.max_fit_pixels:
            pixels = pixels[np.sort(rng.choice(len(pixels), settings.max_fit_pixels, replace=False))]
        try:
            source = fit_stain_profile(pixels, settings.sparsity, settings.n_iter,
                                       settings.od_threshold, settings.percentile)
        except InsufficientTissueError as exc:
            errors.append(f"slide {slide_id}: {exc}")
            continue
        source.save(out_dir / "profiles" / f"{slide_id}.json")

        def work(r):
            rgb = io.read_png_rgb(tile_dir / r["path"])
            io.write_png_rgb(out_dir / r["path"], normalize_to(rgb, source, target))
            return r

        kept += ordered_map(work, rows, threads=threads)
    io.write_tile_index(out_dir, kept)
    return {"tiles_normalized": len(kept), "errors": errors}


def segment_tiles(tile_dir, profile: StainProfile, out_dir, threads=None) -> dict:
    tile_dir, out_dir = Path(tile_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = io.read_tile_index(tile_dir)

    def work(r):
        rgb = io.read_png_rgb(tile_dir / r["path"])
        stem = Path(r["path"]).stem
        save_heatmap(out_dir / io.heatmap_name(stem), stand_in_segmenter(rgb, profile))

    ordered_map(work, index, threads=threads)
    return {"heatmaps": len(index), "errors": []}


def load_bags(tile_dir, heatmap_dir, labels: dict | None = None, threads=None) -> tuple[list[Bag], list[str]]:
    """Assemble feature bags from a tile directory and matching heatmaps.

    Slides missing from ``labels`` get label 0 when ``labels`` is None (scoring only)
    and are skipped otherwise.
    """
    tile_dir, heatmap_dir = Path(tile_dir), Path(heatmap_dir)
    bags, errors = [], []
    for slide_id, rows in sorted(_group_by_slide(io.read_tile_index(tile_dir)).items()):
        if labels is not None and slide_id not in labels:
            continue

        def feats(r):
            rgb = io.read_png_rgb(tile_dir / r["path"])
            try:
                hm = load_heatmap(heatmap_dir / io.heatmap_name(Path(r["path"]).stem), rgb.shape[:2])
            except (OSError, ValueError) as exc:
                return exc
            return tile_features(Tile4C.from_uint8(rgb, hm, slide_id, r["row"], r["col"]))

        results = ordered_map(feats, rows, threads=threads)
        good = [(r, f) for r, f in zip(rows, results) if not isinstance(f, Exception)]
        errors += [f"tile {r['path']}: {f}" for r, f in zip(rows, results) if isinstance(f, Exception)]
        if not good:
            continue
        label = labels[slide_id] if labels is not None else 0
        bags.append(Bag(slide_id, label, features=np.stack([f for _, f in good]),
                        coords=[(r["row"], r["col"]) for r, _ in good]))
    return bags, errors


def split_bags(bags, train_fraction, seed):
    ids = sorted(b.slide_id for b in bags)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train_ids = {ids[i] for i in order[:n_train]}
    return ([b for b in bags if b.slide_id in train_ids],
            [b for b in bags if b.slide_id not in train_ids])


def _parse_covariates(specs):
    names, categorical = [], {}
    for s in specs:
        name, _, ref = str(s).partition(":")
        names.append(name)
        if ref:
            categorical[name] = ref
    return names, categorical


def survival_analysis(cohort_csv, scores_csv, settings: SurvivalSettings, out_dir,
                      patient_ids=None) -> dict:
    """Univariable and multivariable Cox models, KM curves, log-rank and td-AUC tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = io.read_bag_scores(scores_csv)
    records = [r for r in read_cohort_csv(cohort_csv) if r.patient_id in scores]
    if patient_ids is not None:
        records = [r for r in records if r.patient_id in set(patient_ids)]
    for r in records:
        r.covariates["classifier"] = 1.0 if scores[r.patient_id]["risk_class"] == "high" else 0.0
        r.covariates["classifier_score"] = scores[r.patient_id]["sigmoid_s"]

    names, categorical = _parse_covariates(settings.covariates)
    errors = []
    design: dict[str, list] = {}
    for name in list(names):
        if name in categorical:
            try:
                design[name] = encode_categorical(records, name, categorical[name])
            except ValueError as exc:
                errors.append(f"covariate {name}: {exc}")
                names.remove(name)
                continue
            levels = sorted({str(r.covariates[name]) for r in records if r.covariates.get(name) is not None})
            for r in records:
                v = r.covariates.get(name)
                r.covariates[f"{name}#rank"] = None if v is None else float(levels.index(str(v)))
        else:
            design[name] = [name]
    design["classifier"] = ["classifier"]

    def fit_rows(cols, label):
        kept, dropped = complete_cases(records, cols)
        try:
            fit = cox_fit(kept, cols, ties=settings.ties)
        except (CollinearityError, ValueError) as exc:
            errors.append(f"cox {label}: {exc}")
            return [[c, float("nan"), float("nan"), float("nan"), float("nan"), float("nan")] for c in cols], dropped
        if not fit.converged:
            errors.append(f"cox {label}: not converged ({fit.message})")
        return [[t["variable"], t["hr"], t["ci_low"], t["ci_high"], t["z"], t["p"]] for t in fit.table()], dropped

    header = ["variable", "hr", "ci_low", "ci_high", "z", "p"]
    uni, excluded = [], {}
    for name, cols in design.items():
        rows, dropped = fit_rows(cols, name)
        uni += rows
        excluded[name] = dropped
    io.write_csv(out_dir / "cox.csv", header, uni)
    all_cols = [c for cols in design.values() for c in cols]
    multi, excluded["multivariable"] = fit_rows(all_cols, "multivariable")
    io.write_csv(out_dir / "cox_multivariable.csv", header, multi)

    km, lr = [], []
    time_arr, event_arr = as_arrays(records)
    groups = {"high": [r for r in records if r.covariates["classifier"] == 1.0],
              "low": [r for r in records if r.covariates["classifier"] == 0.0]}
    for g, sub in groups.items():
        if sub:
            km += km_rows(km_estimate(sub), "all", f"classifier={g}")
    if records and event_arr.any() and all(groups.values()):
        chi2, df, p = logrank_arrays(time_arr, event_arr, covariate_values(records, "classifier"))
        lr.append(["all", len(records), int(event_arr.sum()), chi2, df, p, True, ""])
    else:
        lr.append(["all", len(records), int(event_arr.sum()), float("nan"), 0, float("nan"),
                   False, "single risk class or no events"])
    for name in settings.stratify_by:
        kept, _ = complete_cases(records, [name])
        for res in stratified_analysis(kept, name, "classifier"):
            stratum = f"{name}={res.stratum}"
            lr.append([stratum, res.n, res.events, res.chi2, res.df, res.p, res.testable, res.note])
            for g in ("high", "low"):
                sub = [r for r in kept if r.covariates[name] == res.stratum
                       and r.covariates["classifier"] == (1.0 if g == "high" else 0.0)]
                if sub:
                    km += km_rows(km_estimate(sub), stratum, f"classifier={g}")
    io.write_csv(out_dir / "km.csv", ["stratum", "group", "time", "survival", "at_risk", "events"], km)
    io.write_csv(out_dir / "logrank.csv", ["stratum", "n", "events", "chi2", "df", "p", "testable", "note"], lr)

    auc_rows = []
    markers = ["classifier_score"] + [f"{n}#rank" if n in categorical else n for n in names]
    for m in markers:
        kept, _ = complete_cases(records, [m])
        label = m.replace("#rank", "")
        if not kept:
            auc_rows += [[label, float(t), float("nan")] for t in settings.times]
            continue
        for t, auc in td_auc(kept, m, settings.times):
            auc_rows.append([label, t, auc])
    io.write_csv(out_dir / "td_auc.csv", ["marker", "time", "auc"], auc_rows)
    return {"patients": len(records), "events": int(event_arr.sum()), "excluded": excluded,
            "errors": errors}


# --------------------------------------------------------------------------- runner

@dataclass
class _StageRun:
    name: str
    digest: str
    directory: Path


def _stage(report, root, name, key, fn):
    """Run ``fn(directory)`` unless a completed stage with the same key exists."""
    digest = config_hash(key)
    directory = root / "stages" / f"{name}-{digest[:16]}"
    marker = directory / "stage.json"
    entry = {"hash": digest, "dir": str(directory)}
    t0 = time.perf_counter()
    if marker.exists():
        entry.update(status="cached", **json.loads(marker.read_text()))
    else:
        directory.mkdir(parents=True, exist_ok=True)
        try:
            result = fn(directory)
        except Exception as exc:
            log.exception("stage %s failed", name)
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            report["stages"][name] = entry
            return None
        marker.write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
        entry.update(status="ran", **result)
    entry["seconds"] = round(time.perf_counter() - t0, 3)
    report["stages"][name] = entry
    return _StageRun(name, digest, directory)


def _skip(report, name, reason):
    report["stages"][name] = {"status": "skipped", "reason": reason}


def run_pipeline(cfg: PipelineConfig, threads=None) -> dict:
    """Execute every stage in order and write ``run_report.json`` under the output directory."""
    cfg.validate()
    root = Path(cfg.paths.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    report = {"tool": "histomil", "version": __version__, "config": cfg.as_dict(),
              "config_hash": config_hash(cfg.as_dict()), "stages": {}}

    manifest = io.read_manifest(cfg.paths.slides_manifest)
    inputs = {"manifest": file_digest(cfg.paths.slides_manifest),
              "slides": [file_digest(e["path"]) for e in manifest]}
    tiled = _stage(report, root, "tile", {"inputs": inputs, "tiling": asdict(cfg.tiling)},
                   lambda d: tile_slides(cfg.paths.slides_manifest, cfg.tiling, d, threads))
    if tiled is None:
        return _finish(report, root)

    target = StainProfile.load(cfg.paths.target_profile) if cfg.paths.target_profile else DEFAULT_TARGET_PROFILE
    normed = _stage(report, root, "normalize",
                    {"up": tiled.digest, "stain": asdict(cfg.stain), "seed": cfg.seed,
                     "target": target.to_json()},
                    lambda d: normalize_tiles(tiled.directory, target, d, cfg.stain, cfg.seed, threads))
    if normed is None:
        return _finish(report, root)

    if cfg.paths.heatmap_dir:
        heat = _stage(report, root, "segment", {"external": dir_digest(cfg.paths.heatmap_dir)},
                      lambda d: {"heatmaps": "external", "source": cfg.paths.heatmap_dir, "errors": []})
        heat_dir = Path(cfg.paths.heatmap_dir)
    else:
        heat = _stage(report, root, "segment", {"up": normed.digest, "profile": target.to_json()},
                      lambda d: segment_tiles(normed.directory, target, d, threads))
        heat_dir = heat.directory if heat else None
    if heat is None:
        return _finish(report, root)

    labels = io.read_bag_labels(cfg.paths.labels_csv)
    labels_digest = file_digest(cfg.paths.labels_csv)
    bags, bag_errors = load_bags(normed.directory, heat_dir, labels, threads)
    report["counts"] = {"bags": len(bags), "tiles_in_bags": int(sum(len(b) for b in bags))}
    if bag_errors:
        report["stages"]["segment"].setdefault("errors", []).extend(bag_errors)
    if not bags:
        for name in ("train", "score", "survival", "report"):
            _skip(report, name, "no bags")
        return _finish(report, root)
    train_bags, holdout = split_bags(bags, cfg.train_fraction, cfg.seed)

    def do_train(d):
        ckpt = train(train_bags, cfg.training, cfg.aggregation, cfg.loss)
        ckpt.save(d / "model.ckpt")
        return {"train_bags": [b.slide_id for b in train_bags],
                "holdout_bags": [b.slide_id for b in holdout],
                "loss_trace": [float(x) for x in ckpt.loss_trace], "errors": []}

    trained = _stage(report, root, "train",
                     {"up": heat.digest, "tiles": normed.digest, "labels": labels_digest, "agg": asdict(cfg.aggregation),
                      "loss": asdict(cfg.loss), "training": asdict(cfg.training),
                      "train_fraction": cfg.train_fraction, "seed": cfg.seed},
                     do_train)
    if trained is None:
        return _finish(report, root)

    def do_score(d):
        ckpt = ModelCheckpoint.load(trained.directory / "model.ckpt")
        scored = [score_bag(b, ckpt.params, ckpt.aggregation, ckpt.loss) for b in bags]
        io.write_scores(d / "scores.csv", scored)
        top = top_predictive_tiles(scored, cfg.top_k)
        header = ["slide_id", "row", "col", "score"]
        io.write_csv(d / "top_high.csv", header, top.high)
        io.write_csv(d / "top_low.csv", header, top.low)
        return {"scored_bags": len(scored),
                "high_risk": sum(b.risk_class == "high" for b in scored),
                "top_k_truncated": top.truncated, "errors": []}

    scored = _stage(report, root, "score", {"up": trained.digest, "top_k": cfg.top_k}, do_score)
    if scored is None:
        return _finish(report, root)

    subset = None
    if cfg.survival.subset == "holdout":
        subset = json.loads((trained.directory / "stage.json").read_text())["holdout_bags"]
    surv = _stage(report, root, "survival",
                  {"up": scored.digest, "cohort": file_digest(cfg.paths.cohort_csv),
                   "survival": asdict(cfg.survival)},
                  lambda d: survival_analysis(cfg.paths.cohort_csv, scored.directory / "scores.csv",
                                              cfg.survival, d, subset))
    if surv is None:
        return _finish(report, root)

    _stage(report, root, "report", {"up": surv.digest},
           lambda d: {"files": [str(p.relative_to(d)) for p in emit_figures_data(surv.directory, d)],
                      "errors": []})
    return _finish(report, root)


STAGES = ("tile", "normalize", "segment", "train", "score", "survival", "report")


def _finish(report, root) -> dict:
    for name in STAGES:
        if name not in report["stages"]:
            _skip(report, name, "upstream stage failed")
    stages = report["stages"].values()
    report["status"] = ("failed" if any(s["status"] == "failed" for s in stages) else
                        "partial" if any(s.get("errors") for s in stages) else "ok")
    (root / "run_report.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=str) + "\n")
    return report


def stage_dir(report: dict, name: str) -> Path:
    return Path(report["stages"][name]["dir"])
