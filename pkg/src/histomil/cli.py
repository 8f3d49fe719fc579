"""``histomil`` command line.

Exit codes: 0 success, 1 configuration or usage error, 2 stage failure,
3 finished with per-item errors (listed on stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from histomil import __version__, io
from histomil.figures import emit_figures_data
from histomil.mil import (AggregationConfig, LossConfig, ModelCheckpoint, TrainingConfig,
                          score_bag, top_predictive_tiles, train)
from histomil.nuclei import DiceConfig, dice_score, load_heatmap
from histomil.pipeline import (ConfigError, PipelineConfig, StainSettings, SurvivalSettings,
                               load_bags, normalize_tiles, run_pipeline, segment_tiles,
                               survival_analysis, tile_slides)
from histomil.stain import DEFAULT_TARGET_PROFILE, StainProfile
from histomil.synthetic import generate_synthetic_cohort
from histomil.tiling import TileSpec

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_PARTIAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would exit with 2, which is reserved for stage failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _need(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _profile(path):
    if not path:
        return DEFAULT_TARGET_PROFILE
    try:
        return StainProfile.load(_need(path, "stain profile"))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid stain profile {path}: {exc}") from exc


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_run(a):
    try:
        cfg = PipelineConfig.load(a.config)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        report = run_pipeline(cfg, threads=a.threads)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    for name, stage in report["stages"].items():
        print(f"{name:10s} {stage['status']}")
    print(f"report: {Path(cfg.paths.output_dir) / 'run_report.json'}")
    if report["status"] == "failed":
        failed = [n for n, s in report["stages"].items() if s["status"] == "failed"]
        raise RuntimeError("; ".join(f"{n}: {report['stages'][n]['error']}" for n in failed))
    return [e for s in report["stages"].values() for e in s.get("errors", [])]


def cmd_tile(a):
    _need(a.manifest, "manifest")
    try:
        spec = TileSpec(a.tile_px, a.stride, a.out_px, a.tissue_threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stats = tile_slides(a.manifest, spec, a.out, a.threads)
    print(f"slides {stats['slides']}  kept {stats['tiles_kept']}  "
          f"background {stats['tiles_background']}  failed {stats['tiles_failed']}")
    return stats["errors"]


def cmd_normalize(a):
    _need(Path(a.tiles) / io.TILE_INDEX, "tile index")
    settings = StainSettings(sparsity=a.sparsity, n_iter=a.n_iter)
    stats = normalize_tiles(a.tiles, _profile(a.target), a.out, settings, a.seed, a.threads)
    print(f"normalized {stats['tiles_normalized']} tiles")
    return stats["errors"]


def cmd_segment(a):
    _need(Path(a.tiles) / io.TILE_INDEX, "tile index")
    stats = segment_tiles(a.tiles, _profile(a.profile), a.out, a.threads)
    print(f"wrote {stats['heatmaps']} heatmaps")
    return stats["errors"]


def _strip(stem):
    for suffix in ("_hm", "_mask"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def cmd_dice(a):
    pred = {_strip(p.stem): p for p in sorted(_need(a.pred, "prediction dir").glob("*.png"))}
    truth = {_strip(p.stem): p for p in sorted(_need(a.truth, "truth dir").glob("*.png"))}
    keys = sorted(set(pred) & set(truth))
    if not keys:
        raise UsageError("no prediction/truth pairs with matching names")
    cfg = DiceConfig(strict_eq1=not a.conventional)
    scores, errors = [], []
    for k in keys:
        try:
            p = load_heatmap(pred[k])
            t = load_heatmap(truth[k], p.shape) >= 0.5
            scores.append(dice_score(p, t, cfg, a.binarize_at))
        except (OSError, ValueError) as exc:
            errors.append(f"{k}: {exc}")
    if not scores:
        raise RuntimeError("no pair could be evaluated")
    print(json.dumps({"pairs": len(scores), "mean_dice": sum(scores) / len(scores)}))
    return errors


def cmd_train(a):
    labels = io.read_bag_labels(_need(a.bags, "bag labels"))
    bags, errors = load_bags(_need(a.tiles, "tile dir"), _need(a.heatmaps, "heatmap dir"), labels, a.threads)
    if not bags:
        raise UsageError("no labelled bags found in the tile directory")
    cfg = TrainingConfig(initial_lr=a.lr, epochs=a.epochs, seed=a.seed)
    ckpt = train(bags, cfg, AggregationConfig(p=a.p, mode=a.mode), LossConfig(label_orientation=a.orientation))
    ckpt.save(a.out)
    trace = ckpt.loss_trace
    if trace:
        print(f"bags {len(bags)}  loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return errors


def cmd_score(a):
    ckpt = ModelCheckpoint.load(_need(a.model, "model"))
    bags, errors = load_bags(_need(a.tiles, "tile dir"), _need(a.heatmaps, "heatmap dir"), None, a.threads)
    scored = [score_bag(b, ckpt.params, ckpt.aggregation, ckpt.loss) for b in bags]
    io.write_scores(a.out, scored)
    print(f"scored {len(scored)} bags, {sum(b.risk_class == 'high' for b in scored)} high risk")
    return errors


def cmd_top_tiles(a):
    tiles_csv = io.tile_scores_path(_need(a.scores, "scores"))
    scored = io.read_tile_scores(_need(tiles_csv, "per-tile scores"))
    top = top_predictive_tiles(scored, a.k)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["slide_id", "row", "col", "score"]
    io.write_csv(out / "top_high.csv", header, top.high)
    io.write_csv(out / "top_low.csv", header, top.low)
    if top.truncated:
        print(f"only {len(top.high)} tiles available for k={a.k}")
    return []


def cmd_survival(a):
    settings = SurvivalSettings(covariates=[c for c in a.covariates.split(",") if c],
                                times=_floats(a.times),
                                stratify_by=[c for c in a.stratify_by.split(",") if c],
                                ties=a.ties)
    stats = survival_analysis(_need(a.cohort, "cohort"), _need(a.scores, "scores"), settings, a.out)
    print(f"patients {stats['patients']}  events {stats['events']}")
    return stats["errors"]


def cmd_report(a):
    written = emit_figures_data(_need(a.results, "results dir"), a.out)
    print(f"wrote {len(written)} files")
    return []


def cmd_synth(a):
    try:
        c = generate_synthetic_cohort(a.out, a.n_slides, a.witness_fraction, a.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    config = {
        "paths": {"slides_manifest": c.manifest.name, "labels_csv": c.labels_csv.name,
                  "cohort_csv": c.cohort_csv.name, "output_dir": "run"},
        "survival": {"covariates": ["age", "afp"], "stratify_by": ["stage"],
                     "times": [12.0, 24.0, 36.0]},
        "seed": a.seed,
    }
    (c.root / "pipeline.json").write_text(json.dumps(config, indent=1) + "\n")
    print(f"synthetic cohort in {c.root}; run with: histomil run --config {c.root / 'pipeline.json'}")
    return []


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="histomil", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default HISTOMIL_THREADS or cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("run", help="run every stage from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("tile", help="cut slides into tissue tiles")
    s.add_argument("--manifest", required=True)
    s.add_argument("--tile-px", type=int, default=512)
    s.add_argument("--stride", type=int, default=512)
    s.add_argument("--out-px", type=int, default=224)
    s.add_argument("--tissue-threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_tile)

    s = sub.add_parser("normalize", help="stain-normalise a tile directory")
    s.add_argument("--tiles", required=True)
    s.add_argument("--target", default="", help="target stain profile JSON (default: built-in reference)")
    s.add_argument("--sparsity", type=float, default=0.1)
    s.add_argument("--n-iter", type=int, default=50)
    s.add_argument("--seed", type=int, default=17)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_normalize)

    s = sub.add_parser("segment", help="write nucleus heatmaps with the stand-in segmenter")
    s.add_argument("--tiles", required=True)
    s.add_argument("--profile", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_segment)

    s = sub.add_parser("dice", help="mean per-tile Dice of heatmaps against truth masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--binarize-at", type=float, default=0.5)
    s.add_argument("--conventional", action="store_true", help="score 1 when both masks are empty")
    s.set_defaults(fn=cmd_dice)

    s = sub.add_parser("train", help="train the bag classifier")
    s.add_argument("--bags", required=True, help="CSV with slide_id,label")
    s.add_argument("--tiles", required=True)
    s.add_argument("--heatmaps", required=True)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--p", type=float, default=3.0)
    s.add_argument("--mode", choices=["signed_mean", "power_sum"], default="signed_mean")
    s.add_argument("--orientation", choices=["literal", "risk"], default="literal")
    s.add_argument("--seed", type=int, default=17)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("score", help="score every bag in a tile directory")
    s.add_argument("--model", required=True)
    s.add_argument("--tiles", required=True)
    s.add_argument("--heatmaps", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("top-tiles", help="highest and lowest scoring tiles")
    s.add_argument("--scores", required=True)
    s.add_argument("--k", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_top_tiles)

    s = sub.add_parser("survival", help="Cox, Kaplan-Meier, log-rank and td-AUC tables")
    s.add_argument("--cohort", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--covariates", default="", help="comma list; name:ref marks a categorical")
    s.add_argument("--times", default="12,24,36")
    s.add_argument("--stratify-by", default="")
    s.add_argument("--ties", choices=["efron", "breslow"], default="efron")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_survival)

    s = sub.add_parser("report", help="figure CSVs and SVGs from survival outputs")
    s.add_argument("--results", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("synth", help="generate a synthetic cohort and a matching config")
    s.add_argument("--out", required=True)
    s.add_argument("--n-slides", type=int, default=16)
    s.add_argument("--witness-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=17)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(f"histomil: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        errors = a.fn(a)
    except UsageError as exc:
        print(f"histomil: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logging.getLogger("histomil").debug("failure", exc_info=True)
        print(f"histomil: {a.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    if errors:
        for e in errors:
            print(f"histomil: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
