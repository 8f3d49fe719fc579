"""End-to-end pipeline on a small synthetic cohort, then a cached rerun.

Equivalent CLI: histomil synth --out DIR && histomil run --config DIR/pipeline.json.
Run: python3 demos/pipeline_run.py (about a minute).
"""

import tempfile
import time
from pathlib import Path

from histomil.pipeline import PipelineConfig, run_pipeline
from histomil.synthetic import generate_synthetic_cohort

work = Path(tempfile.mkdtemp(prefix="histomil_demo_"))
cohort = generate_synthetic_cohort(work / "data", n_slides=16, slide_px=1024, tile_px=256, out_px=64)

cfg = PipelineConfig.from_dict({
    "paths": {"slides_manifest": str(cohort.manifest), "labels_csv": str(cohort.labels_csv),
              "cohort_csv": str(cohort.cohort_csv), "output_dir": str(work / "out")},
    "tiling": {"tile_px": 256, "stride_px": 256, "output_px": 64},
    "training": {"epochs": 20},
    "survival": {"covariates": ["age", "afp"], "times": [12, 24]},
}, base_dir=work)

# %% first run computes every stage
t0 = time.time()
report = run_pipeline(cfg, threads=1)
print(f"status {report['status']} in {time.time() - t0:.1f}s")
for name, stage in report["stages"].items():
    print(f"  {name:10s} {stage['status']}")

# %% an identical rerun reuses every stage directory
t0 = time.time()
again = run_pipeline(cfg, threads=1)
print(f"rerun: {[s['status'] for s in again['stages'].values()]} in {time.time() - t0:.1f}s")
print("outputs under", work / "out")
tile = report["stages"]["tile"]
print("tiles kept", tile["tiles_kept"], "background", tile["tiles_background"])
