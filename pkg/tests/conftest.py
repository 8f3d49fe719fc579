import csv
import sys
import json

import pytest

from histomil.synthetic import generate_synthetic_cohort

SMALL_TILING = {"tile_px": 256, "stride_px": 256, "output_px": 64, "tissue_threshold": 0.5}


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Six 1024 px slides on a 4x4 grid of 256 px tiles (last column blank)."""
    root = tmp_path_factory.mktemp("cohort")
    return generate_synthetic_cohort(root, n_slides=6, seed=17, slide_px=1024, tile_px=256, out_px=64)


def _first_stage(cohort):
    with open(cohort.cohort_csv, newline="") as fh:
        return min(row["stage"] for row in csv.DictReader(fh))


def small_config(cohort, out_dir, **overrides):
    doc = {
        "paths": {"slides_manifest": str(cohort.manifest), "labels_csv": str(cohort.labels_csv),
                  "cohort_csv": str(cohort.cohort_csv), "output_dir": str(out_dir)},
        "tiling": dict(SMALL_TILING),
        "stain": {"max_fit_pixels": 20000},
        "training": {"epochs": 3, "initial_lr": 1e-3},
        "survival": {"covariates": ["age", f"stage:{_first_stage(cohort)}"], "times": [12.0, 24.0], "stratify_by": ["stage"],
                     "subset": "all"},
        "top_k": 10,
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            doc.setdefault(section, {}).update(values)
        else:
            doc[section] = values
    return doc


def write_config(path, doc):
    path.write_text(json.dumps(doc, indent=1))
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.verdict_line(n))
