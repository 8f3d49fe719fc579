import csv
import json

import pytest

from histomil.cli import main
from histomil.stain import StainProfile

from conftest import small_config, write_config


@pytest.fixture(scope="module")
def tiled(small_cohort, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    args = ["tile", "--manifest", str(small_cohort.manifest), "--tile-px", "256", "--stride", "256",
            "--out-px", "64", "--out", str(d / "tiles")]
    assert main(args) == 0
    assert main(["normalize", "--tiles", str(d / "tiles"), "--out", str(d / "norm")]) == 0
    assert main(["segment", "--tiles", str(d / "norm"), "--out", str(d / "hm")]) == 0
    return d


def test_stage_commands_chain(tiled, small_cohort, capsys):
    d = tiled
    assert main(["train", "--bags", str(small_cohort.labels_csv), "--tiles", str(d / "norm"),
                 "--heatmaps", str(d / "hm"), "--epochs", "2", "--out", str(d / "m.ckpt")]) == 0
    assert main(["score", "--model", str(d / "m.ckpt"), "--tiles", str(d / "norm"),
                 "--heatmaps", str(d / "hm"), "--out", str(d / "scores.csv")]) == 0
    with open(d / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and set(rows[0]) == {"slide_id", "aggregate_S", "sigmoid_s", "risk_class"}
    assert main(["top-tiles", "--scores", str(d / "scores.csv"), "--k", "5", "--out", str(d / "top")]) == 0
    with open(d / "top" / "top_high.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5
    code = main(["survival", "--cohort", str(small_cohort.cohort_csv), "--scores", str(d / "scores.csv"),
                 "--covariates", "age", "--times", "12,24", "--out", str(d / "res")])
    assert code in (0, 3)  # six patients can trip convergence warnings
    assert main(["report", "--results", str(d / "res")]) == 0
    assert (d / "res" / "figures" / "td_auc.svg").exists()


def test_dice_against_truth_tiles(small_cohort, tmp_path, capsys):
    # the generator's truth tiles are 64 px for this cohort; heatmaps must match their names
    d = tmp_path
    assert main(["tile", "--manifest", str(small_cohort.manifest), "--tile-px", "256", "--stride", "256",
                 "--out-px", "64", "--out", str(d / "tiles")]) == 0
    assert main(["segment", "--tiles", str(d / "tiles"), "--out", str(d / "hm")]) == 0
    capsys.readouterr()
    assert main(["dice", "--pred", str(d / "hm"), "--truth", str(small_cohort.truth_dir / "tiles")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pairs"] == 72 and 0.0 < out["mean_dice"] <= 1.0


def test_run_and_exit_codes(small_cohort, tmp_path):
    cfg = write_config(tmp_path / "p.json", small_config(small_cohort, tmp_path / "out"))
    assert main(["run", "--config", str(cfg)]) in (0, 3)
    assert (tmp_path / "out" / "run_report.json").exists()
    # missing config and bad arguments are configuration errors
    assert main(["run", "--config", str(tmp_path / "none.json")]) == 1
    assert main(["tile"]) == 1
    assert main(["tile", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    assert main(["frobnicate"]) == 1
    bad = small_config(small_cohort, tmp_path / "out2")
    bad["tiling"]["tile_px"] = 0
    assert main(["run", "--config", str(write_config(tmp_path / "bad.json", bad))]) == 1


def test_stage_failure_exits_2_and_skips_downstream(small_cohort, tmp_path):
    degenerate = StainProfile([[0.6, 0.6], [0.7, 0.7], [0.3, 0.3]], [1.0, 1.0])
    degenerate.save(tmp_path / "flat.json")
    doc = small_config(small_cohort, tmp_path / "out", paths={"target_profile": str(tmp_path / "flat.json")})
    assert main(["run", "--config", str(write_config(tmp_path / "p.json", doc))]) == 2
    report = json.loads((tmp_path / "out" / "run_report.json").read_text())
    assert report["stages"]["normalize"]["status"] == "failed"
    assert report["stages"]["normalize"]["error"]
    assert {report["stages"][s]["status"] for s in ("segment", "train", "score", "survival", "report")} == {"skipped"}


def test_partial_success_exits_3(small_cohort, tmp_path):
    doc = small_config(small_cohort, tmp_path / "out", survival={"covariates": ["stage:IV"]})
    assert main(["run", "--config", str(write_config(tmp_path / "p.json", doc))]) == 3


def test_synth_writes_a_runnable_config(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--n-slides", "4", "--seed", "2"]) == 0
    cfg = json.loads((tmp_path / "s" / "pipeline.json").read_text())
    assert cfg["seed"] == 2 and (tmp_path / "s" / cfg["paths"]["slides_manifest"]).exists()
    assert main(["synth", "--out", str(tmp_path / "t"), "--n-slides", "2"]) == 1


def test_threads_option_and_version(small_cohort, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert main(["--threads", "2", "tile", "--manifest", str(small_cohort.manifest), "--tile-px", "256",
                 "--stride", "256", "--out-px", "64", "--out", str(tmp_path / "t")]) == 0
