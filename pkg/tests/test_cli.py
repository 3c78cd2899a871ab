import json
import logging
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest

import config as cfgmod
from cli import decimal_string, main
from io_utils import pbm_bytes


@pytest.fixture(autouse=True)
def restore_root_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(cfgmod.dumps(tiny_config))
    return path


def test_schedule_count(capsys):
    assert main(["schedule", "count", "-F", "16", "-T", "1000"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["unconstrained"] == "1" + "0" * 48
    assert out["nondecreasing_digits"] == 35
    assert out["orders_of_magnitude_saved"] >= 13


def test_schedule_sample_lines(capsys):
    assert main(["--seed", "3", "schedule", "sample", "-F", "4", "-T", "6", "--samples", "5"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 5
    assert all(r == sorted(r) and 1 <= r[0] and r[-1] <= 6 for r in rows)


def test_schedule_ad_csv(tmp_path):
    target = tmp_path / "plan.csv"
    assert main(["schedule", "ad", "-F", "2", "-T", "3", "--diff", "3", "--csv", str(target)]) == 0
    plan = pd.read_csv(target)
    assert list(plan.columns) == ["step", "t1", "t2"]
    assert plan[["t1", "t2"]].values.tolist() == [[3, 3], [2, 3], [1, 3], [0, 3], [0, 2], [0, 1], [0, 0]]


def test_schedule_count_ratio_is_decimal(capsys):
    assert main(["schedule", "count", "-F", "2", "-T", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert (out["ratio"], out["ratio_exact"]) == ("1.5", True)
    assert main(["schedule", "count", "-F", "2", "-T", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ratio"] == "1." + "3" * 30
    assert out["ratio_exact"] is False
    assert main(["schedule", "count", "-F", "1", "-T", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["ratio"] == "1"


def test_decimal_string_terminating():
    assert decimal_string(Fraction(1, 8)) == ("0.125", True)
    assert decimal_string(Fraction(7, 1)) == ("7", True)
    assert decimal_string(Fraction(1, 3), digits=4) == ("0.3333", False)


def test_schedule_ad_stdout_is_csv(capsys):
    assert main(["schedule", "ad", "-F", "2", "-T", "3", "--diff", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "step,t1,t2"
    assert lines[1:] == ["0,3,3", "1,2,3", "2,1,3", "3,0,3", "4,0,2", "5,0,1", "6,0,0"]


def test_dry_run_rejected_where_unsupported(tmp_path, capsys):
    assert main(["--dry-run", "schedule", "count", "-F", "2", "-T", "3"]) == 1
    err = capsys.readouterr().err
    assert "--dry-run is not supported by schedule" in err
    target = tmp_path / "plan.csv"
    assert main(["--dry-run", "schedule", "ad", "-F", "2", "-T", "3", "--diff", "3", "--csv", str(target)]) == 1
    assert not target.exists()
    for argv in (["crop"], ["bucket", "a.csv", "b.csv"], ["report", str(tmp_path)],
                 ["score-manual", "blurry=1"]):
        assert main(["--dry-run", *argv]) == 1
        assert "not supported" in capsys.readouterr().err


def test_schedule_errors(capsys):
    assert main(["schedule", "ad", "-F", "2", "-T", "3"]) == 1
    assert main(["schedule", "ad", "-F", "2", "-T", "3", "--diff", "4"]) == 1
    assert "error:" in capsys.readouterr().err


def test_score_manual(capsys):
    assert main(["score-manual", "subject_distortion=2", "interaction_violation=1"]) == 0
    assert json.loads(capsys.readouterr().out)["score"] == 8
    assert main(["score-manual", "subject_distortion=many"]) == 1
    assert main(["score-manual", "blurry=1"]) == 1


def test_crop_from_detections(tmp_path, capsys):
    spec = tmp_path / "det.json"
    spec.write_text(json.dumps({"width": 100, "height": 100,
                                "boxes": [{"top": 80, "left": 0, "bottom": 99, "right": 99}]}))
    assert main(["crop", "--detections", str(spec)]) == 0
    out = capsys.readouterr().out
    verdict = json.loads(out[:out.rindex("}") + 1])
    assert verdict["rect"]["bottom"] == 79
    assert verdict["accepted"] is False
    assert out.rstrip().splitlines()[-1].startswith("REJECT")


def test_crop_from_pbm(tmp_path, capsys):
    mask = np.ones((20, 30), dtype=np.uint8)
    mask[0, 0] = 0
    (tmp_path / "m.pbm").write_bytes(pbm_bytes(mask))
    assert main(["crop", "--pbm", str(tmp_path / "m.pbm"), "--area-threshold", "0.9"]) == 0
    assert capsys.readouterr().out.rstrip().endswith("ACCEPT")
    assert main(["crop"]) == 1


def test_bucket_manifest(tmp_path, capsys):
    manifest = tmp_path / "clips.csv"
    pd.DataFrame({"path": ["a", "b"], "duration": [4.0, 9.0], "width": [1920, 720],
                  "height": [1080, 1280], "fps": [30, 16]}).to_csv(manifest, index=False)
    out = tmp_path / "bucketed.csv"
    assert main(["bucket", str(manifest), str(out)]) == 0
    result = pd.read_csv(out)
    assert list(result["target_fps"]) == [24, 16]
    assert list(result["bucket_id"]) == [1 * 5 + 4, 2 * 5 + 0]
    assert "Bucketed 2 of 2" in capsys.readouterr().out


def test_dry_run_prints_resolved_config(config_file, capsys):
    assert main(["--config", str(config_file), "--seed", "11", "--dry-run", "run"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["seed"] == 11
    assert resolved["model"]["dim"] == 9


def test_missing_config_fails(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "nope.json"), "run"]) == 1
    assert "--config" in capsys.readouterr().err


def test_run_and_report(config_file, tmp_path, capsys):
    out = tmp_path / "cli_run"
    assert main(["--config", str(config_file), "--out", str(out), "run"]) == 0
    assert (out / "metrics.csv").exists()
    assert main(["report", str(out)]) == 0
    assert (out / "report.pdf").read_bytes().startswith(b"%PDF")
    assert "drift_median" in capsys.readouterr().out


def test_train_sample_rollout(config_file, tmp_path, capsys):
    out = tmp_path / "model"
    assert main(["--config", str(config_file), "--out", str(out), "train"]) == 0
    checkpoint = out / "model.dfck"
    assert checkpoint.exists() and (out / "loss.csv").exists()

    samples = tmp_path / "samples"
    assert main(["--out", str(samples), "sample", "--checkpoint", str(checkpoint),
                 "--n", "2", "--s", "1", "--format", "pgm"]) == 0
    assert len(list((samples / "sample_001").glob("frame_*.pgm"))) == 4

    roll = tmp_path / "roll"
    assert main(["--config", str(config_file), "--out", str(roll), "rollout",
                 "--checkpoint", str(checkpoint), "--total-frames", "9", "--history-noise", "0.1"]) == 0
    frames = pd.read_csv(roll / "rollouts.csv")
    assert len(frames) == 9
    report = json.loads((roll / "rollout_report.json").read_text())
    assert report["rollout"]["history_noise_t"] == 0.1
    assert [s["segment"] for s in report["segments"]] == [0, 1, 2, 3]

    assert main(["--config", str(config_file), "--out", str(roll), "rollout",
                 "--checkpoint", str(checkpoint), "--first-frame", str(roll / "rollouts.csv")]) == 0
    again = pd.read_csv(roll / "rollouts.csv")
    np.testing.assert_array_equal(again.iloc[0].to_numpy(), frames.iloc[0].to_numpy())
    capsys.readouterr()


def test_reward_train_and_dpo(config_file, tmp_path, capsys):
    out = tmp_path / "pref"
    assert main(["--config", str(config_file), "--out", str(out), "train"]) == 0
    assert main(["--config", str(config_file), "--out", str(out), "reward-train", "--save-pairs"]) == 0
    assert (out / "reward.dfrw").exists()
    assert (out / "pairs" / "pairs.jsonl").exists()
    assert main(["--config", str(config_file), "--out", str(out), "dpo",
                 "--checkpoint", str(out / "model.dfck"), "--reward", str(out / "reward.dfrw")]) == 0
    stages = pd.read_csv(out / "dpo_stages.csv")
    assert stages["first_loss"].iloc[0] == pytest.approx(np.log(2.0), abs=1e-12)
    capsys.readouterr()
