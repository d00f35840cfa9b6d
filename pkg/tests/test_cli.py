import hashlib
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from main import FLAG_KEYS, build_parser, collect_overrides, main
from utils.tensor_io import load_checkpoint, load_tensor

OVERLAY = {
    "seed": 3,
    "threads": 2,
    "synthetic": {"ids": 6, "images_per_id_per_platform": 3, "image_height": 32, "image_width": 16},
    "backbone": {"stages": [[8, 2], [8, 2]]},
    "train": {"epochs": 1, "batch_size": 8, "instances_per_id": 2, "learning_rate": 1.0e-3},
    "stream2": {"epochs": 1, "ids_per_batch": 3, "learning_rate": 1.0e-3},
}


def tree_digest(directory: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file() and path.name != "run.log":
            digest.update(str(path.relative_to(directory)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture
def overlay(tmp_path):
    path = tmp_path / "overlay.yaml"
    path.write_text(yaml.safe_dump(OVERLAY))
    return path


@pytest.fixture
def data_dir(tmp_path, overlay):
    out = tmp_path / "data"
    assert main(["synth", "--config", str(overlay), "--out", str(out)]) == 0
    return out


@pytest.fixture
def trained(tmp_path, overlay, data_dir):
    run = tmp_path / "run"
    common = ["--config", str(overlay), "--data", str(data_dir), "--out", str(run)]
    assert main(["train", "--phase", "stream1", *common]) == 0
    assert main(["train", "--phase", "stream2", *common]) == 0
    return run


class TestUsage:
    def test_missing_out_is_a_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["synth", "--ids", "4"])
        assert info.value.code == 2

    def test_unknown_direction_is_a_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["eval", "--data", str(tmp_path), "--out", str(tmp_path), "--direction", "up"])
        assert info.value.code == 2

    def test_flags_map_to_config_keys(self):
        args = build_parser().parse_args(["train", "--out", "o", "--data", "d", "--phase", "stream2",
                                          "--lr", "0.01", "--alpha", "0", "--unfreeze-shared"])
        overrides = collect_overrides(args)
        assert overrides["stream2.learning_rate"] == 0.01
        assert overrides["loss.alpha"] == 0.0
        assert overrides["stream2.freeze_shared"] is False
        assert "train.learning_rate" not in overrides
        assert set(FLAG_KEYS.values()) >= {"loss.alpha", "synthetic.ids"}


class TestSynth:
    def test_one_identity_is_rejected(self, tmp_path):
        assert main(["synth", "--ids", "1", "--out", str(tmp_path / "d")]) == 1
        assert "at least 2 identities" in (tmp_path / "d" / "run.log").read_text()

    def test_same_seed_gives_identical_trees(self, tmp_path, overlay):
        for name in ("a", "b"):
            assert main(["synth", "--config", str(overlay), "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_outputs(self, data_dir):
        for name in ("manifest.csv", "attributes.csv", "schema.txt", "exclusions.txt", "config_echo.yaml",
                     "run.log"):
            assert (data_dir / name).exists()
        assert len(list((data_dir / "images").glob("*.png"))) == 36

    def test_unknown_log_level_falls_back(self, tmp_path, overlay, monkeypatch, caplog):
        monkeypatch.setenv("ATTRIB_REID_LOG", "chatty")
        assert main(["synth", "--config", str(overlay), "--out", str(tmp_path / "d")]) == 0
        assert "using INFO" in caplog.text

    def test_bad_overlay_key(self, tmp_path):
        overlay = tmp_path / "bad.yaml"
        overlay.write_text("loss: {gamma: 1}\n")
        assert main(["synth", "--config", str(overlay), "--out", str(tmp_path / "d")]) == 1


class TestTrain:
    def test_stream2_needs_stream1(self, tmp_path, overlay, data_dir):
        out = tmp_path / "run"
        code = main(["train", "--phase", "stream2", "--config", str(overlay), "--data", str(data_dir),
                     "--out", str(out)])
        assert code == 1
        assert "Stream-1 checkpoint" in (out / "run.log").read_text()

    def test_artifacts(self, trained):
        split = pd.read_csv(trained / "split.csv", dtype=str)
        assert set(split["subset"]) == {"train", "test"}
        assert (split["subset"] == "train").sum() == 3
        _, config = load_checkpoint(trained / "stream1")
        assert config["backbone"]["stages"] == [[8, 2], [8, 2]]
        assert len(config["identities"]) == 3
        assert list(pd.read_csv(trained / "telemetry_stream2.csv")["epoch"]) == [1]

    def test_zero_balance_factors(self, tmp_path, overlay, data_dir, trained):
        out = tmp_path / "zero"
        code = main(["train", "--phase", "stream2", "--alpha", "0", "--beta", "0", "--config", str(overlay),
                     "--data", str(data_dir), "--stream1", str(trained / "stream1"), "--out", str(out)])
        assert code == 0
        telemetry = pd.read_csv(out / "telemetry_stream2.csv")
        assert (telemetry["L_p1"] == 0).all() and (telemetry["L_p2"] == 0).all()

    def test_config_echo_reproduces_the_run(self, tmp_path, data_dir, trained):
        echo = trained / "config_echo.yaml"
        out = tmp_path / "again"
        assert main(["train", "--phase", "stream1", "--config", str(echo), "--data", str(data_dir),
                     "--out", str(out)]) == 0
        assert (out / "telemetry_stream1.csv").read_bytes() == (trained / "telemetry_stream1.csv").read_bytes()


class TestEvalAndExplain:
    def test_eval_with_oracle(self, tmp_path, overlay, data_dir, trained):
        out = tmp_path / "eval"
        code = main(["eval", "--config", str(overlay), "--data", str(data_dir), "--stream1",
                     str(trained / "stream1"), "--direction", "both", "--oracle", "--per-query",
                     "--out", str(out)])
        assert code == 0
        report = pd.read_csv(out / "report.csv")
        assert report["direction"].tolist() == ["a2g", "g2a"]
        assert report["mAP"].between(0.0, 1.0).all()
        assert (out / "report.txt").exists()
        assert len(pd.read_csv(out / "per_query_ap.csv")) > 0

    def test_explain_identical_images(self, tmp_path, overlay, data_dir, trained):
        out = tmp_path / "explain"
        code = main(["explain", "--config", str(overlay), "--data", str(data_dir), "--stream1",
                     str(trained / "stream1"), "--query", "0000_a00", "--gallery", "0000_a00", "--out", str(out)])
        assert code == 0
        decomposition = pd.read_csv(out / "decomposition.csv")
        assert len(decomposition) == 88
        assert (decomposition["d_k"] == 0).all() and (decomposition["share"] == 0).all()
        pair = pd.read_csv(out / "pair.csv", dtype={"query_id": str, "gallery_id": str})
        assert pair.loc[0, "degenerate"] == 1
        assert pair.loc[0, "M_E"] == 0

    def test_explain_pair(self, tmp_path, overlay, data_dir, trained):
        out = tmp_path / "explain"
        code = main(["explain", "--config", str(overlay), "--data", str(data_dir), "--stream1",
                     str(trained / "stream1"), "--stream2", str(trained / "stream2"),
                     "--query", "0000_a00", "--gallery", "0001_g00", "--out", str(out)])
        assert code == 0
        maps = load_tensor(out / "aam_0000_a00.atrt")
        assert maps.shape == (88, 8, 4)
        assert np.all(maps > 0)
        assert (out / "aam_summary_0001_g00.csv").exists()
        decomposition = pd.read_csv(out / "decomposition.csv")
        pair = pd.read_csv(out / "pair.csv", dtype={"query_id": str, "gallery_id": str})
        row = pair.iloc[0]
        assert row["M_E"] == decomposition["exclusive"].sum() > 0
        assert row["d_hat"] == pytest.approx(decomposition["d_k"].sum(), rel=1e-8)
        assert row["L_d"] == pytest.approx(abs(row["d"] - row["d_hat"]), rel=1e-6, abs=1e-9)
        assert row["exclusive_share"] == pytest.approx(
            decomposition.loc[decomposition["exclusive"] == 1, "share"].sum(), abs=1e-8)

    def test_explain_unknown_image(self, tmp_path, overlay, data_dir, trained):
        code = main(["explain", "--config", str(overlay), "--data", str(data_dir), "--stream1",
                     str(trained / "stream1"), "--query", "nobody", "--gallery", "0000_a00",
                     "--out", str(tmp_path / "x")])
        assert code == 1

    def test_eval_compares_stream2_and_decomposes_held_out_pairs(self, tmp_path, overlay, data_dir, trained):
        out = tmp_path / "eval"
        code = main(["eval", "--config", str(overlay), "--data", str(data_dir), "--stream1",
                     str(trained / "stream1"), "--stream2", str(trained / "stream2"), "--direction", "both",
                     "--export-distances", "--out", str(out)])
        assert code == 0
        report = pd.read_csv(out / "report.csv")
        assert list(zip(report["model"], report["direction"])) == [
            ("baseline", "a2g"), ("baseline", "g2a"), ("explainable", "a2g"), ("explainable", "g2a")]
        assert "[baseline vs explainable / a2g]" in (out / "report.txt").read_text()
        distmat = pd.read_csv(out / "distmat_explainable_g2a.csv", index_col="query_id")
        # 3 test ids, 2 queries and 1 gallery image per id and platform
        assert distmat.shape == (6, 3)
        pairs = pd.read_csv(out / "decomposition_pairs.csv", dtype={"query_id": str, "gallery_id": str})
        assert len(pairs) == 2 * 6 * 3
        assert pairs["query_id"].str[5].ne(pairs["gallery_id"].str[5]).all()
        assert (pairs["d_hat"] > 0).all()
        summary = pd.read_csv(out / "explanation_summary.csv")
        assert summary["direction"].tolist() == ["a2g", "g2a"]
        assert summary["pairs"].tolist() == [18, 18]
        assert summary.loc[0, "mean_relative_gap"] == pytest.approx(
            pairs.loc[pairs["direction"] == "a2g", "relative_gap"].mean())

    def test_stream2_keeps_the_stream1_exponent(self, tmp_path, overlay, data_dir, trained, caplog):
        out = tmp_path / "p4"
        code = main(["train", "--phase", "stream2", "--gem-p", "4", "--config", str(overlay), "--data",
                     str(data_dir), "--stream1", str(trained / "stream1"), "--out", str(out)])
        assert code == 0
        assert "pooling.gem_p 4 ignored" in caplog.text
        _, config = load_checkpoint(out / "stream2")
        assert config["pooling"]["gem_p"] == 3.0

    def test_unfrozen_stream2_is_ranked_with_its_own_shared_stages(self, tmp_path, overlay, data_dir, trained):
        run = tmp_path / "unfrozen"
        assert main(["train", "--phase", "stream2", "--unfreeze-shared", "--config", str(overlay), "--data",
                     str(data_dir), "--stream1", str(trained / "stream1"), "--out", str(run)]) == 0
        out = tmp_path / "eval"
        assert main(["eval", "--config", str(overlay), "--data", str(data_dir), "--stream1",
                     str(trained / "stream1"), "--stream2", str(run / "stream2"), "--export-distances",
                     "--out", str(out)]) == 0
        baseline = pd.read_csv(out / "distmat_baseline_a2g.csv", index_col="query_id")
        explainable = pd.read_csv(out / "distmat_explainable_a2g.csv", index_col="query_id")
        assert baseline.shape == explainable.shape
        assert not np.allclose(baseline.to_numpy(), explainable.to_numpy())
