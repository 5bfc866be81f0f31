import json

import numpy as np
import pytest

from acacr import tensor as T
from acacr.cli import main, query_to_patch_index
from acacr.data import load_manifest, load_pair
from acacr.network import NetworkConfig, build_network, save_checkpoint


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = run("generate-data", "--out", str(root), "--seed", "5",
               "--count", "12", "--size", "16")
    assert code == 0
    return root


@pytest.fixture(scope="module")
def run_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "run.json"
    path.write_text(json.dumps({
        "network": {"c_in": 3, "channels": 8, "variant": "ac"},
        "train": {"lr": 1e-3, "batch_size": 2, "steps": 3, "seed": 1},
    }))
    return path


@pytest.fixture(scope="module")
def trained(dataset, run_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = run("train", "--config", str(run_config), "--data", str(dataset),
               "--out", str(out))
    assert code == 0
    return out


class TestGenerateData:
    def test_split_sizes(self, dataset):
        manifest = load_manifest(dataset)
        assert manifest.train_count == 8
        assert manifest.test_count == 4

    def test_rerun_identical(self, dataset, tmp_path):
        other = tmp_path / "again"
        assert run("generate-data", "--out", str(other), "--seed", "5",
                   "--count", "12", "--size", "16") == 0
        a = load_pair(dataset, "train", 3)
        b = load_pair(other, "train", 3)
        assert np.array_equal(a.cloudy, b.cloudy)

    def test_bad_coverage_is_usage_error(self, tmp_path):
        assert run("generate-data", "--out", str(tmp_path / "x"),
                   "--coverage", "1.5") == 2


class TestTrain:
    def test_artifacts_written(self, trained):
        for name in ("checkpoint.ckpt", "loss.csv", "eval.csv", "run.json"):
            assert (trained / name).exists(), name
        lines = (trained / "loss.csv").read_text().strip().split("\n")
        assert lines[0] == "step,loss"
        assert len(lines) == 4

    def test_run_manifest_records_variant(self, trained):
        doc = json.loads((trained / "run.json").read_text())
        assert doc["variant"] == "ac"
        assert doc["train"]["steps"] == 3

    def test_missing_config_is_usage_error(self, dataset, tmp_path):
        assert run("train", "--config", str(tmp_path / "nope.json"),
                   "--data", str(dataset), "--out", str(tmp_path / "o")) == 2

    def test_unknown_config_key_is_usage_error(self, dataset, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"optimiser": {}}))
        assert run("train", "--config", str(bad), "--data", str(dataset),
                   "--out", str(tmp_path / "o")) == 2


class TestEval:
    def test_identity_on_clean_data(self, tmp_path, capsys):
        data = tmp_path / "clean"
        assert run("generate-data", "--out", str(data), "--seed", "2",
                   "--count", "3", "--size", "16", "--coverage", "0") == 0
        ckpt = tmp_path / "id.ckpt"
        save_checkpoint(ckpt, build_network(NetworkConfig(channels=8), T.RngStream(0)))
        out_csv = tmp_path / "eval.csv"
        assert run("eval", "--checkpoint", str(ckpt), "--data", str(data),
                   "--split", "train", "--out", str(out_csv)) == 0
        mean = out_csv.read_text().strip().split("\n")[-1].split(",")
        assert mean[0] == "MEAN"
        assert float(mean[1]) == 0.0       # mae
        assert mean[3] == "inf"            # psnr
        assert float(mean[4]) == 1.0       # ssim

    def test_repeat_runs_identical(self, trained, dataset, tmp_path):
        outs = []
        for i in range(2):
            path = tmp_path / f"e{i}.csv"
            assert run("eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
                       "--data", str(dataset), "--out", str(path)) == 0
            outs.append(path.read_text())
        assert outs[0] == outs[1]

    def test_band_mismatch_is_incompatible(self, trained, tmp_path):
        data = tmp_path / "bands4"
        assert run("generate-data", "--out", str(data), "--seed", "2",
                   "--count", "3", "--size", "16", "--bands", "4") == 0
        assert run("eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--data", str(data)) == 5

    def test_missing_checkpoint_is_usage_error(self, dataset, tmp_path):
        assert run("eval", "--checkpoint", str(tmp_path / "no.ckpt"),
                   "--data", str(dataset)) == 2


class TestInfer:
    def test_tnsr_round_trip(self, trained, dataset, tmp_path):
        pair = load_pair(dataset, "test", 0)
        src = tmp_path / "in.tnsr"
        dst = tmp_path / "out.tnsr"
        T.save_tnsr(src, pair.cloudy)
        assert run("infer", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--input", str(src), "--output", str(dst)) == 0
        restored = T.load_tnsr(dst)
        assert restored.shape == pair.cloudy.shape
        assert restored.min() >= 0.0 and restored.max() <= 1.0

    def test_png_output(self, trained, dataset, tmp_path):
        from PIL import Image

        pair = load_pair(dataset, "test", 1)
        src = tmp_path / "in.tnsr"
        dst = tmp_path / "out.png"
        T.save_tnsr(src, pair.cloudy)
        assert run("infer", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--input", str(src), "--output", str(dst)) == 0
        assert np.asarray(Image.open(dst)).shape == (16, 16, 3)

    def test_non_divisible_input_is_usage_error(self, trained, tmp_path):
        src = tmp_path / "odd.tnsr"
        T.save_tnsr(src, np.zeros((10, 10, 3), np.float32))
        assert run("infer", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--input", str(src), "--output", str(tmp_path / "o.tnsr")) == 2

    def test_band_mismatch_is_incompatible(self, trained, tmp_path):
        src = tmp_path / "b4.tnsr"
        T.save_tnsr(src, np.zeros((16, 16, 4), np.float32))
        assert run("infer", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--input", str(src), "--output", str(tmp_path / "o.tnsr")) == 5


class TestCompare:
    def test_three_row_table(self, dataset, run_config, tmp_path):
        out = tmp_path / "cmp"
        assert run("compare", "--config", str(run_config), "--data", str(dataset),
                   "--out", str(out)) == 0
        lines = (out / "ablation.csv").read_text().strip().split("\n")
        assert lines[0] == "variant,mae,mse,psnr_db,ssim,sam_deg"
        assert [l.split(",")[0] for l in lines[1:]] == ["base", "ca", "ac"]
        for variant in ("base", "ca", "ac"):
            assert (out / variant / "checkpoint.ckpt").exists()


class TestInspectAttention:
    def test_outputs_written(self, trained, dataset, tmp_path):
        pair = load_pair(dataset, "test", 0)
        src = tmp_path / "in.tnsr"
        T.save_tnsr(src, pair.cloudy)
        out = tmp_path / "attn"
        assert run("inspect-attention", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--input", str(src), "--query", "0.3,0.6", "--top", "1.0",
                   "--out", str(out)) == 0
        for i in range(2):
            assert (out / f"racab{i}.csv").exists()
            assert (out / f"racab{i}.s_p.png").exists()
            assert (out / f"racab{i}.s_att.png").exists()
            doc = json.loads((out / f"racab{i}.top.json").read_text())
            # --top 1.0 keeps every patch; half-res 8x8 -> 4x4 patches
            assert len(doc["top_s_p"]) == 16

    def test_csv_rows_cover_grid(self, trained, dataset, tmp_path):
        pair = load_pair(dataset, "test", 0)
        src = tmp_path / "in.tnsr"
        T.save_tnsr(src, pair.cloudy)
        out = tmp_path / "attn2"
        assert run("inspect-attention", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--input", str(src), "--out", str(out)) == 0
        lines = (out / "racab0.csv").read_text().strip().split("\n")
        assert lines[0] == "patch_index,row,col,s_p,s_att"
        assert len(lines) == 1 + 16

    def test_bad_query_is_usage_error(self, trained, dataset, tmp_path):
        pair = load_pair(dataset, "test", 0)
        src = tmp_path / "in.tnsr"
        T.save_tnsr(src, pair.cloudy)
        assert run("inspect-attention", "--checkpoint", str(trained / "checkpoint.ckpt"),
                   "--input", str(src), "--query", "oops",
                   "--out", str(tmp_path / "a")) == 2


class TestQueryMapping:
    def test_origin_maps_to_patch_zero(self):
        assert query_to_patch_index(0.0, 0.0, 8, 8, 2) == 0

    def test_far_corner_maps_to_last_patch(self):
        assert query_to_patch_index(1.0, 1.0, 8, 8, 2) == 15

    def test_center_query(self):
        # row 0.3 of 8 -> pixel 2 -> patch row 1; col 0.6 -> pixel 4 -> patch col 2
        assert query_to_patch_index(0.3, 0.6, 8, 8, 2) == 1 * 4 + 2
