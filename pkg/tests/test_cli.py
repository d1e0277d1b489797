import json

import numpy as np
import pytest

from s2me.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, build_parser, main
from s2me.data.tensorfile import tensor_file_read, tensor_file_write
from s2me.fusion import entropy_map, fuse_entropy

TINY = [
    "--set", "iterations=2",
    "--set", "batch_size=2",
    "--set", "base_width=4",
    "--set", "depth=2",
    "--set", "eval_every=1",
    "--set", "ramp_iters=2",
    "--set", "crop_max=1",
]


@pytest.fixture
def cli_dataset(tmp_path):
    root = tmp_path / "data"
    assert main(["gen-data", "--out", str(root), "--size", "32", "--train", "4", "--val", "2", "--test", "2", "--seed", "1"]) == EXIT_OK
    return root


def test_missing_command_is_a_usage_error(capsys):
    assert main([]) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_unknown_option_is_a_usage_error():
    assert main(["selftest", "--bogus"]) == EXIT_VALIDATION


def test_every_command_is_registered():
    parser = build_parser()
    for command in ("gen-data", "train", "eval", "fuse", "ablate", "selftest"):
        args = parser.parse_args([command] + {
            "gen-data": ["--out", "x"],
            "train": ["--data", "d", "--out", "o"],
            "eval": ["--run", "r", "--data", "d"],
            "fuse": ["--run", "r", "--data", "d"],
            "ablate": ["--data", "d", "--out", "o"],
            "selftest": [],
        }[command])
        assert callable(args.handler)


def test_gen_data_rejects_small_images(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--size", "20"]) == EXIT_VALIDATION
    assert "20" in capsys.readouterr().err


def test_gen_data_refuses_a_non_empty_directory(cli_dataset):
    assert main(["gen-data", "--out", str(cli_dataset), "--size", "32", "--train", "1", "--val", "1", "--test", "1"]) == EXIT_VALIDATION


def test_train_preset_clash(cli_dataset, tmp_path, capsys):
    code = main(["train", "--data", str(cli_dataset), "--out", str(tmp_path / "run"), "--method", "s2me", "--set", "model_spe=unet"])
    assert code == EXIT_VALIDATION
    assert "model_spe" in capsys.readouterr().err


def test_train_with_missing_dataset(tmp_path):
    code = main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run"), *TINY])
    assert code == EXIT_RUNTIME


def test_eval_with_missing_checkpoint(cli_dataset, tmp_path):
    assert main(["eval", "--run", str(tmp_path / "empty"), "--data", str(cli_dataset), "--seeds", "0"]) == EXIT_RUNTIME


def test_eval_rejects_bad_corruption(cli_dataset, tmp_path):
    code = main(["eval", "--run", str(tmp_path), "--data", str(cli_dataset), "--corrupt", "fog:1"])
    assert code == EXIT_VALIDATION


def test_end_to_end(cli_dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(cli_dataset), "--out", str(run), "--method", "s2me", "--seed", "0", *TINY]) == EXIT_OK
    assert (run / "seed-0" / "spatial.s2tf").exists()
    assert (run / "config.txt").exists()

    assert main(["eval", "--run", str(run), "--data", str(cli_dataset), "--seeds", "0", "--percentile", "0"]) == EXIT_VALIDATION
    assert main(["eval", "--run", str(run), "--data", str(cli_dataset), "--seeds", "0", "--corrupt", "blur:1"]) == EXIT_OK
    with open(run / "metrics.json") as f:
        datasets = [row["dataset"] for row in json.load(f)["aggregate"]]
    assert datasets == ["test", "test+blur1"]
    # metrics are not overwritten silently
    assert main(["eval", "--run", str(run), "--data", str(cli_dataset), "--seeds", "0"]) == EXIT_VALIDATION
    assert main(["eval", "--run", str(run), "--data", str(cli_dataset), "--seeds", "0", "--force"]) == EXIT_OK

    assert main(["fuse", "--run", str(run), "--data", str(cli_dataset), "--count", "2", "--preview"]) == EXIT_OK
    assert (run / "fusion" / "fused_entropy.s2tf").exists()
    assert len(list((run / "fusion").glob("*.png"))) == 2 * 4
    assert "pseudo-label pixel accuracy" in capsys.readouterr().out
    assert main(["fuse", "--run", str(run), "--data", str(cli_dataset), "--count", "2"]) == EXIT_VALIDATION
    assert main(["fuse", "--run", str(run), "--data", str(cli_dataset), "--count", "2", "--force"]) == EXIT_OK

    # a finished run refuses to be overwritten unless resumed or forced
    assert main(["train", "--data", str(cli_dataset), "--out", str(run), *TINY]) == EXIT_VALIDATION


def test_ablate_rejects_unknown_grid(cli_dataset, tmp_path):
    assert main(["ablate", "--data", str(cli_dataset), "--out", str(tmp_path / "abl"), "--grids", "optimizer"]) == EXIT_VALIDATION


def test_ablate_rejects_bad_override(cli_dataset, tmp_path):
    assert main(["ablate", "--data", str(cli_dataset), "--out", str(tmp_path / "abl"), "--set", "colour=blue"]) == EXIT_VALIDATION


@pytest.mark.slow
def test_fusion_ablation(cli_dataset, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(cli_dataset), "--out", str(out), "--grids", "fusion", "--seeds", "0", "--jobs", "1", *TINY]) == EXIT_OK
    report = (out / "ablation.md").read_text()
    for label in ("random", "equal", "entropy"):
        assert label in report
    assert "failed" not in report


def _probability_files(tmp_path):
    p_spa = np.stack([np.full((2, 3), 0.9), np.full((2, 3), 0.1)])
    p_spe = np.stack([np.full((2, 3), 0.6), np.full((2, 3), 0.4)])
    p_spe[:, 1, 2] = (0.05, 0.95)
    tensor_file_write(tmp_path / "spa.s2tf", {"p": p_spa})
    tensor_file_write(tmp_path / "spe.s2tf", {"p": p_spe})
    return p_spa[None], p_spe[None]


def test_fuse_probability_files(tmp_path, capsys):
    p_spa, p_spe = _probability_files(tmp_path)
    out = tmp_path / "fused"
    args = ["fuse", "--p-spa", str(tmp_path / "spa.s2tf"), "--p-spe", str(tmp_path / "spe.s2tf"), "--out", str(out)]
    assert main(args) == EXIT_OK
    assert "written to" in capsys.readouterr().out

    fused = tensor_file_read(out / "fused.s2tf")["p"]
    np.testing.assert_allclose(fused, fuse_entropy(p_spa, p_spe), atol=1e-6)
    np.testing.assert_allclose(fused[0, :, 0, 0], [0.802289, 0.197711], atol=1e-5)
    expected_labels = np.zeros((1, 2, 3))
    expected_labels[0, 1, 2] = 1
    np.testing.assert_array_equal(tensor_file_read(out / "pseudo_label.s2tf")["y"], expected_labels)
    np.testing.assert_allclose(tensor_file_read(out / "entropy_spa.s2tf")["h"], entropy_map(p_spa).values, atol=1e-6)
    np.testing.assert_allclose(tensor_file_read(out / "entropy_spe.s2tf")["h"], entropy_map(p_spe).values, atol=1e-6)

    # a second run into the same directory needs --force
    assert main(args) == EXIT_VALIDATION
    assert main(args + ["--strategy", "equal", "--force"]) == EXIT_OK
    np.testing.assert_allclose(tensor_file_read(out / "fused.s2tf")["p"], (p_spa + p_spe) / 2, atol=1e-6)


def test_fuse_needs_both_files_or_a_run(tmp_path):
    _probability_files(tmp_path)
    assert main(["fuse", "--p-spa", str(tmp_path / "spa.s2tf"), "--out", str(tmp_path / "a")]) == EXIT_VALIDATION
    assert main(["fuse", "--out", str(tmp_path / "b")]) == EXIT_VALIDATION


def test_fuse_rejects_non_probability_files(tmp_path):
    tensor_file_write(tmp_path / "bad.s2tf", {"p": np.full((2, 2, 2), 0.7)})
    _probability_files(tmp_path)
    code = main(["fuse", "--p-spa", str(tmp_path / "bad.s2tf"), "--p-spe", str(tmp_path / "spe.s2tf"), "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION


@pytest.mark.slow
def test_ablation_ordering_on_the_default_corpus(tmp_path):
    data, out = tmp_path / "poly", tmp_path / "abl"
    assert main(["gen-data", "--out", str(data), "--seed", "0"]) == EXIT_OK
    assert main(["ablate", "--data", str(data), "--out", str(out), "--grids", "fusion,loss", "--seeds", "0,1,2"]) == EXIT_OK
    with open(out / "ablation.json") as f:
        dsc = {(r["grid"], r["row"]): r["dsc_mean"] for r in json.load(f)}

    assert dsc[("fusion", "Entropy")] >= dsc[("fusion", "Equal")]
    assert dsc[("fusion", "Entropy")] >= dsc[("fusion", "Random")]
    assert dsc[("loss", "pCE + MT + EL")] >= dsc[("loss", "pCE")] + 0.02
