import json

import numpy as np
import pytest
import torch
from PIL import Image

from cridiff import checkpoint, train
from cridiff.cli import main
from cridiff.config import load_config

SMALL = [
    "data_root=__DATA__",
    "image_size=[32,32]",
    "widths=[16,32,64,128]",
    "T=5",
    "iterations=3",
    "batch_size=2",
    "pretrain_steps=3",
    "ensemble_k=2",
    "lr=1e-3",
    "seed=0",
]


def small_overrides(data_root, out_dir, **extra):
    ov = [o.replace("__DATA__", str(data_root)) for o in SMALL]
    ov.append(f"out_dir={out_dir}")
    ov += [f"{k}={v}" for k, v in extra.items()]
    args = []
    for o in ov:
        args += ["-o", o]
    return args


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-data", str(root), "-n", "8", "--size", "32", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="session")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("trained")
    assert main(["train"] + small_overrides(dataset, out)) == 0
    return out


class TestGenData:
    def test_outputs(self, dataset):
        imgs = sorted((dataset / "images").glob("*.png"))
        msks = sorted((dataset / "masks").glob("*.png"))
        assert len(imgs) == len(msks) == 8
        assert Image.open(imgs[0]).size == (32, 32)


class TestDecouple:
    def test_soft_labels_sum_to_mask(self, dataset, tmp_path):
        out = tmp_path / "dec"
        assert main(["decouple", str(dataset / "masks"), str(out)]) == 0
        name = "phantom_0000.png"
        mask = np.asarray(Image.open(dataset / "masks" / name)) > 127
        g_b = np.asarray(Image.open(out / "g_b" / name)) / 65535.0
        g_c = np.asarray(Image.open(out / "g_c" / name)) / 65535.0
        assert np.abs(g_b + g_c - mask).max() <= 2 / 65535 + 1e-9

    def test_empty_dir_is_config_error(self, tmp_path):
        (tmp_path / "nothing").mkdir()
        assert main(["decouple", str(tmp_path / "nothing"), str(tmp_path / "o")]) == 2


class TestEvaluate:
    def test_self_evaluation_is_perfect(self, dataset, tmp_path):
        out = tmp_path / "metrics.csv"
        code = main(
            ["evaluate", str(dataset / "masks"), str(dataset / "masks"),
             "--out", str(out)]
        )
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[-1].split(",")[:5] == ["mean", "1.000", "1.000", "0.00", "0.00"]

    def test_unpaired_stems_exit_2(self, dataset, tmp_path):
        pred = tmp_path / "pred"
        pred.mkdir()
        (pred / "other.png").write_bytes(
            (dataset / "masks" / "phantom_0000.png").read_bytes()
        )
        assert main(["evaluate", str(pred), str(dataset / "masks")]) == 2


class TestConfigHandling:
    def test_invalid_override_exit_2(self, dataset, tmp_path):
        args = small_overrides(dataset, tmp_path / "x", strategy="zigzag")
        assert main(["train"] + args) == 2

    def test_unknown_key_exit_2(self, tmp_path):
        assert main(["train", "-o", "not_a_key=1"]) == 2

    def test_missing_data_root_exit_2(self, tmp_path):
        assert main(["train", "-o", f"out_dir={tmp_path}"]) == 2

    def test_config_file_plus_override(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"T": 7, "seed": 3}))
        cfg = load_config(str(cfg_file), ["seed=9"])
        assert cfg.T == 7 and cfg.seed == 9

    def test_out_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CRIDIFF_OUT_ROOT", str(tmp_path))
        cfg = load_config(None, ["out_dir=rel/run"])
        assert cfg.out_dir == str(tmp_path / "rel" / "run")

    def test_runtime_error_exit_1(self, tmp_path):
        code = main(
            ["predict", str(tmp_path / "missing.ckpt"), str(tmp_path), str(tmp_path)]
        )
        assert code == 1


class TestPretrain:
    def test_smoke(self, dataset, tmp_path):
        out = tmp_path / "pre"
        assert main(["pretrain"] + small_overrides(dataset, out)) == 0
        payload = checkpoint.load_checkpoint(out / "pretrain.ckpt")
        assert "denoiser_backbone" in payload["weights"]
        assert not any(
            k.startswith("injectors.") for k in payload["weights"]["denoiser_backbone"]
        )
        losses = (out / "pretrain_loss.csv").read_text().strip().splitlines()
        assert losses[0] == "step,loss" and len(losses) == 4


class TestTrainPredict:
    def test_train_artifacts(self, trained):
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["kind"] == "train"
        assert "E1 -> C:1:1" in manifest["plan"]
        assert manifest["config"]["T"] == 5
        assert len((trained / "train_loss.csv").read_text().strip().splitlines()) == 4

    def test_predict_outputs(self, trained, dataset, tmp_path):
        out = tmp_path / "pred"
        code = main(
            ["predict"]
            + small_overrides(dataset, tmp_path / "predrun")
            + [str(trained / "train.ckpt"), str(dataset / "images"), str(out)]
        )
        assert code == 0
        for sub in ("masks", "mean", "variance"):
            assert len(sorted((out / sub).glob("*.png"))) == 8
        mask = np.asarray(Image.open(out / "masks" / "phantom_0000.png"))
        assert set(np.unique(mask)) <= {0, 255}

    def test_predict_then_evaluate(self, trained, dataset, tmp_path):
        out = tmp_path / "pred"
        main(
            ["predict"]
            + small_overrides(dataset, tmp_path / "predrun")
            + [str(trained / "train.ckpt"), str(dataset / "images"), str(out)]
        )
        csv_out = tmp_path / "m.csv"
        code = main(
            ["evaluate", str(out / "masks"), str(dataset / "masks"),
             "--out", str(csv_out)]
        )
        assert code == 0
        assert len(csv_out.read_text().strip().splitlines()) == 10

    def test_plot(self, trained, tmp_path):
        out = tmp_path / "figs"
        assert main(["plot", str(trained), "--out", str(out)]) == 0
        assert (out / "train_loss.png").exists()

    def test_dump_grids(self, trained, dataset, tmp_path):
        out = tmp_path / "grids"
        code = main(
            ["dump-grids"]
            + small_overrides(dataset, tmp_path / "gridrun")
            + [str(trained / "train.ckpt"),
               str(dataset / "images" / "phantom_0000.png"), str(out)]
        )
        assert code == 0
        entries = json.loads((out / "grid_manifest.json").read_text())
        nodes = {e["node"] for e in entries}
        assert {"B:4:1", "C:1:1", "P:1"} <= nodes
        assert all((out / e["file"]).exists() for e in entries)


class TestResume:
    def test_resume_is_bit_exact(self, dataset, tmp_path):
        full = load_config(None, [
            o.replace("__DATA__", str(dataset)) for o in SMALL
        ] + [f"out_dir={tmp_path / 'full'}", "iterations=4"])
        ckpt_full = train.run_train(full)

        half = train._replace(full, iterations=2, out_dir=str(tmp_path / "half"))
        ckpt_half = train.run_train(half)
        resumed = train._replace(full, out_dir=str(tmp_path / "resumed"))
        ckpt_res = train.run_train(resumed, resume=str(ckpt_half))

        wa = checkpoint.load_checkpoint(ckpt_full)["weights"]
        wb = checkpoint.load_checkpoint(ckpt_res)["weights"]
        for group in ("conditioner", "denoiser"):
            for k, v in wa[group].items():
                assert torch.equal(v, wb[group][k]), f"{group}.{k}"
        # resumed loss log covers only the continued steps and matches the
        # tail of the uninterrupted run
        tail = (tmp_path / "full" / "train_loss.csv").read_text().splitlines()[3:]
        cont = (tmp_path / "resumed" / "train_loss.csv").read_text().splitlines()[1:]
        assert [l.split(",")[1] for l in cont] == [l.split(",")[1] for l in tail]


class TestAblate:
    def test_init_axis_smoke(self, dataset, tmp_path):
        out = tmp_path / "abl"
        args = small_overrides(
            dataset, out, iterations=2, pretrain_steps=2,
            split_fractions="[0.5,0.25,0.25]",
        )
        assert main(["ablate"] + args + ["init"]) == 0
        lines = (out / "ablation_init.csv").read_text().strip().splitlines()
        assert lines[0] == "init,val_dice"
        assert [l.split(",")[0] for l in lines[1:]] == ["random", "kaiming", "gp"]
        assert (out / "gp_pretrain" / "pretrain.ckpt").exists()
        for v in lines[1:]:
            assert 0.0 <= float(v.split(",")[1]) <= 1.0
