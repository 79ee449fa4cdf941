import json

import numpy as np
import pytest

from mderain import data
from mderain.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from mderain.lightfield import mpi_to_sai
from mderain.train import save_model
from mderain.model import MDeRainNet
from mderain.verify import toy_config


@pytest.fixture
def dataset(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "ds"), "--count", "2", "--size", "16", "--seed", "3"]) == EXIT_OK
    return tmp_path / "ds"


def test_gen_writes_scenes(dataset):
    scenes = data.load_dataset(dataset)
    assert len(scenes) == 2 and scenes[0].rainy.shape == (3, 3, 16, 16, 3)


def test_gen_real_style_is_unlabeled(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "r"), "--count", "1", "--size", "16", "--real-style"]) == EXIT_OK
    meta = json.loads((tmp_path / "r" / "scene_0000" / "scene.json").read_text())
    assert not meta["labeled"] and meta["rain"]["angle"] == list(data.REAL_STYLE_RAIN["angle"])
    assert not (tmp_path / "r" / "scene_0000" / "clean").exists()


def test_gen_bad_range_is_config_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "x"), "--rain-intensity", "0.9,0.1"]) == EXIT_CONFIG
    assert main(["gen", "--out", str(tmp_path / "x"), "--rain-intensity", "oops"]) == EXIT_CONFIG


def test_convert_round_trip(dataset, tmp_path):
    views = dataset / "scene_0000" / "clean"
    mpi = tmp_path / "mpi.png"
    assert main(["convert", "--input", str(views), "--to", "mpi", "--out", str(mpi), "--bit-depth", "16"]) == EXIT_OK
    img = data.read_image(mpi)
    assert img.shape == (48, 48, 3)
    lf = data.load_lf_dir(views)
    np.testing.assert_allclose(mpi_to_sai(img, 3), lf, atol=1e-6)
    assert main(["convert", "--input", str(mpi), "--angular", "3", "--to", "sai", "--out", str(tmp_path / "back"), "--bit-depth", "16"]) == EXIT_OK
    np.testing.assert_allclose(data.load_lf_dir(tmp_path / "back"), lf, atol=1e-6)
    assert main(["convert", "--input", str(views), "--to", "epi", "--out", str(tmp_path / "epi.png"), "--axis", "vertical"]) == EXIT_OK
    assert data.read_image(tmp_path / "epi.png").shape == (3, 16, 3)


def test_convert_errors(dataset, tmp_path):
    views = dataset / "scene_0000" / "clean"
    assert main(["convert", "--input", str(tmp_path / "nope"), "--to", "mpi", "--out", str(tmp_path / "o.png")]) == EXIT_DATA
    mpi = tmp_path / "mpi.png"
    main(["convert", "--input", str(views), "--to", "mpi", "--out", str(mpi)])
    assert main(["convert", "--input", str(mpi), "--to", "sai", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["convert", "--input", str(mpi), "--angular", "5", "--to", "sai", "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_derain_and_eval(dataset, tmp_path):
    model = MDeRainNet(toy_config(), seed=0)
    save_model(tmp_path / "m.mdrn", model)
    scene = dataset / "scene_0000"
    out = tmp_path / "pred"
    assert main(["derain", "--model", str(tmp_path / "m.mdrn"), "--input", str(scene / "rainy"), "--out", str(out)]) == EXIT_OK
    assert data.load_lf_dir(out).shape == (3, 3, 16, 16, 3)
    report = tmp_path / "rep" / "report.json"
    rc = main(["eval", "--pred", str(out), "--gt", str(scene / "clean"), "--report", str(report), "--epi-dir", str(tmp_path / "epi")])
    assert rc == EXIT_OK
    rep = json.loads(report.read_text())
    assert set(rep) >= {"psnr", "ssim", "per_view_psnr", "per_view_std"}
    assert len(report.with_suffix(".csv").read_text().splitlines()) == 10
    assert (tmp_path / "epi" / "pred_horizontal.png").exists()


def test_derain_rejects_wrong_angular(tmp_path, rng):
    save_model(tmp_path / "m.mdrn", MDeRainNet(toy_config(), seed=0))
    data.save_lf_dir(rng.random((5, 5, 16, 16, 3)), tmp_path / "lf")
    assert main(["derain", "--model", str(tmp_path / "m.mdrn"), "--input", str(tmp_path / "lf"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_derain_bad_checkpoint(tmp_path, dataset):
    (tmp_path / "bad.mdrn").write_bytes(b"garbage")
    rc = main(["derain", "--model", str(tmp_path / "bad.mdrn"), "--input", str(dataset / "scene_0000" / "rainy"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA


def test_eval_shape_mismatch(tmp_path, rng):
    data.save_lf_dir(rng.random((3, 3, 8, 8, 3)), tmp_path / "a")
    data.save_lf_dir(rng.random((3, 3, 8, 16, 3)), tmp_path / "b")
    assert main(["eval", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b"), "--report", str(tmp_path / "r.json")]) == EXIT_DATA


def test_residue_command(dataset, tmp_path):
    rc = main(["residue", "--input", str(dataset / "scene_0000" / "rainy"), "--out", str(tmp_path / "res"), "--mu", "0.3"])
    assert rc == EXIT_OK
    for name in ("residue", "colored", "filtered", "combined"):
        assert data.load_lf_dir(tmp_path / "res" / name).shape == (3, 3, 16, 16, 3)
    assert main(["residue", "--input", str(dataset / "scene_0000" / "rainy"), "--out", str(tmp_path / "x"), "--mu", "2"]) == EXIT_CONFIG


def test_train_config_errors(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwhatever = 1\n")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    broken = tmp_path / "broken.toml"
    broken.write_text("[model\n")
    assert main(["train", "--config", str(broken)]) == EXIT_CONFIG
    nodata = tmp_path / "nodata.toml"
    nodata.write_text('[data]\ntrain = "nowhere"\npatch_size = 64\n')
    assert main(["train", "--config", str(nodata)]) == EXIT_DATA


def test_train_nan_exit_code(dataset, tmp_path, monkeypatch):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        f'out = "{tmp_path / "run"}"\n[model]\nangular = 3\nchannels = 8\nunits = 1\npatch = 4\nembed_dim = 16\n'
        f'heads = 2\nview_size = 16\n[optim]\nepochs = 1\nbatch_size = 2\n[data]\ntrain = "{dataset}"\npatch_size = 16\n'
    )
    from mderain import losses

    monkeypatch.setattr(losses, "smooth_l1", lambda pred, target: pred.mean() * float("nan"))
    assert main(["train", "--config", str(cfg)]) == EXIT_NUMERIC


def test_train_runs_and_resumes(dataset, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        f'out = "run"\n[model]\nangular = 3\nchannels = 8\nunits = 1\npatch = 4\nembed_dim = 16\n'
        f'heads = 2\nview_size = 16\n[optim]\nepochs = 2\nbatch_size = 2\nlr = 1e-3\n[data]\ntrain = "{dataset}"\npatch_size = 16\n'
    )
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    rows = (tmp_path / "run" / "loss_stage1.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 and (tmp_path / "run" / "epoch_001.mdrn").exists()
    cfg.write_text(cfg.read_text().replace("epochs = 2", "epochs = 3"))
    assert main(["train", "--config", str(cfg), "--resume", str(tmp_path / "run" / "epoch_001.mdrn")]) == EXIT_OK
    rows = (tmp_path / "run" / "loss_stage1.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 and rows[-1].startswith("2,")


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--group", "primitives"]) == EXIT_OK
    assert "conv2d" in capsys.readouterr().out


def test_usage_errors():
    assert main([]) == EXIT_CONFIG
    assert main(["gen"]) == EXIT_CONFIG
    assert main(["--help"]) == EXIT_OK
