import json

import numpy as np
import pytest

from mderain import data
from mderain.inference import derain_lf
from mderain.metrics import evaluate, per_view_psnr_map, psnr
from mderain.model import MDeRainNet
from mderain.verify import toy_config


def single_layer_scene(disparity, angular=5, size=32):
    layer = data.LayerSpec(
        "disc",
        disparity,
        1.0,
        dict(base=[0.9, 0.9, 0.9], grad=[[0, 0, 0], [0, 0, 0]], waves=[], cx=16.0, cy=16.0, size=4.0, aspect=1.0),
    )
    bg = data.LayerSpec("background", 0.0, 10.0, dict(base=[0.1, 0.1, 0.1], grad=[[0, 0, 0], [0, 0, 0]], waves=[]))
    return data.gen_scene(data.SceneSpec(0, angular, size, size, [bg, layer]))


def test_scene_generation_is_deterministic():
    a = data.gen_scene(data.SceneSpec.random(7, 3, 24, 24))
    b = data.gen_scene(data.SceneSpec.random(7, 3, 24, 24))
    c = data.gen_scene(data.SceneSpec.random(8, 3, 24, 24))
    assert a.dtype == np.float32 and a.shape == (3, 3, 24, 24, 3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("d", [1.0, -1.0, 2.0])
def test_horizontal_epi_shift_matches_disparity(d):
    lf = single_layer_scene(d)
    epi = data.extract_epi(lf, "horizontal", 2, 16)[..., 0]
    centers = [np.average(np.arange(32), weights=row - row.min()) for row in epi]
    np.testing.assert_allclose(np.diff(centers), d, atol=1e-6)


def test_vertical_epi_shift_matches_disparity():
    lf = single_layer_scene(1.0)
    epi = data.extract_epi(lf, "vertical", 2, 16)[..., 0]
    centers = [np.average(np.arange(32), weights=row - row.min()) for row in epi]
    np.testing.assert_allclose(np.diff(centers), 1.0, atol=1e-6)


def test_zero_disparity_gives_identical_views_and_vertical_epi_lines():
    lf = data.gen_scene(data.SceneSpec.random(3, 3, 16, 16, max_disparity=0.0))
    assert np.all(lf == lf[1, 1])
    epi = data.extract_epi(lf, "horizontal", 1, 8)
    assert np.all(epi == epi[:1])


def test_rain_is_the_same_in_every_view():
    clean = data.gen_scene(data.SceneSpec.random(1, 3, 32, 32))
    rain, rainy = data.gen_rain(clean, data.RainSpec(seed=3))
    assert np.all(rain == rain[1, 1])
    assert np.array_equal(rainy, np.clip(clean + rain, 0, 1))
    assert np.all(rain[..., 0] == rain[..., 2])  # achromatic
    assert rain.max() > 0.1


def test_default_rain_is_moderate():
    clean = data.gen_scene(data.SceneSpec.random(2, 3, 64, 64))
    _, rainy = data.gen_rain(clean, data.RainSpec(seed=2))
    assert 15.0 < psnr(rainy, clean) < 25.0


def test_rain_spec_validation():
    with pytest.raises(ValueError):
        data.RainSpec(seed=0, intensity=(0.5, 0.2))
    with pytest.raises(ValueError):
        data.RainSpec(seed=0, intensity=(0.0, 0.5))
    with pytest.raises(ValueError):
        data.RainSpec(seed=0, count=-1)


def test_chromatic_rain_is_tinted():
    rain = data.render_rain(32, 32, data.RainSpec(seed=4, achromatic=False, count=60))
    assert np.abs(rain[..., 0] - rain[..., 2]).max() > 0


@pytest.mark.parametrize("bits,tol", [(8, 0.5 / 255), (16, 0.5 / 65535)])
def test_lf_dir_round_trip(tmp_path, rng, bits, tol):
    lf = rng.random((3, 3, 10, 12, 3)).astype(np.float32)
    data.save_lf_dir(lf, tmp_path / "lf", bits)
    back = data.load_lf_dir(tmp_path / "lf")
    assert back.shape == lf.shape
    assert np.abs(back - lf).max() <= tol + 1e-7


def test_lf_dir_keeps_channel_order(tmp_path):
    lf = np.zeros((1, 1, 2, 2, 3), np.float32)
    lf[..., 0] = 1.0
    data.save_lf_dir(lf, tmp_path / "red", 8)
    assert data.load_lf_dir(tmp_path / "red")[0, 0, 0, 0].tolist() == [1.0, 0.0, 0.0]


def test_lf_dir_errors(tmp_path, rng):
    with pytest.raises(data.DataError):
        data.load_lf_dir(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(data.DataError):
        data.load_lf_dir(tmp_path / "empty")
    data.save_lf_dir(rng.random((2, 2, 4, 4, 3)), tmp_path / "lf")
    (tmp_path / "lf" / "view_u1_v0.png").unlink()
    with pytest.raises(data.DataError, match="missing"):
        data.load_lf_dir(tmp_path / "lf")


def test_generate_and_load_dataset(tmp_path):
    ids = data.generate_dataset(tmp_path / "ds", 2, seed=5, angular=3, size=16)
    assert ids == ["scene_0000", "scene_0001"]
    meta = json.loads((tmp_path / "ds" / ids[0] / "scene.json").read_text())
    assert meta["geometry"] == {"angular": 3, "height": 16, "width": 16} and meta["labeled"]
    scenes = data.load_dataset(tmp_path / "ds")
    assert len(scenes) == 2 and scenes[0].clean.shape == (3, 3, 16, 16, 3)
    again = data.generate_dataset(tmp_path / "ds2", 2, seed=5, angular=3, size=16)
    assert again == ids
    assert np.array_equal(data.load_dataset(tmp_path / "ds2")[1].rainy, scenes[1].rainy)


def test_unlabeled_dataset(tmp_path):
    data.generate_dataset(tmp_path / "real", 1, seed=0, angular=3, size=16, rain_kwargs=data.REAL_STYLE_RAIN, labeled=False)
    with pytest.raises(data.DataError):
        data.load_dataset(tmp_path / "real")
    scenes = data.load_dataset(tmp_path / "real", require_labels=False)
    assert scenes[0].clean is None


def test_psnr_values(rng):
    x = rng.random((4, 4, 3))
    assert psnr(x, x) == 99.0 and psnr(x, x, cap=None) == np.inf
    assert psnr(np.zeros(10), np.full(10, 0.1)) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_per_view_psnr_map(rng):
    gt = rng.random((3, 3, 8, 8, 3))
    pred = gt.copy()
    pred[0, 1] += 0.1
    grid, avg, std = per_view_psnr_map(pred, gt)
    assert grid.shape == (3, 3) and grid[0, 1] == pytest.approx(20.0)
    assert avg == pytest.approx(grid.mean()) and std == pytest.approx(grid.std())


def test_evaluate_report_keys(rng):
    gt = rng.random((3, 3, 16, 16, 3))
    report = evaluate(gt, gt)
    assert report["ssim"] == pytest.approx(1.0) and report["per_view_std"] == 0.0


def test_tiled_inference_matches_whole_for_pointwise_model(rng):
    """With only the 1x1 output layer active, tiling must reproduce one-pass output exactly."""
    model = MDeRainNet(toy_config(), seed=0).zero_()
    model.to_rgb.bias.data[:] = 0.1
    lf = rng.random((3, 3, 40, 24, 3)).astype(np.float32)
    tiled = derain_lf(model, lf, overlap=6)
    np.testing.assert_allclose(tiled, np.clip(lf - 0.1, 0, 1), atol=1e-6)


def test_tiled_inference_blends_smoothly(rng):
    model = MDeRainNet(toy_config(), seed=0)
    lf = rng.random((3, 3, 32, 32, 3)).astype(np.float32)
    out = derain_lf(model, lf, tile=16, overlap=8)
    assert out.shape == lf.shape and np.all(np.isfinite(out))
    assert out.min() >= 0 and out.max() <= 1
