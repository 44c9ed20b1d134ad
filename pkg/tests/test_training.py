import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from salm.augment import perturb_center
from salm.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_segments, \
    save_checkpoint, write_segments
from salm.config import TrainConfig, paper_preset
from salm.model import Detector
from salm.training import TrainingError, refinement_loss, total_loss, train_loop, volume_losses
from salm.volume import LandmarkSet, Volume, normalize_intensity


# ---------------------------------------------------------------- losses
def test_refinement_loss_cases():
    g = torch.zeros(1, 3, dtype=torch.float64)
    x = torch.tensor([[3.0, 4.0, 0.0]], dtype=torch.float64)
    assert refinement_loss([g, x], g).item() == 7.0
    assert refinement_loss([g, x, x], g).item() == 14.0
    assert refinement_loss([x, g, g], g).item() == 0.0
    assert refinement_loss([x, g], g, include_coarse=True).item() == 7.0
    assert refinement_loss([g, x], g, norm="l2").item() == 5.0
    with pytest.raises(ValueError):
        refinement_loss([g], g)
    with pytest.raises(ValueError):
        refinement_loss([g, torch.zeros(2, 3)], g)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1e3), st.floats(0, 1e3))
def test_total_loss_linear(lam, a, b):
    assert total_loss(a, b, lam) == pytest.approx(lam * a + (1 - lam) * b)


def test_total_loss_cases():
    assert total_loss(2.0, 4.0, 0.5) == 3.0
    assert total_loss(2.0, 4.0, 1.0) == 2.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.5)


# ---------------------------------------------------------------- augmentation
def test_perturb_center_sigma_and_identity():
    rng = np.random.default_rng(0)
    x = np.zeros((20000, 3))
    d = perturb_center(x, 32, rng)
    assert d.std() == pytest.approx(32 / 3, rel=0.02)
    assert 32 / 3 == pytest.approx(10.667, abs=1e-3)
    y = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(perturb_center(y, 8, None), y)
    with pytest.raises(ValueError):
        perturb_center(y, 0, rng)


def test_perturb_center_seeded():
    a = perturb_center(np.zeros(3), 16, np.random.default_rng([1, 2]))
    b = perturb_center(np.zeros(3), 16, np.random.default_rng([1, 2]))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- config
def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(patch_sizes=[16, 32, 64])
    with pytest.raises(ValueError):
        TrainConfig(T=2)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"k": 4, "bogus": 1})
    cfg = tiny_config(lc_include_coarse=True)
    cfg.to_json(tmp_path / "c.json")
    assert TrainConfig.from_json(tmp_path / "c.json") == cfg
    assert paper_preset().k == 8 and paper_preset().epochs == 1000
    d = TrainConfig()
    assert (d.k, d.T, d.patch_sizes, d.lam, d.lr, d.betas) == (4, 3, [64, 32, 16], 0.5, 1e-3, [0.9, 0.999])


# ---------------------------------------------------------------- model
def test_detector_forward_shapes(tiny_data):
    volume, lm = tiny_data[0]
    model = Detector(tiny_config(), lm.names)
    L_h, L_c, L_o, trace = volume_losses(model, normalize_intensity(volume), lm)
    assert len(trace.xs) == 3 and trace.final.shape == (2, 3)
    assert len(trace.forget) == 1 and len(trace.centers) == 2
    assert L_o.item() == pytest.approx(0.5 * L_h.item() + 0.5 * L_c.item(), rel=1e-6)
    final, coarse, tr = model.predict(volume)
    assert final.names == lm.names
    assert np.array_equal(coarse.points, tr.xs[0].double().numpy())


def test_name_mismatch_rejected(tiny_data):
    volume, lm = tiny_data[0]
    model = Detector(tiny_config(), lm.names)
    with pytest.raises(TrainingError):
        volume_losses(model, volume, LandmarkSet(["x", "y"], lm.points))
    with pytest.raises(ValueError):
        Detector(tiny_config(landmark_names=["p", "q"]), lm.names)


def test_zero_offset_heads_return_coarse(tiny_data):
    volume, lm = tiny_data[1]
    model = Detector(tiny_config(), lm.names)
    with torch.no_grad():
        model.cell.offset_weight.zero_()
        model.cell.offset_bias.zero_()
    for T, sizes in [(1, [16]), (2, [16, 8]), (4, [16, 16, 8, 8])]:
        _, features, x1 = model.coarse_stage(volume)
        trace = model.refine(volume, features, x1, T=T, patch_sizes=sizes)
        assert all(torch.equal(x, x1) for x in trace.xs)


def test_refine_validates_schedule(tiny_data):
    volume, lm = tiny_data[0]
    model = Detector(tiny_config(), lm.names)
    _, features, x1 = model.coarse_stage(volume)
    with pytest.raises(ValueError):
        model.refine(volume, features, x1, T=2, patch_sizes=[8, 16])
    with pytest.raises(ValueError):
        model.refine(volume, features, x1, T=3, patch_sizes=[16, 8])


def test_down_size_check(tiny_data):
    volume, lm = tiny_data[0]
    model = Detector(tiny_config(down_size=[9, 9, 9]), lm.names)
    with pytest.raises(ValueError):
        model.prepare(volume)


# ---------------------------------------------------------------- loop
def _read_log(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_training_is_deterministic_and_logs(tmp_path, tiny_data):
    cfg = tiny_config(epochs=3, checkpoint_every=2)
    a = train_loop(cfg, tiny_data, out_dir=tmp_path / "a")
    b = train_loop(cfg, tiny_data, out_dir=tmp_path / "b")
    log_a = _read_log(tmp_path / "a" / "loss.csv")
    assert log_a[0] == ["epoch", "L_h", "L_c", "L_o", "train_MRE_voxels"]
    assert len(log_a) == 4
    assert log_a == _read_log(tmp_path / "b" / "loss.csv")
    assert a.checkpoint.exists()
    assert [r["L_o"] for r in a.history] == [r["L_o"] for r in b.history]


def test_loss_descends_after_first_epoch(tiny_data):
    volume, lm = tiny_data[0]
    data = [(normalize_intensity(volume), lm)]
    cfg = tiny_config(epochs=1)
    model = Detector(cfg, lm.names)
    before = volume_losses(model, *data[0], np.random.default_rng([cfg.seed, 0, 0]))[2].item()
    train_loop(cfg, [(volume, lm)], model=model)
    model.train()
    after = volume_losses(model, *data[0], np.random.default_rng([cfg.seed, 0, 0]))[2].item()
    assert after < before


def test_training_rejects_bad_datasets(tiny_data):
    with pytest.raises(TrainingError):
        train_loop(tiny_config(), [])
    (v, lm), (w, lm2) = tiny_data
    with pytest.raises(TrainingError):
        train_loop(tiny_config(), [(v, lm), (w, LandmarkSet(["a", "b"], lm2.points))])


def test_nan_loss_aborts(tiny_data):
    volume, lm = tiny_data[0]
    model = Detector(tiny_config(), lm.names)
    with torch.no_grad():
        model.cell.offset_bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train_loop(tiny_config(epochs=1), [(volume, lm)], model=model)


# ---------------------------------------------------------------- checkpoint
def test_checkpoint_round_trip_bitwise(tmp_path, tiny_data):
    volume, lm = tiny_data[0]
    result = train_loop(tiny_config(epochs=1), tiny_data)
    path = tmp_path / "m.salm"
    opt = torch.optim.Adam(result.model.parameters())
    save_checkpoint(path, result.model, opt, epoch=1)
    loaded, extras = load_checkpoint(path)
    probe = normalize_intensity(volume)
    a, ac, ta = result.model.predict(probe)
    b, bc, tb = loaded.predict(probe)
    assert np.array_equal(a.points, b.points) and np.array_equal(ac.points, bc.points)
    assert extras["epoch"] == 1 and "optimizer" in extras
    assert loaded.config == result.model.config


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.salm"
    write_segments(path, {"header": b"{}", "blob": b"\x00\x01"})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:14], "little") == len("header")
    assert read_segments(path) == {"header": b"{}", "blob": b"\x00\x01"}


@pytest.mark.parametrize("mutate", [
    lambda raw: b"XXXX" + raw[4:],
    lambda raw: raw[:4] + (99).to_bytes(4, "little") + raw[8:],
    lambda raw: raw[:-1],
])
def test_checkpoint_corruption_detected(tmp_path, mutate):
    path = tmp_path / "x.salm"
    write_segments(path, {"header": json.dumps({}).encode()})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError):
        read_segments(path)
