import math

import numpy as np
import pytest

import rrlab


def test_scalar_objectives():
    assert rrlab.entropy([0.5, 0.5]) == pytest.approx(math.log(2))
    assert rrlab.reliability([0.25] * 4) == pytest.approx(0.0, abs=1e-12)
    assert rrlab.reliability([1.0, 0.0]) == pytest.approx(1.0)
    assert rrlab.kl_divergence([0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(Exception):
        rrlab.reliability([1.0])


def test_select_mask_ascending_with_ties():
    blocks, mass = rrlab.select_mask([0.4, 0.1, 0.2, 0.1, 0.2], 0.35)
    assert blocks == [1, 3, 2]
    assert mass == pytest.approx(0.4)


def test_schedule_phases():
    s = rrlab.AdamSchedule(0.001, 100, 40)
    assert s.learning_rate(1) == pytest.approx(0.001)
    assert s.beta1(1) == pytest.approx(0.9)
    assert s.beta1(100) == pytest.approx(0.5)
    assert s.learning_rate(100) < s.learning_rate(61)


def test_dataset_round_trip(tmp_path):
    images, labels = rrlab.generate_glyphs(classes=3, per_class=5, seed=4)
    assert images.shape == (15, 16, 16, 1)
    assert images.min() >= 0.0 and images.max() <= 255.0
    path = tmp_path / "glyphs.rrds"
    rrlab.save_dataset(path, images, labels, 3)
    back, back_labels, classes = rrlab.load_dataset(path)
    np.testing.assert_array_equal(back, images)
    assert list(back_labels) == list(labels)
    assert classes == 3


def test_zca_inverts():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4, 4, 1)).astype(np.float32)
    z = rrlab.ZcaTransform.fit(x, 1e-5)
    np.testing.assert_allclose(z.invert(z.apply(x)), x, atol=1e-3)


def test_model_probabilities_and_sensitivity():
    model = rrlab.Model.conv_tiny(classes=4, seed=3)
    images, _ = rrlab.generate_glyphs(classes=4, per_class=2, seed=1)
    x = images / 127.5 - 1.0
    p = model.predict(x)
    assert p.shape == (8, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
    maps = model.sensitivity(x[:2])
    assert len(maps) == 2
    r3d, r2d = maps[0]
    assert len(r2d) == 64
    assert sum(abs(v) for v in r3d) == pytest.approx(1.0, abs=1e-6)
    assert sum(r2d) == pytest.approx(1.0, abs=1e-6)
    r = model.vat_perturbation(x[:3], epsilon=2.0, seed=5)
    for row in r.reshape(3, -1):
        assert np.linalg.norm(row) == pytest.approx(2.0, rel=1e-6)


def test_config_errors_carry_line():
    with pytest.raises(rrlab.ConfigError, match=":2: unknown key"):
        rrlab.config_text("profile = glyph\nbogus_key = 1\n")
    assert "glyph" in rrlab.profile_names()


def test_gradcheck_primitives():
    results = rrlab.gradcheck(losses=False)
    assert results and all(r["passed"] for r in results)


def test_short_training_run(tmp_path):
    images, labels = rrlab.generate_glyphs(classes=4, per_class=60, seed=1)
    rrlab.save_dataset(tmp_path / "train.rrds", images, labels, 4)
    images, labels = rrlab.generate_glyphs(classes=4, per_class=20, seed=2)
    rrlab.save_dataset(tmp_path / "test.rrds", images, labels, 4)
    cfg = "\n".join([
        "profile = glyph",
        "[data]",
        f"train = {tmp_path / 'train.rrds'}",
        f"test = {tmp_path / 'test.rrds'}",
        "[split]",
        "unlabeled = 100",
        "validation = 20",
        "[train]",
        "loss = VAT+ROIreg+ENT",
        "n_update = 20",
        "n_decay = 10",
        "log_every = 10",
    ])
    a = rrlab.train(cfg, seed=1, run_dir=str(tmp_path / "run"))
    b = rrlab.train(cfg, seed=1)
    assert 0.0 <= a["error"] <= 100.0
    assert a["protocol"] == "error4"
    assert a["weights_digest"] == b["weights_digest"]
    assert (tmp_path / "run" / "summary.csv").exists()
