import numpy as np
import pytest

import sizefit


def test_residual_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = (rng.random((9, 7)) < 0.5).astype(float)
        r = (rng.random((9, 7)) < 0.5).astype(float)
        rm = sizefit.residual_from(g, r)
        assert rm.min() >= -1 and rm.max() <= 1
        np.testing.assert_array_equal(sizefit.apply_residual(r, rm), g)


def test_sem_hand_example():
    parts = np.full((4, 4), 3, dtype=np.uint8)
    parts[:, 1:3] = 2
    pred = np.zeros((4, 4))
    truth = np.zeros((4, 4))
    pred[0:2, 1:3] = 1
    pred[0:2, 0] = 1
    truth[0:3, 1:3] = 1
    truth[0:3, 0] = 1
    r = sizefit.sem(pred, parts, truth, parts)
    assert r["t_minus"] == pytest.approx(2 / 16)
    assert r["s_minus"] == pytest.approx(1 / 16)
    assert r["sem"] == pytest.approx(1 / 12)
    assert sizefit.sem(truth, parts, truth, parts, mode="binary")["sem"] == 0


def test_errors_become_python_exceptions():
    with pytest.raises(ValueError):
        sizefit.residual_from(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(sizefit.DataError):
        sizefit.residual_from(np.full((2, 2), 2.0), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        sizefit.sem(np.zeros((2, 2)), np.zeros((2, 2), np.uint8), np.zeros((2, 2)), np.zeros((2, 2), np.uint8), "x")


def test_homography_recovery():
    h = np.array([[1.1, 0.05, 3.0], [-0.02, 0.95, -4.0], [1e-4, -2e-4, 1.0]])
    src = np.array([[0, 0], [100, 0], [100, 90], [0, 90], [40, 60]], dtype=float)
    p = np.c_[src, np.ones(len(src))] @ h.T
    dst = p[:, :2] / p[:, 2:]
    est = sizefit.estimate_homography(src, dst)
    np.testing.assert_allclose(est / est[2, 2], h, atol=1e-9)


def test_make_pair_growth():
    p = sizefit.make_pair(seed=3, body_id=0, pose_id=0, garment_id=1, ref_label="M", try_label="XL")
    assert p["ref"]["image"].shape == (3, 128, 128)
    assert p["try"]["mask"].sum() > p["ref"]["mask"].sum()
    assert p["s_try"]["body_width"] > p["s_ref"]["body_width"]
    assert sizefit.residual_from(p["try"]["mask"], p["ref"]["mask"]).min() >= 0


def test_gradcheck():
    r = sizefit.gradcheck(instances_per_case=1)
    assert r["max_rel_error"] < 1e-4
    assert r["cases"] >= 20


def test_train_and_deform(tmp_path):
    data = tmp_path / "data"
    manifest = sizefit.build_dataset(
        data, {"n_bodies": 3, "n_poses": 1, "n_garments": 3, "sizes_per_garment": 3}
    )
    assert len(manifest["samples"]) > 0

    cfg = sizefit.default_train_config()
    cfg.update(
        dataset_root=str(data),
        output_dir=str(tmp_path / "run"),
        epochs=1,
        batch_size=2,
        max_train_pairs=4,
        val_split="",
    )
    cfg["model"].update(sfe_hidden=[8, 8], encoder_channels=[4, 8, 8, 8], decoder_channels=[8, 8, 4, 4], refiner_channels=4)
    cfg["discriminator"]["channels"] = [4, 4, 4]
    log = sizefit.train(cfg)
    assert len(log) == 1 and np.isfinite(log[0]["train_loss"])

    model = sizefit.Model(tmp_path / "run" / "best.ckpt")
    assert len(model.hash) == 16
    assert model.config["train"]["epochs"] == 1

    p = sizefit.make_pair(seed=7, body_id=0, pose_id=0, garment_id=0, ref_label="S", try_label="L")
    m_d, rm_d = model.deform(p["ref"]["image"], p["ref"]["mask"], p["s_ref"], p["s_try"])
    assert m_d.shape == (128, 128) and rm_d.shape == (128, 128)
    assert 0 <= m_d.min() and m_d.max() <= 1
    again, _ = model.deform(p["ref"]["image"], p["ref"]["mask"], p["s_ref"], p["s_try"])
    np.testing.assert_array_equal(m_d, again)

    report = model.evaluate(data, "test_new_person")
    assert report["split"] == "test_new_person"
    assert "sem_ratio" in report

    with pytest.raises(sizefit.DataError):
        sizefit.Model(tmp_path / "missing.ckpt")
