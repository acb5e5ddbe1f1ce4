import numpy as np
import pytest
from conftest import gradcheck

from keydiff import nd
from keydiff.cloud_ae import (
    AETrainConfig,
    Autoencoder,
    AutoencoderSpec,
    chamfer,
    chamfer_np,
    decoder_forward,
    encoder_forward,
    init_autoencoder,
    train_autoencoder,
)

BOUNDS = np.array([[-1.5, -1.5], [1.5, 1.5]])
SMALL = AutoencoderSpec(widths=(8, 16, 16), decoder_widths=(32,), n_out=16)


def chamfer_brute(a, b):
    """Plain loops: mean squared nearest distance both ways."""
    def one_way(x, y):
        return sum(min(float(((p - q) ** 2).sum()) for q in y) for p in x) / len(x)
    return one_way(a, b) + one_way(b, a)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=(rng.integers(1, 30), 2)), rng.normal(size=(rng.integers(1, 30), 2))
        want = chamfer_brute(a, b)
        assert abs(chamfer_np(a, b) - want) < 1e-12
        assert abs(float(chamfer(a, b).data) - want) < 1e-12


def test_chamfer_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(20, 2)), rng.normal(size=(13, 2))
    assert chamfer_np(a, a) == 0.0
    assert chamfer_np(a, b) == pytest.approx(chamfer_np(b, a), abs=1e-15)


def test_chamfer_permutation_and_duplication_invariant():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(25, 2)), rng.normal(size=(25, 2))
    base = chamfer_np(a, b)
    assert chamfer_np(a[rng.permutation(25)], b[rng.permutation(25)]) == pytest.approx(base, abs=1e-12)
    # duplicating every point keeps each one-way mean unchanged
    assert chamfer_np(np.repeat(a, 2, axis=0), b) == pytest.approx(base, abs=1e-12)


def test_chamfer_translated_copy():
    a = np.random.default_rng(3).normal(size=(1, 2))
    t = np.array([0.3, -0.4])
    assert chamfer_np(a, a + t) == pytest.approx(2 * (t @ t), abs=1e-15)


def test_chamfer_batched_mean():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 10, 2)), rng.normal(size=(3, 12, 2))
    want = np.mean([chamfer_np(x, y) for x, y in zip(a, b)])
    assert float(chamfer(a, b).data) == pytest.approx(want, abs=1e-12)


def test_chamfer_gradient():
    rng = np.random.default_rng(5)
    errs = gradcheck(lambda t: chamfer(t["a"], t["b"]), {"a": rng.normal(size=(2, 7, 2)), "b": rng.normal(size=(2, 9, 2))})
    assert max(errs.values()) < 1e-6


def test_autoencoder_gradient():
    store = init_autoencoder(SMALL, np.random.default_rng(6))
    params = store.arrays()
    cloud = np.random.default_rng(7).uniform(-1, 1, (2, 20, 2))
    target = cloud[:, :16]
    errs = gradcheck(lambda p: chamfer(decoder_forward(p, SMALL, encoder_forward(p, cloud)), target), params, max_entries=40)
    assert max(errs.values()) < 1e-5, errs


def test_encoder_permutation_invariant():
    store = init_autoencoder(SMALL, np.random.default_rng(8))
    cloud = np.random.default_rng(9).uniform(-1, 1, (1, 50, 2))
    z1 = encoder_forward(store, cloud).data
    z2 = encoder_forward(store, cloud[:, np.random.default_rng(10).permutation(50)]).data
    np.testing.assert_array_equal(z1, z2)
    assert z1.shape == (1, SMALL.embed_dim)


def test_decoder_shape():
    store = init_autoencoder(SMALL, np.random.default_rng(11))
    out = decoder_forward(store, SMALL, np.zeros((3, SMALL.embed_dim)))
    assert out.shape == (3, 16, 2)


def test_bad_spec():
    with pytest.raises(ValueError):
        AutoencoderSpec(widths=(8, 16))
    with pytest.raises(ValueError):
        AutoencoderSpec(n_out=0)


def test_zero_epochs_returns_init():
    clouds = np.random.default_rng(12).uniform(-1.5, 1.5, (4, 32, 2))
    model, losses = train_autoencoder(clouds, SMALL, BOUNDS, AETrainConfig(epochs=0, seed=3))
    init = init_autoencoder(SMALL, np.random.default_rng(3), np.float32).arrays()
    assert losses == []
    for k, v in init.items():
        np.testing.assert_array_equal(model.p[k].data, v)


def test_overfit_one_cloud(tmp_path):
    rng = np.random.default_rng(13)
    cloud = np.concatenate([rng.normal([0.5, 0.5], 0.05, (16, 2)), rng.normal([-0.6, 0.2], 0.05, (16, 2))])[None]
    model, losses = train_autoencoder(cloud, SMALL, BOUNDS, AETrainConfig(epochs=300, batch=1, lr=3e-3, target_points=None),
                                      loss_csv=tmp_path / "loss.csv")
    assert losses[-1] < 0.05 * losses[0]
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 301
    # reconstruction is returned in workspace meters
    assert chamfer_np(model.reconstruct(cloud[0]), cloud[0]) < 0.01


def test_save_load_round_trip(tmp_path):
    clouds = np.random.default_rng(14).uniform(-1.5, 1.5, (2, 32, 2))
    model, _ = train_autoencoder(clouds, SMALL, BOUNDS, AETrainConfig(epochs=1))
    model.save(tmp_path / "ae.kdnp")
    back = Autoencoder.load(tmp_path / "ae.kdnp")
    np.testing.assert_array_equal(back.encode(clouds[0]), model.encode(clouds[0]))
    assert back.spec == model.spec


def test_normalize_round_trip():
    model = Autoencoder(SMALL, init_autoencoder(SMALL, np.random.default_rng(0)).arrays(), BOUNDS)
    pts = np.random.default_rng(15).uniform(-1.5, 1.5, (50, 2))
    np.testing.assert_allclose(model.denormalize(model.normalize(pts)), pts, atol=1e-12)


def test_bad_inputs_rejected():
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((0, 8, 2)), SMALL, BOUNDS)
    with pytest.raises(nd.ShapeError):
        encoder_forward(init_autoencoder(SMALL, np.random.default_rng(0)), np.zeros((1, 8, 3)))
