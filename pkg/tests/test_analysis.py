import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsparse.analysis import (SWEEP_VALUES, EvalReport, confusion_matrix, equivariance_sweep, evaluate_condition,
                                featurize, rank_frequency, rank_frequency_from_ranks, ranked_coefficient_curve,
                                ranked_curve_from_support, reconstruction_panels, write_csv, write_png_grid)
from capsparse.sparsity import SparsityConfig
from capsparse.train import FrozenModel, Trainer

from conftest import MNIST_DIR, blob_images, needs_mnist, tiny_config


def frozen_model(tmp_path, mode="sparse", steps=0, **overrides):
    cfg = tiny_config(tmp_path, mode, **overrides)
    tr = Trainer(cfg, train_set=blob_images(64))
    tr.run(steps)
    return FrozenModel.from_checkpoint(tr.checkpoint())


@pytest.fixture(scope="module")
def sparse_model(tmp_path_factory):
    return frozen_model(tmp_path_factory.mktemp("a"), "sparse", steps=10,
                        sparsity=SparsityConfig(n_latent=4, gamma=12.0, period=5))


# curves and frequencies ---------------------------------------------------------------

def test_curve_examples():
    np.testing.assert_allclose(ranked_curve_from_support([[3.0, 1.0, 2.0], [1.0, 4.0, 1.0]]), [1.0, 3 / 7, 2 / 7])
    np.testing.assert_array_equal(ranked_curve_from_support([[2.5], [0.3]]), [1.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (7, 5), elements=st.floats(0.01, 10)))
def test_curve_starts_at_one_and_never_increases(psi):
    c = ranked_curve_from_support(psi)
    assert c[0] == pytest.approx(1.0)
    assert np.all(np.diff(c) <= 1e-12)


def test_rank_frequency_forced_winner():
    r = np.tile([0, 2, 1, 3], (9, 1))
    f = rank_frequency_from_ranks(r)
    assert f[0, 0] == 1.0 and f[1, 2] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10_000))
def test_rank_frequency_column_stochastic(n, seed):
    r = np.argsort(np.argsort(-np.random.default_rng(seed).random((n, 6)), 1), 1)
    f = rank_frequency_from_ranks(r)
    np.testing.assert_allclose(f.sum(0), 1.0, atol=1e-9)
    np.testing.assert_allclose(f.sum(1), 1.0, atol=1e-9)
    assert f.min() >= 0 and f.max() <= 1


def test_model_level_diagnostics(sparse_model):
    imgs = blob_images(30, seed=3).images
    curve = ranked_coefficient_curve(sparse_model, imgs, 25)
    assert curve.shape == (4,) and curve[0] == 1.0
    f = rank_frequency(sparse_model, imgs, 25)
    np.testing.assert_allclose(f.sum(0), 1.0)
    again = rank_frequency(sparse_model, imgs, 25)
    np.testing.assert_array_equal(f, again)
    with pytest.raises(ValueError):
        ranked_coefficient_curve(sparse_model, imgs, 0)


# condition evaluation ---------------------------------------------------------------

def test_featurize_width():
    assert featurize(np.zeros((3, 16, 16))).shape == (3, 256)


def test_confusion_rows_sum_to_class_counts():
    truth = np.array([0, 0, 1, 2, 2, 2])
    cm = confusion_matrix(truth, np.array([0, 1, 1, 2, 0, 2]), 3)
    np.testing.assert_array_equal(cm.sum(1), [2, 1, 3])
    assert np.trace(cm) == 4


def test_evaluate_condition_rules(sparse_model):
    train, test = blob_images(60, seed=1), blob_images(40, seed=2)
    rep = evaluate_condition(sparse_model, train, test, "mnist")
    assert 0 <= rep.accuracy <= 1 and rep.n_images == 40 and not rep.sanity
    assert np.array_equal(np.sum(rep.confusion, 1)[:3], np.bincount(test.labels, minlength=3))
    assert rep.fingerprint == sparse_model.fingerprint
    assert json.loads(rep.to_json())["fingerprint"] == rep.fingerprint
    assert "accuracy" in rep.text()
    assert evaluate_condition(sparse_model, train, test, "mnist") == rep
    with pytest.raises(ValueError, match="share"):
        evaluate_condition(sparse_model, train, train.subset(np.arange(5)), "a")
    sanity = evaluate_condition(sparse_model, train, train, "a", allow_overlap=True)
    assert sanity.sanity and "sanity" in sanity.text()
    assert sanity.accuracy >= rep.accuracy


def test_report_is_plain_data():
    r = EvalReport("b", 0.5, 1.0, 2, "abc", [[1, 0], [0, 1]])
    assert json.loads(r.to_json())["condition"] == "b"


# sweeps and panels -------------------------------------------------------------------

def test_sweep_values_and_noop(sparse_model):
    assert len(SWEEP_VALUES) == 11 and SWEEP_VALUES[0] == -1.0 and SWEEP_VALUES[5] == 0.0
    im = blob_images(1, seed=4).images[0]
    recs, meta = equivariance_sweep(sparse_model, im)
    assert recs.shape == (11, 14, 14)
    assert meta["perturbed"] == "post-mask"
    same, _ = equivariance_sweep(sparse_model, im, meta["capsule"], meta["dim"], values=[meta["original_value"]])
    full = sparse_model.forward(im[None])["recon"].reshape(14, 14)
    np.testing.assert_array_equal(same[0], full)
    with pytest.raises(IndexError):
        equivariance_sweep(sparse_model, im, capsule=4)
    with pytest.raises(IndexError):
        equivariance_sweep(sparse_model, im, capsule=0, dim=9)


def test_panels(sparse_model):
    im = blob_images(1, seed=5).images[0]
    p = reconstruction_panels(sparse_model, im)
    assert p.images().shape == (1 + 3 * 4, 14, 14)
    zero = np.flatnonzero(p.mask == 0)
    assert zero.size > 0
    for j in zero:
        np.testing.assert_array_equal(p.leave_one_out[j], p.full)
    assert p.dominance_ratio() == float("inf")
    np.testing.assert_allclose(p.full, sparse_model.forward(im[None])["recon"].reshape(14, 14))


def test_dense_panels_finite_ratio(tmp_path):
    fm = frozen_model(tmp_path, "dense")
    p = reconstruction_panels(fm, blob_images(1, seed=6).images[0])
    assert np.all(p.mask == 1)
    assert 1 <= p.dominance_ratio() < float("inf")


# output files --------------------------------------------------------------------

def test_png_single_image(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    im = np.linspace(0, 1, 28 * 28).reshape(28, 28)
    path = write_png_grid([im], 1, tmp_path / "one.png")
    with Image.open(path) as pic:
        assert pic.size == (28, 28) and pic.mode == "L"
        np.testing.assert_array_equal(np.asarray(pic), np.round(im * 255).astype(np.uint8))


def test_png_row_layout_roundtrip(tmp_path, rng):
    Image = pytest.importorskip("PIL.Image")
    imgs = [rng.random((28, 28)) for _ in range(11)]
    path = write_png_grid(imgs, 11, tmp_path / "row.png")
    with Image.open(path) as pic:
        assert pic.size == (11 * 28 + 10, 28)
        px = np.asarray(pic)
    for i, im in enumerate(imgs):
        np.testing.assert_array_equal(px[:, i * 29:i * 29 + 28], np.round(im * 255).astype(np.uint8))
    assert np.all(px[:, 28] == 255)


def test_png_grid_wraps_and_checks(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    path = write_png_grid([np.zeros((5, 5))] * 7, 3, tmp_path / "g.png")
    with Image.open(path) as pic:
        assert pic.size == (3 * 5 + 2, 3 * 5 + 2)
    with pytest.raises(ValueError):
        write_png_grid([np.zeros((5, 5)), np.zeros((4, 5))], 2, tmp_path / "bad.png")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        write_png_grid([np.zeros((2, 2))], 1, blocker / "sub.png")


def test_csv(tmp_path):
    p = write_csv(tmp_path / "c.csv", [[0, 1.0], [1, 0.25]], ["rank", "v"])
    assert p.read_text().splitlines() == ["rank,v", "0,1", "1,0.25"]


@needs_mnist
def test_untrained_model_with_uninformative_labels_is_at_chance(tmp_path):
    from capsparse.config import desk_profile
    from capsparse.data import find_mnist

    cfg = desk_profile(mnist_dir=str(MNIST_DIR), out_dir=str(tmp_path))
    mnist = find_mnist(MNIST_DIR, "test")
    fm = FrozenModel.from_checkpoint(Trainer(cfg, train_set=mnist.subset(np.arange(64))).checkpoint())
    shuffled = mnist.subset(np.arange(2000))
    shuffled.labels = np.random.default_rng(0).permutation(shuffled.labels)
    train, test = shuffled.subset(np.arange(1000)), shuffled.subset(np.arange(1000, 2000))
    rep = evaluate_condition(fm, train, test, "mnist")
    assert abs(rep.accuracy - 0.1) <= 0.05
