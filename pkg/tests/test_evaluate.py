import numpy as np
import pytest

from iabf import evaluate
from iabf.autodiff import Tensor
from iabf.channels import ChannelSpec
from iabf.data import load_dataset, synthetic_dataset
from iabf.evaluate import (DistortionReport, distortion, emit_image_grid, format_table,
                           image_shape, markov_chain, reconstruct, write_reports_csv)
from iabf.figures import save_distortion_figure
from iabf.nets import DecoderOutput, ModelParams, log_likelihood


def _blank_model(n=16, bits=8):
    params = ModelParams.create(n, bits, "gaussian", hidden_units=6, hidden_layers=1,
                                classifier_units=4, classifier_layers=1,
                                rng=np.random.default_rng(0))
    for t in params.named().values():
        t.data[...] = 0.0
    return params


def test_constant_half_reconstruction_distortion():
    # A zero decoder outputs 0.5 everywhere: on binary pixels the per-image
    # error is exactly 0.25 * n.
    params = _blank_model()
    x = synthetic_dataset(32, 16, seed=1)
    report = distortion(x, params, ChannelSpec("bsc", 0.0), draws=1, rng=None)
    np.testing.assert_allclose(report.distortion, 0.25 * 16, rtol=1e-6)


def test_reconstruct_rejects_adversarial_channel():
    with pytest.raises(ValueError):
        reconstruct(np.zeros((1, 16), dtype=np.float32), _blank_model(),
                    ChannelSpec("adversarial", 0.1), rng=np.random.default_rng(0))


def test_reconstruct_deterministic_and_pure_without_noise():
    params = _blank_model()
    x = synthetic_dataset(4, 16, seed=2)
    rng = np.random.Generator(np.random.Philox(3))
    out = reconstruct(x, params, ChannelSpec("bsc", 0.0), rng=rng, mode="map")
    untouched = np.random.Generator(np.random.Philox(3))
    assert rng.random() == untouched.random()  # no rng consumption
    np.testing.assert_array_equal(out, reconstruct(x, params, ChannelSpec("bsc", 0.0)))


def test_reconstruct_same_seed_same_output(noisy_model):
    ds = load_dataset("synthetic-256x16")
    outs = []
    for _ in range(2):
        rng = np.random.Generator(np.random.Philox(9))
        outs.append(reconstruct(ds.test, noisy_model.params,
                                ChannelSpec("bsc", 0.3), rng=rng))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_reconstruct_sample_mode_needs_rng():
    with pytest.raises(ValueError):
        reconstruct(np.zeros((1, 16), dtype=np.float32), _blank_model(),
                    ChannelSpec("bsc", 0.0), mode="sample")


def test_full_noise_destroys_information(noisy_model):
    # At eps = 0.5 the received code is independent of the input: the
    # column-centered correlation between x and its reconstruction vanishes.
    ds = load_dataset("synthetic-256x16")
    rng = np.random.Generator(np.random.Philox(23))
    idx = rng.integers(0, ds.train.shape[0], size=10_000)
    x = ds.train[idx]
    recon = reconstruct(x, noisy_model.params, ChannelSpec("bsc", 0.5), rng=rng)
    xc = x - x.mean(axis=0)
    rc = recon - recon.mean(axis=0)
    r = float((xc * rc).sum() / np.sqrt((xc * xc).sum() * (rc * rc).sum()))
    assert abs(r) < 0.05
    # Sanity that the same model does carry information at eps = 0.
    clean = reconstruct(x, noisy_model.params, ChannelSpec("bsc", 0.0))
    cc = clean - clean.mean(axis=0)
    r0 = float((xc * cc).sum() / np.sqrt((xc * xc).sum() * (cc * cc).sum()))
    assert r0 > 0.5


def test_distortion_monotone_in_noise(noisy_model):
    ds = load_dataset("synthetic-256x16")
    values = []
    for eps in (0.1, 0.2, 0.3, 0.4):
        rng = np.random.Generator(np.random.Philox(17))
        values.append(distortion(ds.test, noisy_model.params, ChannelSpec("bsc", eps),
                                 draws=10, rng=rng).distortion)
    assert all(b > a for a, b in zip(values, values[1:])), values


def test_distortion_supports_erasure_channel(noisy_model):
    ds = load_dataset("synthetic-256x16")
    rng = np.random.Generator(np.random.Philox(19))
    bsc = distortion(ds.test, noisy_model.params, ChannelSpec("bsc", 0.2),
                     draws=5, rng=rng).distortion
    rng = np.random.Generator(np.random.Philox(19))
    bec = distortion(ds.test, noisy_model.params, ChannelSpec("bec", 0.2),
                     draws=5, rng=rng).distortion
    assert np.isfinite(bec) and np.isfinite(bsc)
    assert bec < bsc  # erasures are milder than flips at the same rate


def test_distortion_rejects_empty_split():
    with pytest.raises(ValueError):
        distortion(np.zeros((0, 16)), _blank_model(), ChannelSpec("bsc", 0.1),
                   draws=1, rng=np.random.default_rng(0))


def test_gaussian_loss_distortion_link(noisy_model):
    # -2 x mean per-image Gaussian log-likelihood == squared-error distortion,
    # definitionally, on the same reconstructions.
    ds = load_dataset("synthetic-256x16")
    x = ds.test.astype(np.float64)
    recon = reconstruct(ds.test, noisy_model.params, ChannelSpec("bsc", 0.0)).astype(np.float64)
    ll = log_likelihood(x, DecoderOutput("gaussian", Tensor(recon)))
    report = distortion(ds.test, noisy_model.params, ChannelSpec("bsc", 0.0),
                        draws=1, rng=None)
    assert abs(-2.0 * float(ll.data.mean()) - report.distortion) < 1e-6


def test_markov_chain_zero_steps_and_determinism(memorized_model):
    result, ds = memorized_model
    channel = ChannelSpec("bsc", 0.0)
    states = markov_chain(result.params, channel, ds.train[0], 0,
                          np.random.default_rng(0))
    np.testing.assert_array_equal(states, ds.train[:1])
    a = markov_chain(result.params, channel, ds.train[0], 5,
                     np.random.Generator(np.random.Philox(5)))
    b = markov_chain(result.params, channel, ds.train[0], 5,
                     np.random.Generator(np.random.Philox(5)))
    np.testing.assert_array_equal(a, b)


def test_markov_chain_stays_near_start_when_noiseless(memorized_model):
    result, ds = memorized_model
    channel = ChannelSpec("bsc", 0.0)
    test_dist = distortion(ds.test, result.params, channel, draws=1, rng=None).distortion
    states = markov_chain(result.params, channel, ds.train[0], 10,
                          np.random.Generator(np.random.Philox(5)))
    consecutive = ((np.diff(states.astype(np.float64), axis=0)) ** 2).sum(axis=1)
    assert consecutive.mean() < test_dist


def test_image_shape_heuristics():
    assert image_shape(784) == (28, 28, 1)
    assert image_shape(3072) == (32, 32, 3)
    assert image_shape(16) == (4, 4, 1)
    assert image_shape(10) == (1, 10, 1)


def test_emit_grid_single_black_image(tmp_path):
    path = tmp_path / "black.pgm"
    emit_image_grid(np.zeros((1, 28, 28)), 1, 1, str(path))
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n28 28\n255\n")
    assert raw[raw.index(b"255\n") + 4:] == bytes(784)


def test_emit_grid_fills_empty_cells_midgray(tmp_path):
    path = tmp_path / "grid.pgm"
    emit_image_grid(np.ones((2, 2, 2)), 2, 2, str(path))
    raw = path.read_bytes()
    pixels = np.frombuffer(raw[raw.index(b"255\n") + 4:], dtype=np.uint8)
    canvas = pixels.reshape(4, 4)
    np.testing.assert_array_equal(canvas[:2, :], 255)
    np.testing.assert_array_equal(canvas[2:, :], 128)


def test_emit_grid_clamps_out_of_range(tmp_path):
    path = tmp_path / "clamp.pgm"
    emit_image_grid(np.array([[[1.2, -0.3]]]), 1, 1, str(path))
    raw = path.read_bytes()
    assert raw.endswith(bytes([255, 0]))


def test_emit_grid_color_uses_ppm(tmp_path):
    path = tmp_path / "color.ppm"
    emit_image_grid(np.full((1, 2, 2, 3), 0.5), 1, 1, str(path))
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n2 2\n255\n")
    assert len(raw) - raw.index(b"255\n") - 4 == 12


def test_emit_grid_rejects_overflow():
    with pytest.raises(ValueError):
        emit_image_grid(np.zeros((5, 2, 2)), 2, 2, "unused.pgm")


def test_reports_csv_and_table(tmp_path):
    reports = [DistortionReport("synthetic", 8, 0.1, "necst", "map", 10, 0, 32, 1.25),
               DistortionReport("synthetic", 8, 0.2, "necst", "map", 10, 0, 32, 1.5)]
    path = tmp_path / "d.csv"
    write_reports_csv(reports, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("dataset,bits,epsilon,method")
    assert len(lines) == 3
    table = format_table(reports)
    assert "necst" in table and "1.2500" in table


def test_distortion_figure_written(tmp_path):
    reports = [DistortionReport("synthetic", 8, eps, m, "map", 10, 0, 32, d)
               for m, offs in (("necst", 0.0), ("iabf", -0.1))
               for eps, d in ((0.1, 1.0 + offs), (0.4, 2.0 + offs))]
    path = tmp_path / "fig.png"
    save_distortion_figure(reports, str(path))
    assert path.stat().st_size > 1000
