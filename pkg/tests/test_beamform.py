import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acnet._pgm import read_pgm
from acnet.arraysim import MultichannelSignal, ScanGrid, SourceSample, build_spiral_array, synthesize_recording
from acnet.beamform import (
    BeamMap,
    Beamformer,
    CrossSpectralMatrix,
    FFTConvolution,
    clean_psf,
    clean_sc,
    csm,
    damas,
    das,
    extract_estimate,
    fft_fista,
    psf_column,
    psf_kernel,
    psf_matrix,
    steering,
    write_beammap,
)
from acnet.errors import InvalidArgumentError, NoSourceError

GEOM = build_spiral_array()
SMALL = ScanGrid(nx=11, ny=11)
FREQS = np.array([2000.0, 3500.0, 5000.0])


@pytest.fixture(scope="module")
def steer_small():
    return steering(GEOM, SMALL, FREQS)


@pytest.fixture(scope="module")
def psf_small(steer_small):
    return psf_matrix(steer_small)


def rank_one_csm(steer, g0, power):
    a = steer.transfer()[:, g0, :]
    mats = power * np.einsum("bm,bn->bmn", a, a.conj())
    return CrossSpectralMatrix(mats, steer.freqs, 1)


def nnls_oracle(apply, adjoint, b, lipschitz, iters=20000):
    """Plain projected gradient on 0.5|Aq - b|^2, q >= 0, run to convergence."""
    q = np.zeros_like(b)
    for _ in range(iters):
        q = np.maximum(q - adjoint(apply(q) - b) / lipschitz, 0.0)
    return q


# -- CSM ----------------------------------------------------------------------


def test_csm_identical_channels_rank_one():
    x = np.random.default_rng(0).standard_normal(8192)
    sig = MultichannelSignal(np.tile(x, (5, 1)) * np.arange(1, 6)[:, None], 51200)
    cs = csm(sig)
    ev = np.linalg.eigvalsh(cs.matrices)
    assert np.all(ev[:, -2] < 1e-8 * ev[:, -1])


def test_csm_white_noise_off_diagonal():
    sig = MultichannelSignal(np.random.default_rng(1).standard_normal((4, 1024 * 201)), 51200)
    cs = csm(sig)
    assert cs.n_snapshots >= 400
    diag = np.abs(np.einsum("bii->bi", cs.matrices)).mean()
    off = np.abs(cs.matrices[:, ~np.eye(4, dtype=bool)]).mean()
    assert off < 0.15 * diag
    # unit-variance noise has unit per-bin auto-spectrum
    assert diag == pytest.approx(1.0, rel=0.05)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_csm_hermitian(seed):
    sig = MultichannelSignal(np.random.default_rng(seed).standard_normal((3, 3000)), 51200)
    m = csm(sig).matrices
    assert np.max(np.abs(m - np.conj(np.swapaxes(m, 1, 2)))) <= 1e-10
    d = np.einsum("bii->bi", m)
    assert np.all(d.real >= 0) and np.all(d.imag == 0)


def test_csm_errors():
    sig = MultichannelSignal(np.zeros((2, 500)), 51200)
    with pytest.raises(InvalidArgumentError):
        csm(sig)
    with pytest.raises(InvalidArgumentError):
        csm(MultichannelSignal(np.zeros((2, 2048)), 51200), band=(10.0, 20.0))


def test_csm_remove_diagonal():
    sig = MultichannelSignal(np.random.default_rng(2).standard_normal((3, 4096)), 51200)
    m = csm(sig, remove_diagonal=True).matrices
    assert np.all(np.einsum("bii->bi", m) == 0)


# -- steering / DAS / PSF -----------------------------------------------------


def test_steering_symmetry_and_phase():
    from acnet.arraysim import MicArrayGeometry

    geom = MicArrayGeometry([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.3, 0.0]])
    grid = ScanGrid(nx=3, ny=3)
    s = steering(geom, grid, [1000.0, 2000.0])
    center = 4  # (0, 0)
    w = s.weights[:, center]
    assert abs(w[0, 0]) == pytest.approx(abs(w[0, 1]), rel=1e-12)
    a1, a2 = s.transfer()[0, 2], s.transfer()[1, 2]
    np.testing.assert_allclose(np.exp(2j * np.angle(a1)), np.exp(1j * np.angle(a2)), atol=1e-9)
    with pytest.raises(InvalidArgumentError):
        steering(geom, grid, [0.0])


def test_das_zero_and_rank_one(steer_small):
    zero = CrossSpectralMatrix(np.zeros((3, 56, 56), complex), FREQS, 1)
    assert np.all(das(zero, steer_small, SMALL).values == 0)
    g0 = 37
    m = das(rank_one_csm(steer_small, g0, 0.25), steer_small, SMALL)
    assert int(np.argmax(m.values)) == g0
    assert m.values.ravel()[g0] == pytest.approx(0.25, rel=1e-6)


def test_das_bin_mismatch(steer_small):
    cs = CrossSpectralMatrix(np.zeros((2, 56, 56), complex), FREQS[:2], 1)
    with pytest.raises(InvalidArgumentError):
        das(cs, steer_small, SMALL)


def test_das_symmetric_sources(steer_small):
    # (+-0.6, 0) are grid nodes of the 11 x 11 grid; the Vogel array is not mirror
    # symmetric, so build a mirror-symmetric array for this check
    from acnet.arraysim import MicArrayGeometry

    pts = np.array([[0.2, 0.1, 0], [-0.2, 0.1, 0], [0.5, -0.3, 0], [-0.5, -0.3, 0], [0, 0.4, 0]])
    geom = MicArrayGeometry(pts)
    s = steering(geom, SMALL, FREQS)
    left, right = 2 * 11 + 5, 8 * 11 + 5
    c = rank_one_csm(s, left, 1.0).matrices + rank_one_csm(s, right, 1.0).matrices
    m = das(CrossSpectralMatrix(c, FREQS, 1), s, SMALL).values
    np.testing.assert_allclose(m, m[::-1, :], atol=1e-9 * m.max())


@settings(max_examples=10, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 120))
def test_das_scaling(s, g0):
    steer = steering(GEOM, SMALL, FREQS[:1])
    cs = rank_one_csm(steer, g0, 1.0)
    a = das(cs, steer, SMALL).values
    b = das(cs.scaled(s), steer, SMALL).values
    np.testing.assert_allclose(b, s * a, rtol=1e-9, atol=1e-12 * s)
    assert np.argmax(a) == np.argmax(b) == g0


def test_psf_properties(steer_small, psf_small):
    A = psf_small
    np.testing.assert_allclose(np.diag(A), 1.0, atol=1e-9)
    assert np.all(A >= 0)
    for g0 in (0, 60, 97):
        np.testing.assert_allclose(psf_column(steer_small, g0), A[:, g0], rtol=1e-12)
        dmap = das(rank_one_csm(steer_small, g0, 1.0), steer_small, SMALL).values.ravel()
        np.testing.assert_allclose(A[:, g0], dmap, rtol=1e-6, atol=1e-12)


def test_das_synthetic_source_peak():
    grid = ScanGrid()
    src = SourceSample(0, 0.0, 0.0, 0.5)
    sig = synthesize_recording(src, GEOM, grid, duration=0.5, seed=4)
    bf = Beamformer(GEOM, grid)
    m = bf.run(sig, "das")
    x, y, spl = extract_estimate(m)
    assert (x, y) == pytest.approx((0.0, 0.0), abs=1e-9)
    # white noise of variance p**2 at 1 m; the 2-8 kHz band sees the same variance per bin
    assert m.values.max() == pytest.approx(0.25, rel=0.05)


# -- DAMAS ----------------------------------------------------------------------


def test_damas_identity():
    b = np.random.default_rng(0).standard_normal(SMALL.shape)
    out = damas(BeamMap(SMALL, b, (1, 2), "das"), np.eye(121), iters=1)
    np.testing.assert_array_equal(out.values, np.maximum(b, 0))


def test_damas_single_source_matches_oracle(psf_small):
    A = psf_small
    k = 40
    b = A[:, k].copy()
    q = damas(BeamMap(SMALL, b, (1, 2), "das"), A, 500).values.ravel()
    L = np.linalg.norm(A, 2) ** 2
    oracle = nnls_oracle(lambda v: A @ v, lambda v: A.T @ v, b, L)
    e = np.zeros(121)
    e[k] = 1.0
    assert np.linalg.norm(oracle - e) < 1e-6
    assert np.linalg.norm(q - oracle) <= 1e-3 * np.linalg.norm(oracle)
    assert np.all(q >= 0)


def test_damas_errors(psf_small):
    m = BeamMap(SMALL, np.ones(121), (1, 2), "das")
    with pytest.raises(InvalidArgumentError):
        damas(m, psf_small, 0)
    with pytest.raises(InvalidArgumentError):
        damas(m, np.eye(5), 10)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_damas_nonnegative(seed):
    rng = np.random.default_rng(seed)
    A = np.abs(rng.standard_normal((16, 16))) + np.eye(16) * 4
    b = rng.standard_normal(16)
    grid = ScanGrid(nx=4, ny=4)
    assert np.all(damas(BeamMap(grid, b, (1, 2), "das"), A, 7).values >= 0)


# -- CLEAN --------------------------------------------------------------------------


def test_clean_psf_single_component(psf_small):
    s, k = 3.7, 66
    dirty = BeamMap(SMALL, s * psf_small[:, k], (1, 2), "das")
    clean, residual = clean_psf(dirty, psf_small, gain=1.0, max_iters=1)
    e = np.zeros(121)
    e[k] = s
    np.testing.assert_allclose(clean.values.ravel(), e, rtol=1e-12)
    assert residual.values.max() < 1e-9 * s
    assert clean.meta["iterations"] == 1


def test_clean_psf_zero(psf_small):
    clean, _ = clean_psf(BeamMap(SMALL, np.zeros(121), (1, 2), "das"), psf_small)
    assert np.all(clean.values == 0) and clean.meta["iterations"] == 0


def test_clean_psf_peaks_non_increasing(psf_small):
    b = psf_small[:, 10] + 0.5 * psf_small[:, 90] + 0.2 * psf_small[:, 50]
    clean, _ = clean_psf(BeamMap(SMALL, b, (1, 2), "das"), psf_small)
    peaks = clean.meta["residual_peaks"]
    assert all(b2 <= b1 for b1, b2 in zip(peaks, peaks[1:]))
    assert np.all(clean.values >= 0)
    with pytest.raises(InvalidArgumentError):
        clean_psf(BeamMap(SMALL, b, (1, 2), "das"), psf_small, gain=0.0)


def test_clean_sc_rank_one(steer_small):
    g0 = 83
    out = clean_sc(rank_one_csm(steer_small, g0, 0.3), steer_small, SMALL)
    assert int(np.argmax(out.values)) == g0
    assert out.meta["trace_ratio"] < 0.01
    traces = out.meta["trace_history"]
    assert all(b <= a + 1e-12 * traces[0] for a, b in zip(traces, traces[1:]))
    assert np.all(out.values >= 0)
    assert out.values.ravel()[g0] == pytest.approx(0.3, rel=0.01)


def test_clean_sc_zero(steer_small):
    zero = CrossSpectralMatrix(np.zeros((3, 56, 56), complex), FREQS, 1)
    assert np.all(clean_sc(zero, steer_small, SMALL).values == 0)


# -- FFT-FISTA ------------------------------------------------------------------------


def test_fista_delta_kernel():
    k = np.zeros(SMALL.shape)
    k[5, 5] = 1.0
    b = np.random.default_rng(3).standard_normal(SMALL.shape)
    out = fft_fista(BeamMap(SMALL, b, (1, 2), "das"), k, 50).values
    np.testing.assert_allclose(out, np.maximum(b, 0), atol=1e-12)


def test_fft_convolution_adjoint():
    rng = np.random.default_rng(4)
    op = FFTConvolution(rng.random(SMALL.shape))
    u, v = rng.standard_normal(SMALL.shape), rng.standard_normal(SMALL.shape)
    assert np.sum(op.forward(u) * v) == pytest.approx(np.sum(u * op.adjoint(v)), rel=1e-10)


def test_fista_single_source_matches_oracle(steer_small):
    kernel = psf_kernel(steer_small, SMALL)
    op = FFTConvolution(kernel)
    e = np.zeros(SMALL.shape)
    e[3, 7] = 1.0
    b = op.forward(e)
    out = fft_fista(BeamMap(SMALL, b, (1, 2), "das"), kernel, 200)
    oracle = nnls_oracle(op.forward, op.adjoint, b, op.lipschitz)
    assert np.linalg.norm(out.values - oracle) <= 1e-2 * np.linalg.norm(oracle)
    obj = out.meta["objective"]
    assert all(b2 <= b1 for b1, b2 in zip(obj, obj[1:]))
    assert np.all(out.values >= 0)


def test_fista_errors(steer_small):
    kernel = psf_kernel(steer_small, SMALL)
    with pytest.raises(InvalidArgumentError):
        fft_fista(BeamMap(SMALL, np.ones(121), (1, 2), "das"), kernel, 0)
    with pytest.raises(InvalidArgumentError):
        fft_fista(BeamMap(SMALL, np.ones(121), (1, 2), "das"), np.ones((3, 3)), 5)


# -- estimates and export ------------------------------------------------------------


def test_extract_estimate_single_cell():
    grid = ScanGrid(-0.03, 0.97, -0.21, 0.79, 11, 11)
    v = np.zeros(grid.shape)
    v[0, 0] = 0.04
    x, y, spl = extract_estimate(BeamMap(grid, v, (1, 2), "das"))
    assert (x, y) == pytest.approx((-0.03, -0.21))
    assert spl == pytest.approx(80.0, abs=1e-9)


def test_extract_estimate_ties_and_zero():
    x, y, _ = extract_estimate(BeamMap(SMALL, np.ones(121), (1, 2), "das"))
    assert (x, y) == (SMALL.xs[0], SMALL.ys[0])
    with pytest.raises(NoSourceError):
        extract_estimate(BeamMap(SMALL, np.zeros(121), (1, 2), "das"))
    with pytest.raises(NoSourceError):
        extract_estimate(BeamMap(SMALL, -np.ones(121), (1, 2), "das"))


def test_write_beammap(tmp_path):
    v = np.zeros(SMALL.shape)
    v[2, 8] = 1.0
    paths = write_beammap(BeamMap(SMALL, v, (2000.0, 8000.0), "das"), tmp_path / "m")
    assert [p.suffix for p in paths] == [".csv", ".pgm", ".json"]
    img = read_pgm(paths[1])
    r, c = np.unravel_index(np.argmax(img), img.shape)
    assert (c, SMALL.ny - 1 - r) == (2, 8)
    rows = paths[0].read_text().splitlines()
    assert rows[0] == "x,y,value" and len(rows) == 122
    meta = json.loads(paths[2].read_text())
    assert meta["method"] == "das" and meta["grid"]["nx"] == 11
    zoom = write_beammap(BeamMap(SMALL, v, (1, 2), "das"), tmp_path / "z", window=(-0.35, 0.35, -0.35, 0.35))
    assert len(zoom) == 2 and len(zoom[0].read_text().splitlines()) == 1 + 9


# -- regression on synthetic data ----------------------------------------------------


@pytest.mark.parametrize("method", ["das", "damas", "clean-psf", "clean-sc", "fft-fista"])
def test_methods_find_grid_source(method):
    grid = ScanGrid()
    bf = Beamformer(GEOM, grid)
    rng = np.random.default_rng(11)
    hits = 0
    nodes = rng.choice(grid.size, 4, replace=False)
    for i, g in enumerate(nodes):
        x, y = grid.node(int(g))
        sig = synthesize_recording(SourceSample(i, x, y, 0.5), GEOM, grid, duration=0.1, seed=i)
        bmap = bf.run(sig, method)
        assert np.all(bmap.values >= 0)
        ex, ey, _ = extract_estimate(bmap)
        hits += (abs(ex - x) < 1e-9) and (abs(ey - y) < 1e-9)
    assert hits == len(nodes)


def test_beamformer_unknown_method():
    bf = Beamformer(GEOM, SMALL)
    with pytest.raises(InvalidArgumentError):
        bf.run(MultichannelSignal(np.zeros((56, 2048)), 51200), "music")
