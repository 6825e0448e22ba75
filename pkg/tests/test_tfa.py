import math

import numpy as np
import pytest
from scipy import signal as sps

from mfdlm import tfa
from mfdlm.errors import DataError


@pytest.mark.parametrize("N,width,hop", [(256, 32, 16), (16, 2, 1), (4800, 600, 300)])
def test_bin_layout(N, width, hop):
    bins = tfa.bin_signal(np.arange(N, dtype=float))
    assert bins.shape == (15, width)
    assert bins[1, 0] == hop and bins[-1, -1] == N - 1


def test_bin_indivisible():
    with pytest.raises(DataError, match="16"):
        tfa.bin_signal(np.zeros(100))


def test_parseval_per_subsegment(rng):
    seg = rng.standard_normal((2, 64))
    for nfft in (None, 64, 100):
        _, I = tfa.periodograms(seg, nfft)
        n = 64 if nfft is None else nfft
        det = sps.detrend(seg, axis=-1)
        for a in range(2):
            tot = np.sum(tfa.one_sided_weights(n) * I[a, a].real)
            assert tot == pytest.approx(np.sum(det[a] ** 2), rel=1e-8)


def test_unsmoothed_cross_periodogram_is_degenerate(rng):
    _, I = tfa.periodograms(rng.standard_normal((2, 120)))
    lhs = np.abs(I[0, 1]) ** 2
    rhs = (I[0, 0] * I[1, 1]).real
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(rhs.max(), 1.0)


def test_sinusoid_peak(rng):
    n, j = 128, 10
    x = np.cos(2 * np.pi * j * np.arange(n) / n)
    _, I = tfa.periodograms(np.stack([x, x]))
    spec = tfa.one_sided_weights(n) * I[0, 0].real
    assert np.argmax(spec) == j
    assert spec[j] >= 0.99 * spec.sum()


def test_daniell_weights():
    np.testing.assert_allclose(tfa.daniell_weights(5), [1 / 8, 1 / 4, 1 / 4, 1 / 4, 1 / 8])
    assert tfa.daniell_weights(1)[0] == 1.0


def test_white_noise_flat(rng):
    n_rep, n_sub, L = 200, 5, 40
    spectra = np.array([
        tfa.smoothed_spectra(rng.standard_normal((2, n_sub * L)), n_sub)[0, 0].real for _ in range(n_rep)
    ])[:, 1:-1]
    mean = spectra.mean(0)
    se = spectra.std(0, ddof=1) / math.sqrt(n_rep)
    # mean detrended periodogram of unit white noise is about 1 away from the lowest ordinates
    level = np.median(mean)
    assert np.all(np.abs(mean[2:] - level) < 3 * se[2:] * 3)


def test_coherence_bounds_and_self_coherence(rng):
    x = rng.standard_normal((1, 200))
    bin_data = np.vstack([x, x])
    S = tfa.smoothed_spectra(bin_data, 5)
    k2, _ = tfa.coherence_transform(S[0, 0].real, S[1, 1].real, S[0, 1])
    np.testing.assert_allclose(k2[1:], 1.0, rtol=1e-12)
    for _ in range(50):
        S = tfa.smoothed_spectra(rng.standard_normal((2, 200)), 5)
        k2, y = tfa.coherence_transform(S[0, 0].real, S[1, 1].real, S[0, 1])
        assert np.all((k2 >= 0) & (k2 <= 1)) and np.all(np.isfinite(y))


def test_probit_of_half_is_zero():
    _, y = tfa.coherence_transform(np.ones(1), np.ones(1), np.array([math.sqrt(0.5)]))
    assert y[0] == pytest.approx(0.0, abs=1e-15)


def test_independent_channels_low_coherence(rng):
    vals = []
    for _ in range(200):
        S = tfa.smoothed_spectra(rng.standard_normal((2, 200)), 5)
        k2, _ = tfa.coherence_transform(S[0, 0].real, S[1, 1].real, S[0, 1])
        vals.append(k2[1:-1].mean())
    assert np.mean(vals) < 0.3


def test_zero_denominator_names_frequency():
    with pytest.raises(DataError, match="frequency 2.5"):
        tfa.coherence_transform(np.array([1.0, 0.0]), np.ones(2), np.zeros(2), freqs=np.array([1.25, 2.5]))


def test_remainder_dropped(caplog):
    with caplog.at_level("INFO"):
        segs = tfa.subsegments(np.zeros((2, 23)), 5)
    assert segs.shape == (5, 2, 4)
    assert "dropping" in caplog.text


def test_build_mfts_shapes(rng):
    sig = tfa.SignalSet(rng.standard_normal((3, 2, 640)), rate=400.0, replicates=[(1, 1), (1, 2), (2, 1)])
    data, manifest = tfa.build_mfts(sig, band=(0.1, 80.0))
    assert data.C == 3 and data.T == 45
    assert data.labels[16] == "1:2:1"
    assert manifest["outcomes"][2].startswith("probit")
    freqs = np.asarray(manifest["frequencies"])
    assert freqs.min() >= 0.1 and freqs.max() <= 80.0
    assert all(data.m(c, 1) == manifest["m"] for c in range(3))


def test_application_dimensions(rng):
    # 8 units x 40 trials x 15 bins; 1600 Hz with 600-point transforms gives 30 frequencies in [0.1, 80]
    reps = [(u, s) for u in range(1, 9) for s in range(1, 41)]
    sig = tfa.SignalSet(rng.standard_normal((320, 2, 4800)), rate=1600.0, replicates=reps)
    data, manifest = tfa.build_mfts(sig, band=(0.1, 80.0), nfft=600)
    assert data.T == 4800 and data.C == 3
    assert manifest["m"] == 30


def test_read_signal_csv(tmp_path, rng):
    lines = ["unit,trial,sample_index,ch1,ch2"]
    x = rng.standard_normal((2, 32))
    for i in range(32):
        lines.append(f"1,1,{i},{float(x[0, i])!r},{float(x[1, i])!r}")
    p = tmp_path / "s.csv"
    p.write_text("\n".join(lines) + "\n")
    sig = tfa.read_signal_csv(p, 100.0)
    assert sig.signals.shape == (1, 2, 32)
    np.testing.assert_array_equal(sig.signals[0], x)
    with pytest.raises(DataError):
        tfa.read_signal_csv(tmp_path / "missing.csv", 100.0)
