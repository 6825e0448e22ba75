"""Time-frequency preprocessing of multichannel signals.

Each replicate (unit, trial) is cut into 15 half-overlapping bins of width
N/8.  Within a bin, each of five subsegments is linearly detrended and
Fourier transformed; the subsegment periodograms and cross-periodograms are
combined with modified-Daniell weights.  The outcomes are the log spectra of
every channel followed by the probit of the squared coherence of every
channel pair.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.special import ndtri

from .dataset import FunctionalDataset
from .errors import DataError

log = logging.getLogger(__name__)

N_BINS = 15
KAPPA_EPS = 1e-10
LOG_FLOOR = 1e-300


@dataclass
class SignalSet:
    """Signals of shape (R, L, N): R replicates, L channels, N samples each."""

    signals: np.ndarray
    rate: float
    replicates: list = field(default_factory=list)  # (unit, trial) per replicate
    alignment: int = 0

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=float)
        if self.signals.ndim != 3:
            raise DataError("signals must have shape (replicates, channels, samples)")
        if self.signals.shape[1] < 2:
            raise DataError("need at least two channels")
        if not self.rate > 0:
            raise DataError("sampling rate must be positive")
        if not self.replicates:
            self.replicates = [(1, r + 1) for r in range(self.signals.shape[0])]
        if len(self.replicates) != self.signals.shape[0]:
            raise DataError("one (unit, trial) label per replicate is required")

    @property
    def channels(self) -> int:
        return self.signals.shape[1]

    @property
    def N(self) -> int:
        return self.signals.shape[2]


def bin_layout(N: int) -> tuple[int, int]:
    if N % 16:
        raise DataError(f"series length {N} must be divisible by 16 (bins of width N/8 with hop N/16)")
    return N // 8, N // 16


def bin_signal(series) -> np.ndarray:
    """Split the last axis into 15 bins of width N/8 with hop N/16; bins become axis 0."""
    x = np.asarray(series, dtype=float)
    width, hop = bin_layout(x.shape[-1])
    return np.stack([x[..., b * hop : b * hop + width] for b in range(N_BINS)])


def subsegments(bin_data, n_sub: int = 5) -> np.ndarray:
    """(..., w) -> (n_sub, ..., w // n_sub); a remainder is dropped and logged."""
    x = np.asarray(bin_data, dtype=float)
    w = x.shape[-1]
    L = w // n_sub
    if L < 2:
        raise DataError(f"bin width {w} is too short for {n_sub} subsegments")
    if w % n_sub:
        log.info("bin width %d not divisible by %d; dropping the last %d samples", w, n_sub, w - L * n_sub)
    return np.stack([x[..., j * L : (j + 1) * L] for j in range(n_sub)])


def periodograms(segment, nfft: int | None = None):
    """Detrended DFT of each channel of ``segment`` (L, n).

    Returns ``(q, I)`` with ``I[a, b] = q_a conj(q_b) / nfft`` on the
    non-negative frequencies.  With this scaling the ordinates, counted twice
    except at 0 and Nyquist, add up to the detrended sum of squares.
    """
    x = sps.detrend(np.asarray(segment, dtype=float), axis=-1, type="linear")
    n = x.shape[-1] if nfft is None else int(nfft)
    if n < x.shape[-1]:
        raise DataError("nfft must be at least the subsegment length")
    q = np.fft.rfft(x, n=n, axis=-1)
    I = q[:, None, :] * np.conj(q[None, :, :]) / n
    return q, I


def one_sided_weights(n: int) -> np.ndarray:
    F = n // 2 + 1
    w = np.full(F, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def smoothed_spectra(bin_data, n_sub: int = 5, nfft: int | None = None, weights=None):
    """Weighted average of subsegment (cross-)periodograms; shape (L, L, F), Hermitian in (a, b)."""
    segs = subsegments(bin_data, n_sub)
    w = daniell_weights(n_sub) if weights is None else np.asarray(weights, dtype=float)
    if w.size != n_sub or np.any(w < 0) or not w.sum() > 0:
        raise ValueError(f"need {n_sub} non-negative subsegment weights")
    w = w / w.sum()
    out = None
    for wj, seg in zip(w, segs):
        _, I = periodograms(seg, nfft)
        out = wj * I if out is None else out + wj * I
    return out


def daniell_weights(n: int) -> np.ndarray:
    """Modified-Daniell weights over n ordered items: interior equal, ends halved."""
    if n == 1:
        return np.ones(1)
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w / w.sum()


def coherence_transform(I1, I2, I12, eps: float = KAPPA_EPS, freqs=None):
    """Squared coherence and its probit; kappa^2 is clamped to [eps, 1 - eps] before the transform."""
    I1 = np.asarray(I1, dtype=float)
    I2 = np.asarray(I2, dtype=float)
    denom = I1 * I2
    bad = np.flatnonzero(~(denom > 0))
    if bad.size:
        where = f"frequency {float(freqs[bad[0]])!r} Hz" if freqs is not None else f"frequency index {bad[0]}"
        raise DataError(f"zero spectrum in the coherence denominator at {where}")
    kappa2 = np.abs(I12) ** 2 / denom
    kappa2 = np.minimum(kappa2, 1.0)
    return kappa2, ndtri(np.clip(kappa2, eps, 1.0 - eps))


def frequencies(rate: float, n: int) -> np.ndarray:
    return np.fft.rfftfreq(n, d=1.0 / rate)


def band_mask(freqs, band) -> np.ndarray:
    lo, hi = band
    return (freqs >= lo) & (freqs <= hi)


def bin_outcomes(bin_data, rate, band, n_sub=5, nfft=None):
    """Per-bin outcome curves: (C, m) values and the retained frequency grid."""
    L = bin_data.shape[0]
    S = smoothed_spectra(bin_data, n_sub, nfft)
    seg_len = bin_data.shape[-1] // n_sub
    n = seg_len if nfft is None else int(nfft)
    freqs = frequencies(rate, n)
    keep = band_mask(freqs, band)
    if not keep.any():
        raise DataError(f"no Fourier frequencies fall inside the band {band}")
    auto = np.real(np.stack([S[a, a] for a in range(L)]))[:, keep]
    rows = [np.log(np.maximum(auto[a], LOG_FLOOR)) for a in range(L)]
    for a, b in combinations(range(L), 2):
        _, probit = coherence_transform(auto[a], auto[b], S[a, b][keep], freqs=freqs[keep])
        rows.append(probit)
    return np.stack(rows), freqs[keep]


def build_mfts(signals: SignalSet, band=(0.1, 80.0), n_sub: int = 5, nfft: int | None = None):
    """Long-format dataset of log spectra and probit coherences.

    Times run over (replicate, bin) in order; the label of each time is
    ``unit:trial:bin``.  Returns ``(dataset, manifest)``.
    """
    R, L, N = signals.signals.shape
    width, hop = bin_layout(N)
    outcome, time, tau, y = [], [], [], []
    labels = {}
    t = 0
    freqs = None
    for r in range(R):
        bins = bin_signal(signals.signals[r])  # (15, L, width)
        unit, trial = signals.replicates[r]
        for b in range(N_BINS):
            t += 1
            vals, freqs = bin_outcomes(bins[b], signals.rate, band, n_sub, nfft)
            C, m = vals.shape
            outcome.append(np.repeat(np.arange(C), m))
            time.append(np.full(C * m, t))
            tau.append(np.tile(freqs, C))
            y.append(vals.ravel())
            labels[t] = f"{unit}:{trial}:{b + 1}"
    data = FunctionalDataset(
        np.concatenate(outcome), np.concatenate(time), np.concatenate(tau), np.concatenate(y),
        (float(freqs[0]), float(freqs[-1])), labels,
    )
    seg_len = width // n_sub
    manifest = {
        "rate": float(signals.rate),
        "band": [float(band[0]), float(band[1])],
        "samples": N,
        "bins": N_BINS,
        "bin_width": width,
        "hop": hop,
        "subsegments": n_sub,
        "subsegment_length": seg_len,
        "nfft": seg_len if nfft is None else int(nfft),
        "frequencies": [float(f) for f in freqs],
        "m": int(freqs.size),
        "outcomes": [f"log-spectrum ch{a + 1}" for a in range(L)]
        + [f"probit-coherence ch{a + 1}-ch{b + 1}" for a, b in combinations(range(L), 2)],
        "replicates": [list(map(int, rep)) for rep in signals.replicates],
    }
    return data, manifest


def read_signal_csv(path, rate: float) -> SignalSet:
    """Read ``unit,trial,sample_index,ch1,...,chL`` rows into a :class:`SignalSet`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"signal file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in ("unit", "trial", "sample_index"):
            if col not in header:
                raise DataError(f"{path}: missing column '{col}'")
        ch_cols = [i for i, h in enumerate(header) if h.startswith("ch")]
        if len(ch_cols) < 2:
            raise DataError(f"{path}: need at least two channel columns ch1, ch2, ...")
        iu, it, isamp = header.index("unit"), header.index("trial"), header.index("sample_index")
        groups: dict = {}
        for line, row in enumerate(reader, start=2):
            try:
                key = (int(row[iu]), int(row[it]))
                idx = int(row[isamp])
                vals = [float(row[i]) for i in ch_cols]
            except (ValueError, IndexError):
                raise DataError(f"{path}:{line}: malformed row") from None
            groups.setdefault(key, []).append((idx, vals))
    keys = sorted(groups)
    series = []
    for key in keys:
        rows = sorted(groups[key])
        series.append(np.asarray([v for _, v in rows]).T)
    lengths = {s.shape[1] for s in series}
    if len(lengths) != 1:
        raise DataError(f"{path}: replicates have different lengths {sorted(lengths)}")
    return SignalSet(np.stack(series), rate, keys)
