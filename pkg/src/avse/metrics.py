"""Intrusive objective metrics: STOI, extended STOI, their frequency-domain
variants on 16 kHz magnitude spectra, SI-SDR, and Pearson correlation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import dsp
from .dsp import EPS, MagnitudeSpectrogram, StftConfig, Waveform
from .errors import DataError, NumericError, ShapeError

log = logging.getLogger(__name__)

VARIANTS = ("classical", "extended", "modified_classical", "modified_extended")

# reference STOI analysis constants
STOI_FS = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
SEGMENT_LEN = 30
BETA_DB = -15.0
DYN_RANGE_DB = 40.0
NUM_BANDS = 15
MIN_CF = 150.0

SI_SDR_CAP_DB = 200.0


@dataclass(frozen=True)
class StoiConfig:
    variant: str = "modified_classical"
    clip_beta_db: float = BETA_DB
    N: int = SEGMENT_LEN
    num_bands: int = NUM_BANDS
    min_cf: float = MIN_CF

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"unknown STOI variant {self.variant!r}")
        if self.N < 2:
            raise DataError("segment length N must be >= 2")
        if self.clip_beta_db >= 0:
            raise DataError("clip_beta_db must be negative")

    @property
    def extended(self) -> bool:
        return self.variant.endswith("extended")

    @property
    def clip_factor(self) -> float:
        return 1.0 + 10 ** (-self.clip_beta_db / 20)


@dataclass(frozen=True)
class MetricScore:
    value: float
    variant: str
    degenerate: int = 0  # (band, segment) rows that had zero variance

    def __float__(self):
        return float(self.value)


@lru_cache(maxsize=None)
def band_matrix(sample_rate: int, fft_size: int, num_bands: int = NUM_BANDS, min_cf: float = MIN_CF):
    return dsp.thirdoct(sample_rate, fft_size, num_bands, min_cf)


def degenerate_rows(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """True where a vector has (numerically) no variance along ``axis``."""
    centred = v - v.mean(axis=axis, keepdims=True)
    return np.linalg.norm(centred, axis=axis) <= 1e-10 * np.linalg.norm(v, axis=axis)


def _unit(v: np.ndarray, axis: int) -> np.ndarray:
    v = v - v.mean(axis=axis, keepdims=True)
    return v / (np.linalg.norm(v, axis=axis, keepdims=True) + EPS)


def correlations(x_seg: np.ndarray, y_seg: np.ndarray, clip_factor: float) -> np.ndarray:
    """Per-(segment, band) correlation of clean and normalised/clipped
    degraded envelopes; inputs are (S, I, N)."""
    scale = np.linalg.norm(x_seg, axis=2, keepdims=True) / (
        np.linalg.norm(y_seg, axis=2, keepdims=True) + EPS
    )
    y_clip = np.minimum(y_seg * scale, clip_factor * x_seg)
    d = np.sum(_unit(x_seg, 2) * _unit(y_clip, 2), axis=2)
    return np.where(degenerate_rows(x_seg) | degenerate_rows(y_clip), 0.0, d)


def extended_correlations(x_seg: np.ndarray, y_seg: np.ndarray) -> np.ndarray:
    """Per-segment ESTOI score: row then column normalisation, averaged
    column inner products. Zero-variance rows are zeroed before the column step."""
    xn = np.where(degenerate_rows(x_seg)[..., None], 0.0, _unit(x_seg, 2))
    yn = np.where(degenerate_rows(y_seg)[..., None], 0.0, _unit(y_seg, 2))
    xn, yn = _unit(xn, 1), _unit(yn, 1)
    return np.sum(xn * yn, axis=(1, 2)) / x_seg.shape[2]


def score_envelopes(x_env: np.ndarray, y_env: np.ndarray, cfg: StoiConfig) -> MetricScore:
    """Average intermediate intelligibility over all segments of two (I, M)
    envelope matrices."""
    if x_env.shape != y_env.shape:
        raise ShapeError(f"envelope shapes differ: {x_env.shape} vs {y_env.shape}")
    if x_env.shape[1] < cfg.N:
        raise DataError(f"need at least N={cfg.N} frames, got {x_env.shape[1]}")
    xs = dsp.segment_envelopes(x_env, cfg.N).segments
    ys = dsp.segment_envelopes(y_env, cfg.N).segments
    degenerate = int(degenerate_rows(xs).sum())
    if cfg.extended:
        value = float(np.mean(extended_correlations(xs, ys)))
    else:
        value = float(np.mean(correlations(xs, ys, cfg.clip_factor)))
    if degenerate:
        log.debug("%d zero-variance clean envelope rows scored as 0", degenerate)
    return MetricScore(value, cfg.variant, degenerate)


def _drop_last_sample(w: Waveform) -> Waveform:
    return w.with_samples(w.samples[:-1])


def stoi(clean: Waveform, degraded: Waveform, extended: bool = False) -> MetricScore:
    """Classical (or extended) STOI between two time-domain signals.

    Signals are taken to 10 kHz, silent clean frames are dropped from both,
    and 15 one-third octave band envelopes from 150 Hz are compared over
    30-frame segments.
    """
    if len(clean) != len(degraded):
        raise ShapeError(f"length mismatch: {len(clean)} vs {len(degraded)}")
    if clean.sample_rate != degraded.sample_rate:
        raise DataError(f"sample-rate mismatch: {clean.sample_rate} vs {degraded.sample_rate}")
    x = dsp.resample(clean, STOI_FS, dc_exact=False)
    y = dsp.resample(degraded, STOI_FS, dc_exact=False)
    # Reference STOI resamples with a globally normalised filter, never takes
    # a frame ending exactly on the last sample, windows with MATLAB's
    # `hanning` and stitches kept frames without renormalising; each shifts
    # scores by ~1e-3 if ignored.
    x, y = _drop_last_sample(x), _drop_last_sample(y)
    x, y = dsp.remove_silent_frames(
        x, y, DYN_RANGE_DB, STOI_FRAME, STOI_HOP, window="hanning", normalize=False
    )
    x, y = _drop_last_sample(x), _drop_last_sample(y)
    cfg = StftConfig(STOI_FRAME, STOI_HOP, STOI_NFFT, "hanning")
    if cfg.n_frames(len(x)) < SEGMENT_LEN:
        raise DataError(
            f"only {max(cfg.n_frames(len(x)), 0)} STFT frames survive silent-frame removal; "
            f"need {SEGMENT_LEN}"
        )
    obm = band_matrix(STOI_FS, STOI_NFFT)
    x_env = dsp.band_envelopes(dsp.stft(x, cfg).magnitude(), obm)
    y_env = dsp.band_envelopes(dsp.stft(y, cfg).magnitude(), obm)
    variant = "extended" if extended else "classical"
    return score_envelopes(x_env, y_env, StoiConfig(variant))


def estoi(clean: Waveform, degraded: Waveform) -> MetricScore:
    return stoi(clean, degraded, extended=True)


def _as_mags(m, sample_rate, fft_size):
    if isinstance(m, MagnitudeSpectrogram):
        return m.mags, m.sample_rate, m.config.fft_size
    return np.asarray(m, dtype=np.float64), sample_rate, fft_size


def modified_stoi(
    clean_mag,
    est_mag,
    extended: bool = False,
    sample_rate: int = 16000,
    fft_size: int = 512,
) -> MetricScore:
    """STOI computed directly on magnitude spectra, without resampling or
    silent-frame removal.

    Accepts :class:`MagnitudeSpectrogram` values or plain (F, T) arrays; for
    arrays ``sample_rate`` and ``fft_size`` describe the analysis.
    """
    x, fs, nfft = _as_mags(clean_mag, sample_rate, fft_size)
    y, fs_y, nfft_y = _as_mags(est_mag, sample_rate, fft_size)
    if x.shape != y.shape:
        raise ShapeError(f"spectrogram shapes differ: {x.shape} vs {y.shape}")
    if (fs, nfft) != (fs_y, nfft_y):
        raise ShapeError("spectrograms come from different analyses")
    obm = band_matrix(fs, nfft)
    cfg = StoiConfig("modified_extended" if extended else "modified_classical")
    return score_envelopes(dsp.band_envelopes(x, obm), dsp.band_envelopes(y, obm), cfg)


def si_sdr(reference: Waveform, estimate: Waveform) -> float:
    """Scale-invariant SDR in dB, capped at +200 dB for exact estimates."""
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, float)
    est = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, float)
    if ref.shape != est.shape:
        raise ShapeError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise NumericError("SI-SDR undefined for an all-zero reference")
    target = (float(est @ ref) / ref_energy) * ref
    residual = est - target
    t_energy = float(target @ target)
    r_energy = float(residual @ residual)
    if r_energy < 1e-20 * t_energy or t_energy == 0.0 and r_energy == 0.0:
        return SI_SDR_CAP_DB
    if t_energy == 0.0:
        return -SI_SDR_CAP_DB
    return float(min(10 * np.log10(t_energy / r_energy), SI_SDR_CAP_DB))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"need equal-length 1-D sequences, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise DataError("pearson needs at least two points")
    ac, bc = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0 or nb == 0:
        raise NumericError("pearson correlation undefined for a constant sequence")
    return float(np.clip(ac @ bc / (na * nb), -1.0, 1.0))
