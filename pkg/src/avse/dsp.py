"""Signal-processing primitives: windows, STFT/ISTFT, resampling, silent-frame
removal and one-third octave band analysis.

Everything here is a pure function of its inputs. Arrays held by the value
types are made read-only on construction so they can be shared freely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import kaiser_beta, resample_poly

from .errors import DataError, NumericError, ShapeError

EPS = np.finfo(np.float64).eps

WINDOW_KINDS = ("hann", "hanning", "rect")


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono signal plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = _frozen(self.samples)
        if s.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise DataError("waveform contains NaN or Inf")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise DataError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    frame_len: int
    hop: int
    fft_size: int
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_len <= self.fft_size:
            raise DataError(
                f"need 0 < hop <= frame_len <= fft_size, got "
                f"hop={self.hop} frame_len={self.frame_len} fft_size={self.fft_size}"
            )
        if self.window not in WINDOW_KINDS:
            raise DataError(f"unknown window kind {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return (n_samples - self.frame_len) // self.hop + 1

    def output_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.frame_len

    def check_cola(self) -> None:
        """Raise unless weighted overlap-add can invert this framing.

        With synthesis normalised by the overlapped squared window, exact
        reconstruction needs that sum to stay away from zero in steady state.
        """
        w = make_window(self.window, self.frame_len)
        reps = 2 * (-(-self.frame_len // self.hop)) + 1
        acc = np.zeros((reps - 1) * self.hop + self.frame_len)
        for k in range(reps):
            acc[k * self.hop:k * self.hop + self.frame_len] += w * w
        mid = acc[self.frame_len:self.frame_len + self.hop]
        if mid.min() <= 1e-8 * acc.max():
            raise DataError(
                f"{self.window} window with frame_len={self.frame_len}, hop={self.hop} "
                "violates the overlap-add reconstruction condition"
            )


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Complex STFT, shape (F, T) with F = fft_size // 2 + 1."""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        b = _frozen(self.bins, np.complex128)
        if b.ndim != 2 or b.shape[0] != self.config.n_bins:
            raise ShapeError(f"expected ({self.config.n_bins}, T) bins, got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise DataError("spectrogram contains NaN or Inf")
        object.__setattr__(self, "bins", b)

    @property
    def shape(self):
        return self.bins.shape

    def magnitude(self) -> "MagnitudeSpectrogram":
        return MagnitudeSpectrogram(np.abs(self.bins), self.config, self.sample_rate)

    def phase(self) -> np.ndarray:
        return np.angle(self.bins)


@dataclass(frozen=True, eq=False)
class MagnitudeSpectrogram:
    mags: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        m = _frozen(self.mags)
        if m.ndim != 2 or m.shape[0] != self.config.n_bins:
            raise ShapeError(f"expected ({self.config.n_bins}, T) magnitudes, got {m.shape}")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise DataError("magnitudes must be finite and nonnegative")
        object.__setattr__(self, "mags", m)

    @property
    def shape(self):
        return self.mags.shape

    def scaled(self, c: float) -> "MagnitudeSpectrogram":
        return MagnitudeSpectrogram(self.mags * c, self.config, self.sample_rate)


@dataclass(frozen=True, eq=False)
class OctaveBandMatrix:
    """Binary band-membership matrix of shape (num_bands, n_bins)."""

    membership: np.ndarray
    center_freqs: np.ndarray
    sample_rate: int
    fft_size: int
    num_dropped: int = 0

    @property
    def num_bands(self) -> int:
        return self.membership.shape[0]


@dataclass(frozen=True, eq=False)
class EnvelopeSegments:
    """Overlapping envelope windows, stacked as an (S, I, N) array."""

    segments: np.ndarray
    N: int

    def __len__(self):
        return self.segments.shape[0]

    def __getitem__(self, j):
        return self.segments[j]


def make_window(kind: str, length: int) -> np.ndarray:
    """Analysis window.

    ``hann`` is the periodic Hann (starts at 0, COLA at hop = length/2).
    ``hanning`` is the symmetric Hann of length ``length + 2`` with its zero
    endpoints removed, the window reference STOI uses. ``rect`` is all ones.
    """
    if length < 2:
        raise DataError(f"window length must be >= 2, got {length}")
    if kind == "hann":
        n = np.arange(length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    if kind == "hanning":
        n = np.arange(1, length + 1)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / (length + 1))
    if kind == "rect":
        return np.ones(length)
    raise DataError(f"unknown window kind {kind!r}")


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """(T, frame_len) view of full frames; a trailing partial frame is dropped."""
    if len(x) < frame_len:
        raise DataError(f"signal of {len(x)} samples is shorter than one frame ({frame_len})")
    return sliding_window_view(x, frame_len)[::hop]


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, frame_len = frames.shape
    out = np.zeros((n_frames - 1) * hop + frame_len)
    for t in range(n_frames):
        out[t * hop:t * hop + frame_len] += frames[t]
    return out


def stft(wav: Waveform, cfg: StftConfig) -> Spectrogram:
    frames = frame_signal(wav.samples, cfg.frame_len, cfg.hop)
    w = make_window(cfg.window, cfg.frame_len)
    bins = np.fft.rfft(frames * w, n=cfg.fft_size, axis=1).T
    return Spectrogram(bins, cfg, wav.sample_rate)


def istft(spec: Spectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Frames are windowed again on synthesis and normalised by the overlapped
    squared window, so unmodified spectra reconstruct wherever that sum is
    nonzero.
    """
    cfg = spec.config
    cfg.check_cola()
    n_frames = spec.bins.shape[1]
    if n_frames == 0:
        raise DataError("cannot invert an empty spectrogram")
    w = make_window(cfg.window, cfg.frame_len)
    frames = np.fft.irfft(spec.bins.T, n=cfg.fft_size, axis=1)[:, :cfg.frame_len]
    num = overlap_add(frames * w, cfg.hop)
    den = overlap_add(np.broadcast_to(w * w, frames.shape), cfg.hop)
    out = np.zeros_like(num)
    ok = den > 1e-10
    out[ok] = num[ok] / den[ok]
    return Waveform(out, spec.sample_rate)


def resampling_filter(up: int, down: int, rejection_db: float = 60.0, dc_exact: bool = True) -> np.ndarray:
    """Kaiser-windowed sinc lowpass for rational resampling by up/down.

    Cutoff at the lower Nyquist rate, transition width a tenth of the cutoff,
    ``rejection_db`` stopband attenuation (the classic ``resample`` design).
    With ``dc_exact`` each polyphase branch is scaled to unit sum so constant
    signals pass through exactly; otherwise the whole filter is scaled to a
    gain of ``up``, leaving a branch ripple of about 1e-4.
    """
    cutoff = 0.5 / max(up, down)
    half = int(np.ceil((rejection_db - 8) / (28.714 * cutoff / 10)))
    t = np.arange(-half, half + 1)
    h = 2 * cutoff * np.sinc(2 * cutoff * t) * np.kaiser(2 * half + 1, kaiser_beta(rejection_db))
    if not dc_exact:
        return h * (up / h.sum())
    for p in range(up):
        h[p::up] /= h[p::up].sum()
    return h


def resample(wav: Waveform, target_rate: int, dc_exact: bool = True) -> Waveform:
    """Polyphase resampling with :func:`resampling_filter`.

    ``dc_exact`` also extends the signal with its edge values, so constants
    survive everywhere; without it the signal is zero-extended and the filter
    globally normalised, which reproduces the reference STOI front end.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise DataError(f"target rate must be a positive integer, got {target_rate}")
    src = wav.sample_rate
    if target_rate == src:
        return wav
    g = gcd(src, int(target_rate))
    up, down = int(target_rate) // g, src // g
    h = resampling_filter(up, down, dc_exact=dc_exact)
    # resample_poly multiplies an explicit window by up
    y = resample_poly(wav.samples, up, down, window=h / up, padtype="edge" if dc_exact else "constant")
    n_out = int(np.floor(len(wav) * up / down + 0.5))
    return Waveform(y[:n_out], target_rate)


def remove_silent_frames(
    x: Waveform,
    y: Waveform,
    dyn_range_db: float = 40.0,
    frame_len: int = 256,
    hop: int = 128,
    window: str = "hann",
    normalize: bool = True,
) -> tuple[Waveform, Waveform]:
    """Drop frames where the clean signal ``x`` is more than ``dyn_range_db``
    below its loudest frame, from both signals.

    Frame energies use a windowed frame. Kept frames are stitched back by
    overlap-add with the same window. With ``normalize`` the sum is divided by
    the window overlap, so a signal with nothing to remove comes back
    unchanged and the operation is idempotent; without it the windowed frames
    are simply summed, as reference STOI does.
    """
    if len(x) != len(y):
        raise ShapeError(f"length mismatch: {len(x)} vs {len(y)}")
    if x.sample_rate != y.sample_rate:
        raise DataError(f"sample-rate mismatch: {x.sample_rate} vs {y.sample_rate}")
    if dyn_range_db <= 0:
        raise DataError("dyn_range_db must be positive")
    if not np.any(x.samples):
        raise NumericError("clean signal is entirely silent; reference energy undefined")
    w = make_window(window, frame_len)
    xf = frame_signal(x.samples, frame_len, hop)
    yf = frame_signal(y.samples, frame_len, hop)
    energies = 20 * np.log10(np.linalg.norm(xf * w, axis=1) + EPS)
    keep = energies > energies.max() - dyn_range_db
    den = overlap_add(np.broadcast_to(w, (int(keep.sum()), frame_len)), hop)
    ok = den > 1e-10

    def stitch(frames):
        num = overlap_add(frames[keep] * w, hop)
        if not normalize:
            return num
        out = np.zeros_like(num)
        out[ok] = num[ok] / den[ok]
        return out

    return x.with_samples(stitch(xf)), y.with_samples(stitch(yf))


def thirdoct(
    sample_rate: int,
    fft_size: int,
    num_bands: int = 15,
    min_center_freq: float = 150.0,
    edges: str = "nearest",
) -> OctaveBandMatrix:
    """One-third octave band matrix over the rfft bins.

    Band k is centred at ``min_center_freq * 2**(k/3)`` with nominal edges a
    sixth of an octave either side. ``edges="nearest"`` snaps each edge to the
    closest FFT bin and takes bins ``[low, high)``, as reference STOI does;
    ``edges="interval"`` takes the bins whose frequency lies in the nominal
    half-open range. Bands reaching past Nyquist are dropped and counted in
    ``num_dropped``.
    """
    if min_center_freq <= 0:
        raise DataError("min_center_freq must be positive")
    if num_bands < 1:
        raise DataError("num_bands must be >= 1")
    n_bins = fft_size // 2 + 1
    f = np.arange(n_bins) * sample_rate / fft_size
    k = np.arange(num_bands)
    cf = min_center_freq * 2.0 ** (k / 3)
    lo = min_center_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_center_freq * 2.0 ** ((2 * k + 1) / 6)
    valid = hi <= sample_rate / 2
    obm = np.zeros((num_bands, n_bins))
    for i in range(num_bands):
        if edges == "nearest":
            a = int(np.argmin(np.abs(f - lo[i])))
            b = int(np.argmin(np.abs(f - hi[i])))
            obm[i, a:b] = 1
        elif edges == "interval":
            obm[i] = (f >= lo[i]) & (f < hi[i])
        else:
            raise DataError(f"unknown edge rule {edges!r}")
    obm, cf = obm[valid], cf[valid]
    if len(cf) == 0 or not obm[0].any():
        raise DataError(
            f"no FFT bins fall in the first band at fs={sample_rate}, fft_size={fft_size}"
        )
    empty = np.flatnonzero(~obm.any(axis=1))
    if len(empty):
        raise DataError(f"bands {empty.tolist()} contain no FFT bins; increase fft_size")
    return OctaveBandMatrix(
        membership=_frozen(obm),
        center_freqs=_frozen(cf),
        sample_rate=sample_rate,
        fft_size=fft_size,
        num_dropped=int((~valid).sum()),
    )


def band_envelopes(mag, obm: OctaveBandMatrix) -> np.ndarray:
    """Per-band root-sum-square of magnitudes, shape (I, M)."""
    if isinstance(mag, MagnitudeSpectrogram):
        if mag.sample_rate != obm.sample_rate or mag.config.fft_size != obm.fft_size:
            raise ShapeError(
                f"band matrix built for ({obm.sample_rate} Hz, fft {obm.fft_size}) but "
                f"spectrogram is ({mag.sample_rate} Hz, fft {mag.config.fft_size})"
            )
        m = mag.mags
    else:
        m = np.asarray(mag, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != obm.membership.shape[1]:
        raise ShapeError(f"magnitudes {m.shape} do not match band matrix {obm.membership.shape}")
    return np.sqrt(obm.membership @ (m * m))


def segment_envelopes(env: np.ndarray, N: int) -> EnvelopeSegments:
    env = np.asarray(env, dtype=np.float64)
    if N < 2:
        raise DataError(f"segment length must be >= 2, got {N}")
    M = env.shape[1]
    if M < N:
        raise DataError(f"need at least {N} envelope frames, got {M}")
    segs = sliding_window_view(env, N, axis=1).transpose(1, 0, 2)
    return EnvelopeSegments(_frozen(segs), N)
