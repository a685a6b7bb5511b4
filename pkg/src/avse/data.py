"""Corpus plumbing: WAV I/O, synthetic voices, two-talker mixing, spectral
features, stand-in visual features and dataset manifests."""
from __future__ import annotations

import json
import logging
import os
import struct
import wave
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .dsp import MagnitudeSpectrogram, Spectrogram, StftConfig, Waveform
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FEATURE_STFT = StftConfig(frame_len=400, hop=160, fft_size=512, window="hann")
VIDEO_FPS = 25

# (F1, F2, F3) for a handful of vowels, adult male scale
VOWELS = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (530, 1840, 2480),
    (660, 1720, 2410),
    (300, 870, 2240),
    (640, 1190, 2390),
    (490, 1350, 1690),
    (440, 1020, 2240),
)


def rng_for(seed: int, key: str) -> np.random.Generator:
    """Independent stream for ``key`` under a top-level seed, stable across runs."""
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


# --------------------------------------------------------------------------- WAV


def save_wav(wav: Waveform, path) -> int:
    """Write 16-bit PCM mono. Returns the number of samples clipped to [-1, 1]."""
    x = wav.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        log.warning("%s: clipped %d samples", path, clipped)
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wav.sample_rate)
        w.writeframes(pcm.tobytes())
    return clipped


def load_wav(path, expected_rate: int | None = None, resample: bool = False) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError, struct.error) as e:
        raise DataError(f"{path}: malformed WAV header ({e})") from e
    if channels != 1:
        raise DataError(f"{path}: unsupported encoding, {channels} channels (need mono)")
    if width != 2:
        raise DataError(f"{path}: unsupported encoding, {8 * width}-bit samples (need 16-bit PCM)")
    if len(raw) != n * 2:
        raise DataError(f"{path}: truncated data chunk ({len(raw)} of {n * 2} bytes)")
    wav = Waveform(np.frombuffer(raw, dtype="<i2") / 32767.0, rate)
    if expected_rate is not None and rate != expected_rate:
        if not resample:
            raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
        wav = dsp.resample(wav, expected_rate)
    return wav


# --------------------------------------------------------------- synthetic voice


@dataclass(frozen=True)
class SynthVoiceSpec:
    speaker_seed: int
    f0_range: tuple[float, float] = (100.0, 140.0)
    formants: tuple[tuple[float, float, float], ...] = VOWELS
    syllable_rate: float = 4.0
    duration: float = 1.2
    utterance_seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        lo, hi = self.f0_range
        if not 80 <= lo <= hi <= 300:
            raise DataError(f"f0 range must lie within [80, 300] Hz, got {self.f0_range}")
        if self.duration <= 0:
            raise DataError("duration must be positive")
        if self.syllable_rate <= 0:
            raise DataError("syllable_rate must be positive")
        if not self.formants or any(len(f) != 3 for f in self.formants):
            raise DataError("formants must be a non-empty sequence of (F1, F2, F3)")

    @classmethod
    def for_speaker(cls, speaker_seed: int, utterance_seed: int = 0, **kw) -> "SynthVoiceSpec":
        """Speaker-specific pitch range and vocal-tract scaling drawn from the seed."""
        r = np.random.default_rng([speaker_seed, 7919])
        base = float(r.uniform(90, 220))
        scale = float(r.uniform(0.9, 1.2))
        formants = tuple(tuple(round(f * scale, 1) for f in v) for v in VOWELS)
        return cls(speaker_seed, (base, min(base * 1.3, 300.0)), formants,
                   utterance_seed=utterance_seed, **kw)


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _formant(x, freq, bw, fs):
    """Two-pole resonator normalised to unity gain at DC, as in cascade
    formant synthesisers."""
    r = np.exp(-np.pi * bw / fs)
    b, c = 2 * r * np.cos(2 * np.pi * freq / fs), -r * r
    return lfilter([1.0 - b - c], [1.0, -b, -c], x)


def synth_utterance(spec: SynthVoiceSpec) -> Waveform:
    """Harmonic source at a drifting f0, shaped by a per-syllable cascade of
    formant resonances and a raised-cosine syllable envelope with short gaps.

    Output is deterministic for a given spec and normalised to 0.05 RMS.
    """
    fs = spec.sample_rate
    n = int(round(spec.duration * fs))
    r = np.random.default_rng([spec.speaker_seed, spec.utterance_seed])
    t = np.arange(n) / fs
    lo, hi = spec.f0_range
    drift = 0.5 + 0.5 * np.sin(2 * np.pi * r.uniform(0.3, 0.8) * t + r.uniform(0, 2 * np.pi))
    f0 = lo + (hi - lo) * drift
    phase = 2 * np.pi * np.cumsum(f0) / fs
    n_harm = int(0.95 * (fs / 2) / hi)
    k = np.arange(1, n_harm + 1)
    # -6 dB/octave tilt on top of the resonances gives a speech-like spectral slope
    src = np.cos(np.outer(phase, k) + r.uniform(0, 2 * np.pi, n_harm)) @ (1.0 / k)
    aspiration = _resonator(r.standard_normal(n), 3500, 2500, fs) * 0.15
    src = src + aspiration

    syl_len = fs / spec.syllable_rate
    n_syl = int(np.ceil(n / syl_len))
    out = np.zeros(n)
    for s in range(n_syl):
        a = int(s * syl_len)
        b = min(n, int((s + 1) * syl_len))
        if a >= n:
            break
        f1, f2, f3 = spec.formants[r.integers(len(spec.formants))]
        jitter = r.uniform(0.95, 1.05, 3)
        seg = src[a:b]
        voiced = seg
        for f, j, bw in zip((f1, f2, f3), jitter, (80, 110, 160)):
            voiced = _formant(voiced, f * j, bw, fs)
        # leave a silent gap of ~20 % of the syllable
        on = int(0.8 * (b - a) * r.uniform(0.85, 1.0))
        env = np.zeros(b - a)
        env[:on] = np.sin(np.pi * np.arange(on) / on) ** 2 * r.uniform(0.5, 1.0)
        out[a:b] = voiced * env
    rms = np.sqrt(np.mean(out ** 2))
    return Waveform(out * (0.05 / rms), fs)


def speech_frame_fraction(wav: Waveform, dyn_range_db: float = 40.0, frame_len: int = 256, hop: int = 128) -> float:
    """Fraction of frames within ``dyn_range_db`` of the loudest frame."""
    w = dsp.make_window("hann", frame_len)
    frames = dsp.frame_signal(wav.samples, frame_len, hop) * w
    e = 20 * np.log10(np.linalg.norm(frames, axis=1) + dsp.EPS)
    return float(np.mean(e > e.max() - dyn_range_db))


def synth_noise(n: int, sample_rate: int, seed: int) -> Waveform:
    """Speech-shaped stationary noise for the optional noise-interferer mode."""
    r = np.random.default_rng(seed)
    x = _resonator(r.standard_normal(n), 500, 1500, sample_rate)
    return Waveform(x * 0.05 / np.sqrt(np.mean(x ** 2)), sample_rate)


# ------------------------------------------------------------------------ mixing


def fit_length(x: np.ndarray, n: int, mode: str = "crop") -> np.ndarray:
    """Centre-crop (or loop) ``x`` to ``n`` samples."""
    if len(x) == n:
        return x
    if len(x) > n:
        start = (len(x) - n) // 2
        return x[start:start + n]
    if mode == "loop":
        return np.resize(x, n)
    if mode == "crop":
        pad = n - len(x)
        return np.pad(x, (pad // 2, pad - pad // 2))
    raise DataError(f"unknown length-fit mode {mode!r}")


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float, fit: str = "crop"):
    """Scale ``interferer`` so the target-to-interferer energy ratio is
    ``snr_db`` over the whole utterance. Returns (mixture, scaled_interferer)."""
    if target.sample_rate != interferer.sample_rate:
        raise DataError(f"sample-rate mismatch: {target.sample_rate} vs {interferer.sample_rate}")
    v = fit_length(interferer.samples, len(target), fit)
    e_v = float(v @ v)
    if e_v == 0.0:
        raise DataError("interferer is silent")
    e_t = float(target.samples @ target.samples)
    scaled = v * np.sqrt(e_t / (e_v * 10 ** (snr_db / 10)))
    return target.with_samples(target.samples + scaled), target.with_samples(scaled)


def measured_snr(target: Waveform, interferer: Waveform) -> float:
    return float(10 * np.log10((target.samples @ target.samples) / (interferer.samples @ interferer.samples)))


# ---------------------------------------------------------------------- features


@dataclass(frozen=True, eq=False)
class Features:
    mag: MagnitudeSpectrogram
    phase: np.ndarray

    def spectrogram(self, mags=None) -> Spectrogram:
        m = self.mag.mags if mags is None else mags
        return Spectrogram(m * np.exp(1j * self.phase), self.mag.config, self.mag.sample_rate)

    def reconstruct(self, mags=None) -> Waveform:
        return dsp.istft(self.spectrogram(mags))


def extract_features(wav: Waveform, cfg: StftConfig = FEATURE_STFT) -> Features:
    """25 ms / 10 ms STFT at 16 kHz, zero-padded to a 512-point FFT."""
    if wav.sample_rate != SAMPLE_RATE:
        raise DataError(f"features expect {SAMPLE_RATE} Hz input, got {wav.sample_rate} Hz")
    spec = dsp.stft(wav, cfg)
    return Features(spec.magnitude(), spec.phase())


# ------------------------------------------------------------------ visual track


@dataclass(frozen=True, eq=False)
class VisualFeatureTrack:
    features: np.ndarray  # (n_frames, D)
    frame_rate: float = VIDEO_FPS

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ShapeError(f"visual track must be (n_frames >= 1, D), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DataError("visual features contain NaN or Inf")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def synth_visual_features(
    clean: Waveform,
    D: int = 64,
    fps: float = VIDEO_FPS,
    projection_seed: int = 0,
    noise_seed: int = 0,
    noise_std: float = 0.05,
) -> VisualFeatureTrack:
    """Stand-in lip features: a fixed random projection of the clean signal's
    normalised band envelopes, averaged over each video frame, plus noise.

    The projection depends only on ``projection_seed`` so every utterance in a
    corpus shares it, as a real lip encoder would.
    """
    if D <= 0:
        raise DataError(f"feature dimension must be positive, got {D}")
    feats = extract_features(clean)
    obm = dsp.thirdoct(clean.sample_rate, FEATURE_STFT.fft_size)
    env = dsp.band_envelopes(feats.mag, obm)  # (I, T)
    env = env / (env.max() + dsp.EPS)
    n_video = max(1, int(len(clean) * fps / clean.sample_rate))
    hop_s = FEATURE_STFT.hop / clean.sample_rate
    frame_video = np.minimum((np.arange(env.shape[1]) * hop_s * fps).astype(int), n_video - 1)
    pooled = np.zeros((n_video, env.shape[0]))
    for v in range(n_video):
        sel = frame_video == v
        if sel.any():
            pooled[v] = env[:, sel].mean(axis=1)
    proj = np.random.default_rng([projection_seed, 104729]).standard_normal((env.shape[0], D))
    proj /= np.sqrt(env.shape[0])
    noise = np.random.default_rng(noise_seed).standard_normal((n_video, D)) * noise_std
    return VisualFeatureTrack(pooled @ proj + noise, fps)


def save_visual(track: VisualFeatureTrack, path) -> None:
    """Binary layout: uint32 frame count, uint32 D, then row-major float32, all little-endian."""
    n, d = track.features.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", n, d))
        f.write(track.features.astype("<f4").tobytes())


def load_visual(path, frame_rate: float = VIDEO_FPS) -> VisualFeatureTrack:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    blob = path.read_bytes()
    if len(blob) < 8:
        raise DataError(f"{path}: truncated visual-feature header")
    n, d = struct.unpack("<II", blob[:8])
    if len(blob) != 8 + 4 * n * d:
        raise DataError(f"{path}: expected {n}x{d} floats, file holds {(len(blob) - 8) // 4}")
    data = np.frombuffer(blob, dtype="<f4", offset=8).reshape(n, d)
    return VisualFeatureTrack(data.astype(np.float64), frame_rate)


# ---------------------------------------------------------------------- manifest

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    utterance_id: str
    clean_path: str
    interferer_path: str
    snr_db: int
    mixture_path: str
    visual_path: str
    split: str
    speaker: int = -1
    interferer_speaker: int = -1


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    sample_rate: int = SAMPLE_RATE
    stft: dict = field(default_factory=lambda: asdict(FEATURE_STFT))
    root: str = "."

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def validate(self) -> None:
        seen = {}
        speakers = {s: set() for s in SPLITS}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"{e.utterance_id}: unknown split {e.split!r}")
            if seen.setdefault(e.utterance_id, e.split) != e.split:
                raise DataError(f"{e.utterance_id} appears in more than one split")
            if int(e.snr_db) != e.snr_db or not 0 <= e.snr_db <= 20:
                raise DataError(f"{e.utterance_id}: SNR {e.snr_db} outside integer 0..20 dB")
            speakers[e.split].update({e.speaker, e.interferer_speaker} - {-1})
        for a in SPLITS:
            for b in SPLITS:
                if a < b and speakers[a] & speakers[b]:
                    raise DataError(f"speakers {sorted(speakers[a] & speakers[b])} shared by {a} and {b}")

    def dumps(self) -> str:
        head = {"global": {"sample_rate": self.sample_rate, "stft": self.stft}}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: no such manifest")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        try:
            records = [json.loads(ln) for ln in lines]
            head = records[0]["global"]
            entries = [ManifestEntry(**r) for r in records[1:]]
        except (json.JSONDecodeError, KeyError, TypeError, IndexError) as e:
            raise DataError(f"{path}: malformed manifest ({e})") from e
        return cls(entries, head["sample_rate"], head["stft"], str(path.parent))


@dataclass
class CorpusConfig:
    seed: int = 0
    clean_per_split: dict = field(default_factory=lambda: {"train": 25, "val": 5, "test": 5})
    speakers_per_split: dict = field(default_factory=lambda: {"train": 25, "val": 5, "test": 5})
    mixtures_per_clean: int = 2
    duration: float = 1.2
    snr_range: tuple[int, int] = (0, 20)
    visual_dim: int = 32
    visual_noise: float = 0.05
    interferer: str = "speech"  # or "noise"
    length_fit: str = "crop"

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise DataError(f"unknown corpus config keys: {sorted(unknown)}")
        if "snr_range" in known:
            known["snr_range"] = tuple(known["snr_range"])
        return cls(**known)


def _speaker_pools(cfg: CorpusConfig) -> dict[str, list[int]]:
    pools, next_seed = {}, 1000 * (cfg.seed + 1)
    for split in SPLITS:
        n = cfg.speakers_per_split[split]
        if n < (2 if cfg.interferer == "speech" else 1):
            raise DataError(f"split {split!r} needs at least 2 speakers for speech-on-speech mixing")
        pools[split] = list(range(next_seed, next_seed + n))
        next_seed += n
    return pools


def make_dataset(cfg: CorpusConfig, out_dir) -> Manifest:
    """Synthesise clean utterances, mix each with independently drawn
    interferers from its own split, and write WAVs, visual tracks and the
    manifest. Every file derives its RNG from (seed, name) only."""
    out = Path(out_dir)
    try:
        for sub in ("clean", "interferer", "mixture", "visual"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    if any(cfg.clean_per_split.get(s, 0) < 1 for s in SPLITS):
        raise DataError("every split needs at least one clean utterance")
    lo, hi = cfg.snr_range
    if not (0 <= lo <= hi <= 20):
        raise DataError(f"SNR range must lie within 0..20 dB, got {cfg.snr_range}")
    pools = _speaker_pools(cfg)

    def utterance(split, idx):
        r = rng_for(cfg.seed, f"{split}/clean/{idx}")
        spk = pools[split][idx % len(pools[split])]
        spec = SynthVoiceSpec.for_speaker(spk, int(r.integers(2**31)), duration=cfg.duration)
        return spk, synth_utterance(spec)

    entries = []
    for split in SPLITS:
        n_clean = cfg.clean_per_split[split]
        for idx in range(n_clean):
            spk, clean = utterance(split, idx)
            uid = f"{split}_{idx:04d}"
            clean_rel = f"clean/{uid}.wav"
            save_wav(clean, out / clean_rel)
            vis_rel = f"visual/{uid}.avf"
            track = synth_visual_features(
                clean, cfg.visual_dim, projection_seed=cfg.seed,
                noise_seed=int(rng_for(cfg.seed, f"{uid}/visual").integers(2**31)),
                noise_std=cfg.visual_noise,
            )
            save_visual(track, out / vis_rel)
            for m in range(cfg.mixtures_per_clean):
                mid = f"{uid}_m{m}"
                r = rng_for(cfg.seed, f"{mid}/mix")
                snr = int(r.integers(lo, hi + 1))
                if cfg.interferer == "speech":
                    others = [i for i in range(n_clean) if pools[split][i % len(pools[split])] != spk]
                    if not others:
                        raise DataError(f"split {split!r} has no utterance from a different speaker")
                    other = int(others[r.integers(len(others))])
                    ispk, interferer = utterance(split, other)
                else:
                    ispk, interferer = -1, synth_noise(len(clean), clean.sample_rate, int(r.integers(2**31)))
                mixture, scaled = mix_at_snr(clean, interferer, snr, cfg.length_fit)
                save_wav(scaled, out / f"interferer/{mid}.wav")
                save_wav(mixture, out / f"mixture/{mid}.wav")
                entries.append(ManifestEntry(
                    mid, clean_rel, f"interferer/{mid}.wav", snr, f"mixture/{mid}.wav",
                    vis_rel, split, spk, ispk,
                ))
    manifest = Manifest(entries, root=str(out))
    manifest.validate()
    manifest.write(out / "manifest.jsonl")
    return manifest
