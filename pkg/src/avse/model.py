"""U-Net style mask estimator with an optional visual branch.

Layout for the default config (F = 256 model bins, C channels, T frames):

    audio  1xFxT --conv4/2--> CxF/2xT/2 --conv4/2--> CxF/4xT/4
           3 x [conv3, relu, conv3, relu, pool_freq(2)]      -> CxF/32xT/4
    visual T x D_in (repeated to the audio rate) --temporal conv, stride 4-->
           2 pointwise layers -> D x 1 x T/4, broadcast over frequency
    fusion concat(audio, visual) along channels
    decode 3 x [upsample_freq(2), concat skip, conv3, relu, conv3, relu]
           2 x [concat skip from the matching downsampling layer, transposed conv4/2]
           -> 1xFxT, sigmoid

The STFT has F + 1 bins; the Nyquist bin is left out of the network and
receives the mask of the bin below it. Parameters are stored at float32
precision (rounded on creation and after every update) and computed in float64.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import dsp
from .autograd import Tensor
from .data import FEATURE_STFT, SAMPLE_RATE, VisualFeatureTrack, extract_features
from .dsp import Waveform
from .errors import DataError, ShapeError

IRM_EPS = 1e-12
CHECKPOINT_MAGIC = b"AVSECKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_bins: int = 256
    down_layers: int = 2
    channels: int = 16
    conv_blocks: int = 3
    visual_in: int = 32
    visual_dim: int = 16
    up_blocks: int = 3
    skip_connections: bool = True
    use_visual: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("input_bins", "channels", "visual_in", "visual_dim"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.down_layers < 1 or self.conv_blocks < 1:
            raise DataError("need at least one downsampling layer and one conv block")
        if self.up_blocks != self.conv_blocks:
            raise ShapeError(
                f"decoder has {self.up_blocks} up-blocks but encoder pools {self.conv_blocks} times; "
                "the output would not match the input size"
            )
        if self.input_bins % self.freq_factor:
            raise ShapeError(
                f"F={self.input_bins} is not divisible by 2^{self.down_layers + self.conv_blocks} "
                f"= {self.freq_factor} (downsampling plus pooling)"
            )

    @property
    def time_factor(self) -> int:
        return 2 ** self.down_layers

    @property
    def freq_factor(self) -> int:
        return 2 ** (self.down_layers + self.conv_blocks)

    @property
    def bottleneck_bins(self) -> int:
        return self.input_bins // self.freq_factor

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(eq=False)
class MaskEstimator:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise DataError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape}, model expects {self.params[k].shape}")
            self.params[k].values = _f32(v)

    def zero_visual(self) -> None:
        """Zero every visual-branch weight; AV output then equals AO output."""
        for k, p in self.params.items():
            if k.startswith("vis."):
                p.values = np.zeros_like(p.values)

    def forward(self, noisy_mag, visual=None) -> Tensor:
        return forward(self, noisy_mag, visual)


def _shapes(cfg: ModelConfig) -> dict[str, tuple]:
    C, D = cfg.channels, cfg.visual_dim
    shapes = {}
    cin = 1
    for i in range(cfg.down_layers):
        shapes[f"enc.down{i}.w"], shapes[f"enc.down{i}.b"] = (C, cin, 4, 4), (C,)
        cin = C
    for j in range(cfg.conv_blocks):
        for k in range(2):
            shapes[f"enc.block{j}.conv{k}.w"], shapes[f"enc.block{j}.conv{k}.b"] = (C, C, 3, 3), (C,)
    if cfg.use_visual:
        s = cfg.time_factor
        shapes["vis.temporal.w"], shapes["vis.temporal.b"] = (D, cfg.visual_in, 1, 2 * s), (D,)
        for k in range(2):
            shapes[f"vis.point{k}.w"], shapes[f"vis.point{k}.b"] = (D, D, 1, 1), (D,)
    fused = C + D
    for j in range(cfg.up_blocks):
        cin = (fused if j == 0 else C) + (C if cfg.skip_connections else 0)
        shapes[f"dec.up{j}.conv0.w"], shapes[f"dec.up{j}.conv0.b"] = (C, cin, 3, 3), (C,)
        shapes[f"dec.up{j}.conv1.w"], shapes[f"dec.up{j}.conv1.b"] = (C, C, 3, 3), (C,)
    for i in range(cfg.down_layers):
        cout = 1 if i == cfg.down_layers - 1 else C
        cin = 2 * C if cfg.skip_connections else C
        shapes[f"dec.out{i}.w"], shapes[f"dec.out{i}.b"] = (cin, cout, 4, 4), (cout,)
    return shapes


def build(config: ModelConfig) -> MaskEstimator:
    """Create a model with seeded He-uniform weights and zero biases.

    Visual-branch weights are always drawn so that audio-only and audio-visual
    models with the same seed share every audio weight.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    keep = _shapes(config)
    for name, shape in _shapes(replace(config, use_visual=True)).items():
        if name.endswith(".b"):
            values = np.zeros(shape)
        else:
            # transposed-conv kernels are (in, out, kh, kw); others (out, in, kh, kw)
            fan_in = shape[0 if name.startswith("dec.out") else 1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        if name in keep:
            params[name] = Tensor(_f32(values), requires_grad=True)
    return MaskEstimator(config, params)


def upsample_visual(track: VisualFeatureTrack, audio_frames: int, audio_hop_seconds: float) -> np.ndarray:
    """Repeat video frames to the audio frame rate (nearest preceding frame),
    clamping trailing audio frames to the last video frame. Returns (T, D)."""
    if audio_frames < 1:
        raise DataError("need at least one audio frame")
    if track.n_frames < 1:
        raise DataError("empty visual track")
    ratio = Fraction(audio_hop_seconds).limit_denominator(10**6) * Fraction(track.frame_rate).limit_denominator(10**4)
    idx = (np.arange(audio_frames) * ratio.numerator) // ratio.denominator
    return track.features[np.minimum(idx, track.n_frames - 1)]


def model_input(noisy_mag: np.ndarray, bins: int) -> np.ndarray:
    """Per-utterance standardised log magnitude of the first ``bins`` bins."""
    logm = np.log(noisy_mag[:bins] + 1e-6)
    return (logm - logm.mean()) / (logm.std() + 1e-8)


def _conv_relu(x, p, name, stride=1, padding=1):
    return ag.relu(ag.conv2d(x, p[name + ".w"], p[name + ".b"], stride, padding))


def forward(model: MaskEstimator, noisy_mag, visual=None) -> Tensor:
    """Mask in (0, 1) for an (F+1, T) noisy magnitude spectrogram.

    ``visual`` is a (T, D_in) matrix already at the audio frame rate, or None
    for audio-only operation (a model built without a visual branch ignores it).
    """
    cfg, p = model.config, model.params
    mag = noisy_mag.values if isinstance(noisy_mag, Tensor) else np.asarray(noisy_mag, dtype=np.float64)
    F = cfg.input_bins
    if mag.ndim != 2 or mag.shape[0] != F + 1:
        raise ShapeError(f"expected ({F + 1}, T) magnitudes, got {mag.shape}")
    T = mag.shape[1]
    Tp = -(-T // cfg.time_factor) * cfg.time_factor

    x = np.zeros((1, F, Tp))
    x[0, :, :T] = model_input(mag, F)
    h = Tensor(x)
    down = []
    for i in range(cfg.down_layers):
        h = _conv_relu(h, p, f"enc.down{i}", stride=2, padding=1)
        down.append(h)
    skips = []
    for j in range(cfg.conv_blocks):
        h = _conv_relu(h, p, f"enc.block{j}.conv0")
        h = _conv_relu(h, p, f"enc.block{j}.conv1")
        skips.append(h)
        h = ag.pool_freq(h, 2)

    Fb, Tb = h.shape[1], h.shape[2]
    v = _visual_branch(model, visual, T, Tp, Fb, Tb)
    h = ag.concat([h, v], axis=0)

    for j in range(cfg.up_blocks):
        h = ag.upsample_freq(h, 2)
        if cfg.skip_connections:
            h = ag.concat([h, skips[-1 - j]], axis=0)
        h = _conv_relu(h, p, f"dec.up{j}.conv0")
        h = _conv_relu(h, p, f"dec.up{j}.conv1")
    for i in range(cfg.down_layers):
        if cfg.skip_connections:
            h = ag.concat([h, down[-1 - i]], axis=0)
        h = ag.conv_transpose2d(h, p[f"dec.out{i}.w"], p[f"dec.out{i}.b"], 2, 1)
        if i < cfg.down_layers - 1:
            h = ag.relu(h)
    mask = ag.sigmoid(ag.getitem(h, (0, slice(None), slice(0, T))))
    return ag.concat([mask, ag.getitem(mask, (slice(F - 1, F), slice(None)))], axis=0)


def _visual_branch(model, visual, T, Tp, Fb, Tb) -> Tensor:
    cfg, p = model.config, model.params
    if not cfg.use_visual or visual is None:
        return Tensor(np.zeros((cfg.visual_dim, Fb, Tb)))
    visual = np.asarray(visual, dtype=np.float64)
    if visual.shape != (T, cfg.visual_in):
        raise ShapeError(f"visual features must be ({T}, {cfg.visual_in}), got {visual.shape}")
    vin = np.zeros((cfg.visual_in, 1, Tp))
    vin[:, 0, :T] = visual.T
    s = cfg.time_factor
    v = ag.relu(ag.conv2d(vin, p["vis.temporal.w"], p["vis.temporal.b"], (1, s), (0, s // 2)))
    v = ag.relu(ag.conv2d(v, p["vis.point0.w"], p["vis.point0.b"]))
    v = ag.relu(ag.conv2d(v, p["vis.point1.w"], p["vis.point1.b"]))
    return ag.upsample_freq(v, Fb)


def masked(noisy_mag: np.ndarray, mask: Tensor) -> Tensor:
    return ag.mul(mask, np.asarray(noisy_mag, dtype=np.float64))


def enhance(model: MaskEstimator, noisy: Waveform, visual: VisualFeatureTrack | None = None) -> Waveform:
    """Mask the noisy magnitude and resynthesise with the noisy phase."""
    if noisy.sample_rate != SAMPLE_RATE:
        raise DataError(f"enhance expects {SAMPLE_RATE} Hz input, got {noisy.sample_rate}")
    if len(noisy) < FEATURE_STFT.frame_len:
        raise DataError(f"input has {len(noisy)} samples, need at least one {FEATURE_STFT.frame_len}-sample frame")
    feats = extract_features(noisy)
    T = feats.mag.mags.shape[1]
    vis = None
    if visual is not None and model.config.use_visual:
        vis = upsample_visual(visual, T, FEATURE_STFT.hop / SAMPLE_RATE)
    mask = forward(model, feats.mag.mags, vis).values
    return feats.reconstruct(mask * feats.mag.mags)


def ideal_ratio_mask(clean_mag, interferer_mag) -> np.ndarray:
    c = np.asarray(clean_mag, dtype=np.float64)
    n = np.asarray(interferer_mag, dtype=np.float64)
    if c.shape != n.shape:
        raise ShapeError(f"shape mismatch: {c.shape} vs {n.shape}")
    return np.sqrt(c**2 / (c**2 + n**2 + IRM_EPS))


# ------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)  # {"step": int, "hyper": {...}, "m": {...}, "v": {...}}
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> MaskEstimator:
        m = build(self.config)
        m.load_state(self.params)
        return m


def _blob_table(arrays: dict[str, np.ndarray], prefix: str, dtype: str, table: list, buf: io.BytesIO):
    for name, a in arrays.items():
        raw = np.ascontiguousarray(a, dtype=dtype).tobytes()
        table.append({"name": f"{prefix}{name}", "shape": list(a.shape), "dtype": dtype,
                      "offset": buf.tell(), "nbytes": len(raw)})
        buf.write(raw)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Container: magic, uint32 version, uint64 header length, JSON header,
    then raw little-endian blobs (parameters float32, optimizer moments float64)."""
    buf, table = io.BytesIO(), []
    _blob_table(ckpt.params, "param/", "<f4", table, buf)
    opt = dict(ckpt.optimizer)
    for key in ("m", "v"):
        _blob_table(opt.pop(key, {}), f"adam.{key}/", "<f8", table, buf)
    header = {
        "config": asdict(ckpt.config), "epoch": ckpt.epoch, "rng_state": ckpt.rng_state,
        "optimizer": opt, "extra": ckpt.extra, "blobs": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        f.write(head)
        f.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such checkpoint")
    blob = path.read_bytes()
    n0 = len(CHECKPOINT_MAGIC)
    if blob[:n0] != CHECKPOINT_MAGIC or len(blob) < n0 + 12:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[n0:n0 + 12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[n0 + 12:n0 + 12 + hlen])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: corrupt checkpoint header ({e})") from e
    body = blob[n0 + 12 + hlen:]
    groups = {"param": {}, "adam.m": {}, "adam.v": {}}
    for b in header["blobs"]:
        if b["offset"] + b["nbytes"] > len(body):
            raise DataError(f"{path}: truncated blob {b['name']}")
        group, name = b["name"].split("/", 1)
        a = np.frombuffer(body, dtype=b["dtype"], count=b["nbytes"] // np.dtype(b["dtype"]).itemsize,
                          offset=b["offset"]).reshape(b["shape"])
        groups[group][name] = a.astype(np.float64)
    opt = dict(header["optimizer"])
    if groups["adam.m"] or "step" in opt:
        opt["m"], opt["v"] = groups["adam.m"], groups["adam.v"]
    return Checkpoint(
        ModelConfig.from_dict(header["config"]), groups["param"], opt,
        header["epoch"], header["rng_state"], header.get("extra", {}),
    )
