"""Training objectives on magnitude spectrograms: MSE, MAE and the negated
frequency-domain STOI, all expressed in :mod:`avse.autograd` ops.

The STOI loss mirrors :func:`avse.metrics.modified_stoi` step for step (same
epsilon placement, same degenerate-row rule) so the two agree to rounding.
The reference spectrogram is treated as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsp import EPS
from .errors import DataError, ShapeError
from .metrics import StoiConfig, band_matrix, degenerate_rows

LOSS_KINDS = ("mse", "mae", "stoi")


def _pair(est, ref):
    est = ag.as_tensor(est)
    ref_values = ref.values if isinstance(ref, Tensor) else np.asarray(ref, dtype=np.float64)
    if est.shape != ref_values.shape:
        raise ShapeError(f"estimate {est.shape} and reference {ref_values.shape} differ")
    if est.ndim != 2 or est.shape[1] < 1:
        raise ShapeError(f"expected an (F, T) spectrogram with T >= 1, got {est.shape}")
    return est, ref_values


def _norm(v: Tensor, axis, keepdims=True) -> Tensor:
    # sqrt'(0) = 0, so an all-zero vector gets a zero gradient instead of an error
    return ag.sqrt(ag.sum(ag.square(v), axis=axis, keepdims=keepdims))


def _expand(v: Tensor, n: int, axis: int) -> Tensor:
    return ag.upsample(v, n, axis)


def mse_loss(est, ref, mode: str = "standard") -> Tensor:
    """Mean squared error over all bins (``standard``), or the mean over frames
    of each frame's L2 distance (``literal``, the per-frame norm form)."""
    est, ref = _pair(est, ref)
    diff = ag.sub(est, ref)
    if mode == "standard":
        return ag.mean(ag.square(diff))
    if mode == "literal":
        return ag.mean(_norm(diff, axis=0, keepdims=False))
    raise DataError(f"unknown MSE mode {mode!r}")


def mae_loss(est, ref) -> Tensor:
    est, ref = _pair(est, ref)
    return ag.mean(ag.abs(ag.sub(est, ref)))


def _unit_rows(v: Tensor, axis: int) -> Tensor:
    n = v.shape[axis]
    centred = ag.sub(v, _expand(ag.mean(v, axis=axis, keepdims=True), n, axis))
    return ag.div(centred, _expand(ag.add(_norm(centred, axis), EPS), n, axis))


def _unit_const(v: np.ndarray, axis: int) -> np.ndarray:
    v = v - v.mean(axis=axis, keepdims=True)
    return v / (np.linalg.norm(v, axis=axis, keepdims=True) + EPS)


def stoi_score(est, ref, cfg: StoiConfig | None = None, sample_rate: int = 16000, fft_size: int = 512) -> Tensor:
    """Differentiable frequency-domain STOI of ``est`` against constant ``ref``."""
    cfg = cfg or StoiConfig()
    if not cfg.variant.startswith("modified"):
        raise DataError(f"the STOI loss works on spectra; variant {cfg.variant!r} is time-domain")
    est, ref = _pair(est, ref)
    if est.shape[1] < cfg.N:
        raise DataError(f"STOI loss needs T >= N={cfg.N} frames, got {est.shape[1]}")
    if not np.any(ref):
        raise DataError("reference spectrogram is all zero")
    obm = band_matrix(sample_rate, fft_size, cfg.num_bands, cfg.min_cf).membership
    if obm.shape[1] != est.shape[0]:
        raise ShapeError(f"band matrix expects {obm.shape[1]} bins, spectrogram has {est.shape[0]}")
    N = cfg.N

    x_seg = np.lib.stride_tricks.sliding_window_view(np.sqrt(obm @ ref ** 2), N, axis=1).transpose(1, 0, 2)
    y_env = ag.sqrt(ag.matmul(obm, ag.square(est)))
    y_seg = ag.segment(y_env, N)
    x_ok = ~degenerate_rows(x_seg)

    if cfg.extended:
        xn = np.where(x_ok[..., None], _unit_const(x_seg, 2), 0.0)
        xn = _unit_const(xn, 1)
        yr = _unit_rows(y_seg, 2)
        y_ok = ~degenerate_rows(y_seg.values)
        yr = ag.mul(yr, np.broadcast_to(y_ok[..., None], yr.shape).astype(float))
        yn = _unit_rows(yr, 1)
        per_segment = ag.mul(ag.sum(ag.mul(yn, xn), axis=(1, 2)), 1.0 / N)
        return ag.mean(per_segment)

    x_norm = np.linalg.norm(x_seg, axis=2, keepdims=True)
    y_norm = ag.add(_norm(y_seg, 2), EPS)
    scale = ag.div(np.broadcast_to(x_norm, y_seg.shape).copy(), _expand(y_norm, N, 2))
    y_clip = ag.min_with_const(ag.mul(y_seg, scale), cfg.clip_factor * x_seg)
    keep = x_ok & ~degenerate_rows(y_clip.values)
    d = ag.sum(ag.mul(_unit_rows(y_clip, 2), _unit_const(x_seg, 2)), axis=2)
    return ag.mean(ag.mul(d, keep.astype(float)))


def stoi_loss(est, ref, cfg: StoiConfig | None = None, sample_rate: int = 16000, fft_size: int = 512) -> Tensor:
    """Negated frequency-domain STOI; minimising it maximises intelligibility."""
    return ag.neg(stoi_score(est, ref, cfg, sample_rate, fft_size))


@dataclass(frozen=True)
class LossKind:
    tag: str = "stoi"
    stoi: StoiConfig = field(default_factory=StoiConfig)
    mse_mode: str = "standard"

    def __post_init__(self):
        if self.tag not in LOSS_KINDS:
            raise DataError(f"unknown loss {self.tag!r}; choose from {LOSS_KINDS}")

    @property
    def min_frames(self) -> int:
        return self.stoi.N if self.tag == "stoi" else 1

    def __call__(self, est, ref) -> Tensor:
        if self.tag == "mse":
            return mse_loss(est, ref, self.mse_mode)
        if self.tag == "mae":
            return mae_loss(est, ref)
        return stoi_loss(est, ref, self.stoi)


def batch_loss(kind: LossKind, pairs) -> Tensor:
    """Mean of per-utterance losses."""
    losses = [kind(est, ref) for est, ref in pairs]
    if not losses:
        raise DataError("empty batch")
    total = losses[0]
    for loss in losses[1:]:
        total = ag.add(total, loss)
    return ag.mul(total, 1.0 / len(losses))
