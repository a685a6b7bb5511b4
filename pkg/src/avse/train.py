"""Example loading, Adam, and the training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import FEATURE_STFT, SAMPLE_RATE, Manifest, extract_features, load_visual, load_wav
from .dsp import Waveform
from .errors import DataError
from .losses import LossKind, batch_loss
from .metrics import StoiConfig, modified_stoi
from .model import Checkpoint, MaskEstimator, forward, masked, upsample_visual

log = logging.getLogger(__name__)

HOP_SECONDS = FEATURE_STFT.hop / SAMPLE_RATE


@dataclass(eq=False)
class Example:
    utterance_id: str
    snr_db: int
    clean: Waveform
    mixture: Waveform
    interferer: Waveform
    noisy: Features
    clean_mag: np.ndarray
    interferer_mag: np.ndarray
    visual: np.ndarray | None  # (T, D) at the audio frame rate

    @property
    def frames(self) -> int:
        return self.clean_mag.shape[1]


def load_examples(manifest: Manifest, split: str, visual: bool = True) -> list[Example]:
    """Read one split; visual files are only touched when ``visual`` is set."""
    out = []
    for e in manifest.split(split):
        rate = manifest.sample_rate
        clean = load_wav(manifest.path(e.clean_path), rate)
        mixture = load_wav(manifest.path(e.mixture_path), rate)
        interferer = load_wav(manifest.path(e.interferer_path), rate)
        if not len(clean) == len(mixture) == len(interferer):
            raise DataError(f"{e.utterance_id}: clean, mixture and interferer lengths differ")
        noisy = extract_features(mixture)
        T = noisy.mag.mags.shape[1]
        vis = None
        if visual:
            vis = upsample_visual(load_visual(manifest.path(e.visual_path)), T, HOP_SECONDS)
        out.append(Example(
            e.utterance_id, e.snr_db, clean, mixture, interferer, noisy,
            extract_features(clean).mag.mags, extract_features(interferer).mag.mags, vis,
        ))
    return out


# --------------------------------------------------------------------- optimiser


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with float64 moments; parameters are re-rounded to float32 after
    each update to keep the float32 checkpoint exact."""

    def __init__(self, params: dict[str, ag.Tensor], cfg: AdamConfig = AdamConfig()):
        self.params, self.cfg, self.step_count = params, cfg, 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self) -> None:
        c = self.cfg
        self.step_count += 1
        b1t = 1 - c.beta1 ** self.step_count
        b2t = 1 - c.beta2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * p.grad
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * p.grad**2
            update = c.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.eps)
            p.values = (p.values - update).astype(np.float32).astype(np.float64)

    def state(self) -> dict:
        return {"step": self.step_count, "hyper": asdict(self.cfg),
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


# ----------------------------------------------------------------- training loop


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "stoi"
    mode: str = "av"
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    mse_mode: str = "standard"
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.mode not in ("av", "ao"):
            raise DataError(f"mode must be 'av' or 'ao', got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("epochs must be >= 0 and batch_size >= 1")
        LossKind(self.loss)  # validates the tag

    @property
    def loss_kind(self) -> LossKind:
        return LossKind(self.loss, StoiConfig("modified_classical"), self.mse_mode)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown training config keys: {sorted(unknown)}")
        if isinstance(d.get("adam"), dict):
            d["adam"] = AdamConfig(**d["adam"])
        return cls(**d)


@dataclass
class TrainResult:
    history: list[dict]
    best: Checkpoint
    last: Checkpoint


def _visual(ex: Example, model: MaskEstimator):
    return ex.visual if model.config.use_visual else None


def example_loss(model: MaskEstimator, ex: Example, kind: LossKind) -> ag.Tensor:
    mask = forward(model, ex.noisy.mag.mags, _visual(ex, model))
    return kind(masked(ex.noisy.mag.mags, mask), ex.clean_mag)


def validate(model: MaskEstimator, examples: list[Example], kind: LossKind) -> tuple[float, float]:
    """Mean loss and mean modified STOI of the masked magnitude."""
    losses, scores = [], []
    for ex in examples:
        mask = forward(model, ex.noisy.mag.mags, _visual(ex, model))
        est = masked(ex.noisy.mag.mags, mask)
        losses.append(kind(est, ex.clean_mag).item())
        scores.append(modified_stoi(ex.clean_mag, est.values).value)
    return float(np.mean(losses)), float(np.mean(scores))


def baseline_loss(examples: list[Example], kind: LossKind) -> float:
    """Mean objective value of the unprocessed noisy magnitude (mask of ones)."""
    return float(np.mean([kind(ex.noisy.mag.mags, ex.clean_mag).item() for ex in examples]))


def check_preconditions(examples: list[Example], kind: LossKind) -> None:
    if not examples:
        raise DataError("no training examples")
    for ex in examples:
        if ex.frames < kind.min_frames:
            raise DataError(f"{ex.utterance_id}: {ex.frames} frames, the {kind.tag} loss needs {kind.min_frames}")


def checkpoint_of(model, opt, epoch, rng, extra=None) -> Checkpoint:
    return Checkpoint(model.config, model.state(), opt.state(), epoch, rng.bit_generator.state, extra or {})


def train(
    model: MaskEstimator,
    train_set: list[Example],
    val_set: list[Example],
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Minibatch training with per-utterance loss averaging.

    History entry 0 evaluates the untrained model; later entries hold the
    running mean training loss of that epoch. The checkpoint with the lowest
    validation loss is kept as ``best``.
    """
    kind = cfg.loss_kind
    check_preconditions(train_set, kind)
    check_preconditions(val_set, kind)
    opt = Adam(model.params, cfg.adam)
    rng = np.random.default_rng(cfg.seed)
    history, start = [], 0
    if resume is not None:
        model.load_state(resume.params)
        if resume.optimizer:
            opt.load(resume.optimizer)
        rng.bit_generator.state = resume.rng_state
        history = list(resume.extra.get("history", []))
        start = resume.epoch
    if not history:
        train_loss, _ = validate(model, train_set, kind)
        val_loss, val_stoi = validate(model, val_set, kind)
        history.append({"epoch": 0, "train_loss": train_loss, "val_loss": val_loss, "val_modified_stoi": val_stoi})
    best_rec = min(history, key=lambda h: h["val_loss"])
    best = checkpoint_of(model, opt, start, rng, {"history": history[: start + 1]}) if resume is None else None

    for epoch in range(start + 1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        batch_losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[b:b + cfg.batch_size]]
            model.zero_grad()
            loss = batch_loss(kind, [(masked(ex.noisy.mag.mags,
                                             forward(model, ex.noisy.mag.mags, _visual(ex, model))),
                                      ex.clean_mag) for ex in batch])
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        model.zero_grad()
        val_loss, val_stoi = validate(model, val_set, kind)
        rec = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)),
               "val_loss": val_loss, "val_modified_stoi": val_stoi}
        history.append(rec)
        log.info("epoch %d train %.5f val %.5f val-mSTOI %.4f", epoch, rec["train_loss"], val_loss, val_stoi)
        if val_loss < best_rec["val_loss"] or best is None:
            best_rec = rec
            best = checkpoint_of(model, opt, epoch, rng, {"history": list(history)})
    last = checkpoint_of(model, opt, max(cfg.epochs, start), rng, {"history": list(history)})
    if best is None:
        best = last
    return TrainResult(history, best, last)
