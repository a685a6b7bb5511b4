"""Desk-scale reproductions of the loss/modality comparison."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Manifest
from .evaluation import evaluate
from .model import MaskEstimator, ModelConfig, build
from .train import Example, TrainConfig, baseline_loss, load_examples, train

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: list[Example]
    val: list[Example]
    test: list[Example]

    @classmethod
    def load(cls, manifest: Manifest) -> "Splits":
        return cls(*(load_examples(manifest, s, visual=True) for s in ("train", "val", "test")))


@dataclass
class ArmResult:
    loss: str
    mode: str
    seed: int
    history: list[dict]
    model: MaskEstimator
    noisy_val_loss: float
    test_modified_stoi: float
    noisy_test_modified_stoi: float

    @property
    def initial_loss(self) -> float:
        return self.history[0]["train_loss"]

    @property
    def final_loss(self) -> float:
        return self.history[-1]["train_loss"]

    @property
    def best_val_loss(self) -> float:
        return min(h["val_loss"] for h in self.history[1:])


def run_arm(splits: Splits, loss: str, mode: str, seed: int = 0, epochs: int = 10,
            model_cfg: ModelConfig | None = None) -> ArmResult:
    """Train one (loss, modality, seed) arm and score its best checkpoint on
    the test split."""
    tcfg = TrainConfig(loss=loss, mode=mode, epochs=epochs, seed=seed)
    base = model_cfg or ModelConfig()
    mcfg = ModelConfig(**{**base.__dict__, "seed": seed, "use_visual": mode == "av",
                          "visual_in": splits.train[0].visual.shape[1]})
    result = train(build(mcfg), splits.train, splits.val, tcfg)
    model = result.best.model()
    report = evaluate(splits.test, {"enhanced": model}, include_irm=False)
    agg = report.aggregates()
    out = ArmResult(
        loss, mode, seed, result.history, model,
        baseline_loss(splits.val, tcfg.loss_kind),
        agg["enhanced"]["modified_stoi"], agg["noisy"]["modified_stoi"],
    )
    log.info("%s/%s seed %d: test mSTOI %.4f (noisy %.4f)", loss, mode, seed,
             out.test_modified_stoi, out.noisy_test_modified_stoi)
    return out


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
