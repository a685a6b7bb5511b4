"""Per-utterance evaluation reports and the metric correlation study."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import FEATURE_STFT, extract_features
from .dsp import Waveform
from .errors import DataError
from .model import MaskEstimator, forward, ideal_ratio_mask
from .train import Example

METRIC_FIELDS = ("stoi", "estoi", "modified_stoi", "modified_estoi", "si_sdr")
UNAVAILABLE = ("PESQ", "VISQOL", "CSIG", "CBAK", "COVL")


def resynthesis_length(frames: int) -> int:
    return (frames - 1) * FEATURE_STFT.hop + FEATURE_STFT.frame_len


def signal_metrics(clean: Waveform, est: Waveform) -> dict:
    """All in-scope metrics of ``est`` against ``clean`` over their common
    length. Classical scores that cannot be computed are None."""
    n = min(len(clean), len(est))
    c, e = clean.with_samples(clean.samples[:n]), est.with_samples(est.samples[:n])
    out = dict.fromkeys(METRIC_FIELDS)
    try:
        out["stoi"] = metrics.stoi(c, e).value
        out["estoi"] = metrics.estoi(c, e).value
    except (DataError, ArithmeticError):
        pass
    cm, em = extract_features(c).mag, extract_features(e).mag
    out["modified_stoi"] = metrics.modified_stoi(cm, em).value
    out["modified_estoi"] = metrics.modified_stoi(cm, em, extended=True).value
    out["si_sdr"] = metrics.si_sdr(c, e)
    return out


def irm_output(ex: Example) -> Waveform:
    mask = ideal_ratio_mask(ex.clean_mag, ex.interferer_mag)
    return ex.noisy.reconstruct(mask * ex.noisy.mag.mags)


@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)  # {id, snr_db, system, metrics}

    @property
    def systems(self) -> list[str]:
        seen = []
        for r in self.records:
            if r["system"] not in seen:
                seen.append(r["system"])
        return seen

    def aggregates(self) -> dict[str, dict]:
        """Arithmetic mean per system and metric over utterances with a value."""
        agg = {}
        for s in self.systems:
            rows = [r["metrics"] for r in self.records if r["system"] == s]
            agg[s] = {}
            for m in METRIC_FIELDS:
                vals = [row[m] for row in rows if row[m] is not None]
                agg[s][m] = float(np.mean(vals)) if vals else None
            agg[s]["count"] = len(rows)
        return agg

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"aggregates": self.aggregates()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def render_table(self) -> str:
        agg = self.aggregates()
        width = max([len("system")] + [len(s) for s in agg]) + 2
        head = "system".ljust(width) + "".join(f"{m:>16}" for m in METRIC_FIELDS)
        lines = [head, "-" * len(head)]
        for s, row in agg.items():
            cells = "".join(f"{'n/a' if row[m] is None else format(row[m], '.4f'):>16}" for m in METRIC_FIELDS)
            lines.append(s.ljust(width) + cells)
        lines.append("")
        lines.append(f"means over {agg[self.systems[0]]['count'] if agg else 0} utterances; "
                     f"si_sdr in dB. Not available in this artifact: {', '.join(UNAVAILABLE)}.")
        return "\n".join(lines) + "\n"


def evaluate(
    examples: list[Example],
    models: dict[str, MaskEstimator] | None = None,
    include_irm: bool = True,
    include_identity: bool = False,
) -> EvalReport:
    """Score the noisy input, every model's enhanced output and the IRM oracle."""
    if not examples:
        raise DataError("nothing to evaluate")
    report = EvalReport()
    for ex in examples:
        L = resynthesis_length(ex.frames)
        outputs = {"noisy": ex.mixture.with_samples(ex.mixture.samples[:L])}
        for name, model in (models or {}).items():
            if model.config.use_visual and ex.visual is None:
                raise DataError(f"{name} is audio-visual but {ex.utterance_id} has no visual track")
            outputs[name] = enhance_example(model, ex)
        if include_irm:
            outputs["irm"] = irm_output(ex)
        if include_identity:
            outputs["clean"] = ex.clean
        for system, wav in outputs.items():
            report.records.append({
                "id": ex.utterance_id, "snr_db": ex.snr_db, "system": system,
                "metrics": signal_metrics(ex.clean, wav),
            })
    return report


def enhance_example(model: MaskEstimator, ex: Example) -> Waveform:
    vis = ex.visual if model.config.use_visual else None
    mask = forward(model, ex.noisy.mag.mags, vis).values
    return ex.noisy.reconstruct(mask * ex.noisy.mag.mags)


@dataclass
class CorrelationStudy:
    rows: list[dict]
    r_classical: float
    r_extended: float

    def to_csv(self) -> str:
        cols = ["id", "system", "stoi", "modified_stoi", "estoi", "modified_estoi"]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(str(r[c]) if isinstance(r[c], str) else repr(float(r[c])) for c in cols))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"pairs": len(self.rows), "pearson_stoi_vs_modified": self.r_classical,
                "pearson_estoi_vs_modified_extended": self.r_extended}


def correlate(examples: list[Example]) -> CorrelationStudy:
    """Classical vs modified scores for the noisy and IRM-enhanced version of
    every utterance."""
    if not examples:
        raise DataError("correlation study needs at least one utterance")
    rows = []
    for ex in examples:
        L = resynthesis_length(ex.frames)
        for system, wav in (("noisy", ex.mixture.with_samples(ex.mixture.samples[:L])), ("irm", irm_output(ex))):
            m = signal_metrics(ex.clean, wav)
            if m["stoi"] is None:
                raise DataError(f"{ex.utterance_id}: too short for classical STOI")
            rows.append({"id": ex.utterance_id, "system": system,
                         **{k: m[k] for k in ("stoi", "modified_stoi", "estoi", "modified_estoi")}})
    col = lambda k: [r[k] for r in rows]  # noqa: E731
    r1 = metrics.pearson(col("stoi"), col("modified_stoi"))
    r2 = metrics.pearson(col("estoi"), col("modified_estoi"))
    if not (math.isfinite(r1) and math.isfinite(r2)):
        raise DataError("correlation undefined")
    return CorrelationStudy(rows, r1, r2)
