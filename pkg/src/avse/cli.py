"""Command-line entry point: ``avse {synth-data,train,evaluate,correlate,spectrogram}``.

Exit codes: 0 success, 2 usage error, 3 data or I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data, evaluation
from .errors import DataError, NumericError
from .model import ModelConfig, build, load_checkpoint, save_checkpoint
from .train import TrainConfig, load_examples, train

log = logging.getLogger("avse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DB_FLOOR = -80.0


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise DataError(f"{path}: no such config file") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    return out


def _splits(spec: str) -> list[str]:
    names = list(data.SPLITS) if spec == "all" else spec.split(",")
    bad = [s for s in names if s not in data.SPLITS]
    if bad:
        raise DataError(f"unknown split(s) {bad}; use {', '.join(data.SPLITS)} or 'all'")
    return names


# ---------------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    cfg = data.CorpusConfig.from_dict(_read_config(args.config).get("corpus", {}))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifest = data.make_dataset(cfg, _out_dir(args.out))
    counts = {s: len(manifest.split(s)) for s in data.SPLITS}
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "mixtures": counts}))
    return EXIT_OK


def cmd_train(args) -> int:
    conf = _read_config(args.config)
    tdict = dict(conf.get("train", {}))
    for key in ("loss", "mode", "epochs", "seed"):
        if getattr(args, key) is not None:
            tdict[key] = getattr(args, key)
    tcfg = TrainConfig.from_dict(tdict)
    mcfg = ModelConfig.from_dict({**conf.get("model", {}), "seed": tcfg.seed, "use_visual": tcfg.mode == "av"})
    manifest = data.Manifest.read(args.manifest)
    visual = tcfg.mode == "av"
    train_set = load_examples(manifest, "train", visual)
    val_set = load_examples(manifest, "val", visual)
    if visual:
        mcfg = replace(mcfg, visual_in=train_set[0].visual.shape[1])
    out = _out_dir(args.out)
    result = train(build(mcfg), train_set, val_set, tcfg)
    (out / "history.jsonl").write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in result.history))
    save_checkpoint(result.best, out / "best.ckpt")
    save_checkpoint(result.last, out / "last.ckpt")
    (out / "train_config.json").write_text(json.dumps({"train": asdict(tcfg), "model": asdict(mcfg)}, indent=2, sort_keys=True))
    print(json.dumps(result.history[-1], sort_keys=True))
    return EXIT_OK


def _parse_checkpoint_arg(spec: str) -> tuple[str, str]:
    name, sep, path = spec.partition("=")
    return (name, path) if sep else (Path(spec).parent.name or Path(spec).stem, spec)


def cmd_evaluate(args) -> int:
    manifest = data.Manifest.read(args.manifest)
    models = {}
    for spec in args.checkpoint or []:
        name, path = _parse_checkpoint_arg(spec)
        ckpt = load_checkpoint(path)
        models[name] = ckpt.model()
    needs_visual = any(m.config.use_visual for m in models.values())
    examples = [ex for s in _splits(args.split) for ex in load_examples(manifest, s, needs_visual)]
    for name, m in models.items():
        if m.config.use_visual and examples[0].visual.shape[1] != m.config.visual_in:
            raise DataError(f"{name}: expects {m.config.visual_in}-D visual features, "
                            f"manifest provides {examples[0].visual.shape[1]}")
    report = evaluation.evaluate(examples, models, include_identity=args.identity)
    out = _out_dir(args.out)
    (out / "report.jsonl").write_text(report.to_jsonl())
    table = report.render_table()
    (out / "table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_correlate(args) -> int:
    manifest = data.Manifest.read(args.manifest)
    examples = [ex for s in _splits(args.split) for ex in load_examples(manifest, s, visual=False)]
    study = evaluation.correlate(examples)
    out = _out_dir(args.out)
    (out / "scatter.csv").write_text(study.to_csv())
    (out / "correlation.json").write_text(json.dumps(study.summary(), indent=2, sort_keys=True))
    print(json.dumps(study.summary(), sort_keys=True))
    return EXIT_OK


def spectrogram_db(mags: np.ndarray, floor_db: float = DB_FLOOR) -> np.ndarray:
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(mags)
    return np.maximum(db, floor_db)


def write_pgm(db: np.ndarray, path, floor_db: float = DB_FLOOR) -> None:
    """8-bit binary graymap, T wide and F tall, low frequencies at the bottom."""
    top = db.max()
    scale = 255.0 / (top - floor_db) if top > floor_db else 0.0
    img = np.round((db[::-1] - floor_db) * scale).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def cmd_spectrogram(args) -> int:
    out = _out_dir(args.out)
    for p in args.wavs:
        wav = data.load_wav(p, data.SAMPLE_RATE, resample=True)
        db = spectrogram_db(data.extract_features(wav).mag.mags)
        stem = Path(p).stem
        write_pgm(db, out / f"{stem}.pgm")
        np.save(out / f"{stem}.npy", db)
        print(json.dumps({"wav": str(p), "image": str(out / f"{stem}.pgm"), "bins": db.shape[0], "frames": db.shape[1]}))
    return EXIT_OK


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--config", default=None, help="JSON file with corpus/model/train sections")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="avse", description="Audio-visual speech enhancement experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="synthesise a toy corpus and manifest")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train a mask estimator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--loss", choices=("mse", "mae", "stoi"), default=None)
    p.add_argument("--mode", choices=("ao", "av"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score noisy, enhanced and IRM outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", action="append", metavar="[NAME=]PATH")
    p.add_argument("--identity", action="store_true", help="add a clean-as-output sanity row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("correlate", parents=[common], help="classical vs modified STOI scatter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", help="split name, comma list, or 'all'")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("spectrogram", parents=[common], help="export log-magnitude spectrograms")
    p.add_argument("wavs", nargs="+")
    p.set_defaults(func=cmd_spectrogram)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
