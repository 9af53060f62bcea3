"""Command-line entry point: ``cabcnn {synth,train,eval,gradcheck,predict}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from . import audio, metrics
from .errors import CabCnnError, ConfigError, NumericError
from .gradcheck import format_report, run_gradcheck
from .model import ModelConfig, build, load_with_extra, save
from .training import TrainConfig, predict_proba, train, write_history

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.cabcnn"
HISTORY_NAME = "history.csv"
SCORES_NAME = "scores.json"
RESOLVED_CONFIG_NAME = "resolved_config.json"

log = logging.getLogger("cabcnn")


class UsageError(CabCnnError):
    pass


@dataclass
class RunConfig:
    manifest: str = "manifest.csv"
    out: str = "run"
    split_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def T_seconds(self) -> int:
        return self.train.T_seconds

    def to_dict(self) -> dict[str, Any]:
        return {
            "manifest": self.manifest,
            "out": self.out,
            "split_seed": self.split_seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        known = {"manifest", "out", "split_seed", "model", "train"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        model = defaults.model.to_dict()
        model.update(d.get("model", {}))
        tcfg = defaults.train.to_dict()
        tcfg.update(d.get("train", {}))
        try:
            return cls(
                manifest=d.get("manifest", defaults.manifest),
                out=d.get("out", defaults.out),
                split_seed=int(d.get("split_seed", defaults.split_seed)),
                model=ModelConfig.from_dict(model),
                train=TrainConfig(**tcfg),
            )
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        cfg = cls.from_dict(json.loads(path.read_text()))
        path = path.resolve()
        manifest = Path(cfg.manifest)
        if not manifest.is_absolute():
            cfg.manifest = str(path.parent / manifest)
        return cfg


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_corpus(manifest: str, t_seconds: int) -> dict[str, tuple[np.ndarray, int]]:
    rows = audio.read_manifest(manifest)
    if not rows:
        raise ConfigError(f"manifest {manifest} lists no clips")
    data = {}
    for path, label in rows:
        clip = audio.load_wav(path, label)
        data[path] = (audio.preprocess(clip, t_seconds), label)
    return data


def _score(model, samples) -> dict:
    probs = predict_proba(model, samples)
    pairs = [(label, int(p)) for (_, label), p in zip(samples, probs.argmax(axis=1))]
    return metrics.score_report(metrics.build_confusion(pairs, model.config.n_classes))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.per_class < 1:
        raise UsageError("--per-class must be at least 1")
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    out = Path(args.out or "corpus")
    clip_dir = out / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for clip in audio.synth_corpus(args.per_class, args.classes, args.seed):
        rel = Path("clips") / f"{clip.clip_id}.wav"
        audio.write_wav(out / rel, clip.samples, clip.sample_rate)
        rows.append((rel.as_posix(), clip.label))
    audio.write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} clips and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    elif not Path(cfg.out).is_absolute():
        cfg.out = str(Path(args.config).parent / cfg.out)
    if args.seed is not None:
        cfg.split_seed = args.seed
        cfg.model = ModelConfig.from_dict({**cfg.model.to_dict(), "seed": args.seed})
        cfg.train.seed = args.seed
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG_NAME).write_text(_dump_json(cfg.to_dict()))

    data = _load_corpus(cfg.manifest, cfg.T_seconds)
    labels = {label for _, label in data.values()}
    if max(labels) >= cfg.model.n_classes:
        raise ConfigError(f"manifest has label {max(labels)} but the model has {cfg.model.n_classes} classes")
    array_dir = out / "arrays"
    array_dir.mkdir(exist_ok=True)
    for path, (arr, label) in data.items():
        stem = Path(path).stem
        audio.save_array(array_dir / f"{stem}.f64", arr, stem, label)

    split = audio.split_dataset([(p, label) for p, (_, label) in data.items()], cfg.split_seed)
    train_set = [data[p] for p, _ in split.train]
    val_set = [data[p] for p, _ in split.validation]
    test_set = [data[p] for p, _ in split.test]

    model = build(cfg.model)
    result = train(model, train_set, val_set, cfg.train)
    write_history(out / HISTORY_NAME, result.history)
    save(model, out / CHECKPOINT_NAME, extra={"T_seconds": cfg.T_seconds, "split_seed": cfg.split_seed})
    scores = _score(model, test_set)
    log.info("best epoch %d of %d", result.best_epoch, len(result.history))
    (out / SCORES_NAME).write_text(_dump_json(scores))
    print(_dump_json(scores), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_with_extra(args.checkpoint)
    t_seconds = int(extra.get("T_seconds", TrainConfig().T_seconds))
    data = _load_corpus(args.manifest, t_seconds)
    labels = {label for _, label in data.values()}
    n_classes = model.config.n_classes
    if len(labels) != n_classes or max(labels) >= n_classes:
        raise ConfigError(
            f"class-count mismatch: checkpoint has {n_classes} classes, manifest has labels {sorted(labels)}"
        )
    if args.split == "all":
        samples = list(data.values())
    else:
        seed = args.seed if args.seed is not None else int(extra.get("split_seed", 0))
        split = audio.split_dataset([(p, label) for p, (_, label) in data.items()], seed)
        samples = [data[p] for p, _ in split.parts()[args.split]]
    scores = _score(model, samples)
    text = _dump_json(scores)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed or 0, n_seeds=args.n_seeds)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_predict(args) -> int:
    model, extra = load_with_extra(args.checkpoint)
    t_seconds = int(extra.get("T_seconds", TrainConfig().T_seconds))
    clip = audio.load_wav(args.wav)
    arr = audio.preprocess(clip, t_seconds)
    probs = predict_proba(model, [arr])[0]
    print(json.dumps({"class": int(probs.argmax()), "probabilities": probs.tolist()}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, bitwise reproducible)")
    common.add_argument("--out", default=None, help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cabcnn", description="Classifier-attention CNN for raw-waveform audio classification")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic WAV corpus and manifest")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.set_defaults(func=cmd_synth, seed_default=0)

    p = sub.add_parser("train", parents=[common], help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["all", "train", "validation", "test"], default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict", parents=[common], help="classify one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except UsageError as exc:
        print(f"cabcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"cabcnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CabCnnError, OSError, ValueError, KeyError) as exc:
        print(f"cabcnn: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
