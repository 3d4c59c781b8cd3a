"""Command-line entry point: ``dubflow {gen-corpus,train,sample,evaluate,inspect}``.

Exit codes: 0 success, 1 validation error (bad flags, bad config, missing
inputs), 2 runtime error. Errors go to stderr as ``ERROR:<code>:<message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import corpus, flow, metrics, sampler
from .errors import (
    BadFlag,
    CheckpointVersionMismatch,
    DubflowError,
    MissingGeneration,
    MissingPayload,
    ParseError,
)

log = logging.getLogger("dubflow")

VALIDATION_ERRORS = (BadFlag, ParseError, MissingPayload, MissingGeneration, CheckpointVersionMismatch)
PATH_KEYS = ("manifest", "checkpoint", "generated", "out")


@dataclass
class RunConfig:
    """Training and sampling settings plus paths, as read from a JSON config.

    The file holds up to three sections, ``train``, ``sample`` and ``paths``,
    whose keys mirror ``TrainConfig``, ``SampleConfig`` and ``PATH_KEYS``.
    """

    train: flow.TrainConfig = field(default_factory=flow.TrainConfig)
    sample: sampler.SampleConfig = field(default_factory=sampler.SampleConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise BadFlag("config must be a JSON object")
        unknown = set(data) - {"train", "sample", "paths"}
        if unknown:
            raise BadFlag(f"unknown config sections: {sorted(unknown)}")
        paths = dict(data.get("paths", {}))
        bad_paths = set(paths) - set(PATH_KEYS)
        if bad_paths:
            raise BadFlag(f"unknown paths keys: {sorted(bad_paths)}")
        return cls(
            train=_build(flow.TrainConfig, data.get("train", {}), "train"),
            sample=_build(sampler.SampleConfig, data.get("sample", {}), "sample"),
            paths=paths,
        )

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise BadFlag(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "sample": asdict(self.sample), "paths": dict(self.paths)}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise BadFlag(f"config section {section!r} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise BadFlag(f"unknown {section} keys: {sorted(unknown)}")
    default = cls()
    for key, value in values.items():
        expected = type(getattr(default, key))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise BadFlag(f"{section}.{key} must be {expected.__name__}, got {value!r}")
        setattr(default, key, value)
    return default


def _override(obj, **flags) -> None:
    for key, value in flags.items():
        if value is not None:
            setattr(obj, key, value)


def _check(fn) -> None:
    try:
        fn()
    except (ValueError, NotImplementedError) as exc:
        raise BadFlag(str(exc)) from exc


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise BadFlag(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise BadFlag(f"{flag} {path} does not exist")
    return p


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> int:
    if args.n < 1:
        raise BadFlag("--n must be >= 1")
    manifest = corpus.generate_corpus(args.n, args.seed, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest)} clips to {Path(args.out) / 'manifest.jsonl'} {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    _override(cfg.train, steps=args.steps, seed=args.seed, batch_size=args.batch_size, lr=args.lr)
    _check(cfg.train.validate)
    manifest_path = _require_file(args.manifest or cfg.paths.get("manifest"), "--manifest")
    out = Path(args.out or cfg.paths.get("out") or "run")
    manifest = corpus.load_manifest(manifest_path)
    ckpt = flow.train(cfg.train, manifest.split("train"), log_path=out / "train_log.jsonl")
    digest = flow.save_checkpoint(ckpt, out / "checkpoint.vdxc")
    print(f"checkpoint {out / 'checkpoint.vdxc'} sha256 {digest}")
    print(f"final cfm_loss {ckpt.final_loss['cfm_loss']:.6f} dur_loss {ckpt.final_loss['dur_loss']:.6f}")
    return 0


def cmd_sample(args) -> int:
    cfg = RunConfig.load(args.config)
    _override(cfg.sample, lambda_v=args.lambda_v, lambda_c=args.lambda_c, lambda_t=args.lambda_t,
              steps=args.steps, seed=args.seed)
    _check(cfg.sample.validate)
    ckpt_path = _require_file(args.checkpoint or cfg.paths.get("checkpoint"), "--checkpoint")
    manifest_path = _require_file(args.manifest or cfg.paths.get("manifest"), "--manifest")
    out = Path(args.out or cfg.paths.get("generated") or "generated")
    ckpt = flow.load_checkpoint(ckpt_path)
    clips = corpus.load_manifest(manifest_path).split(args.split)
    if not clips:
        raise BadFlag(f"split {args.split!r} has no clips")
    for clip in clips:
        gen = sampler.generate_clip(ckpt, clip, cfg.sample)
        sampler.write_generated(out, gen, cfg.sample)
    print(f"wrote {len(clips)} generations to {out}")
    return 0


def cmd_evaluate(args) -> int:
    manifest_path = _require_file(args.manifest, "--manifest")
    generated = _require_file(args.generated, "--generated")
    manifest = corpus.load_manifest(manifest_path)
    echo = _sidecar_echo(generated, manifest.split(args.split))
    report = metrics.evaluate(manifest, generated, args.out, split=args.split, config_echo=echo)
    for name, value in report.aggregate.items():
        print(f"{name:12s} {value}")
    return 0


def _sidecar_echo(generated: Path, clips) -> dict:
    """Sampling settings recorded next to the first generated clip, if any."""
    for clip in clips:
        side = generated / f"{clip.id}.json"
        if side.exists():
            rec = json.loads(side.read_text(encoding="utf-8"))
            return {k: rec[k] for k in ("lambda", "steps", "seed", "scheme") if k in rec}
    return {}


def cmd_inspect(args) -> int:
    path = _require_file(args.path, "path")
    if path.is_dir():
        path = _require_file(str(path / "manifest.jsonl"), "path")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == corpus.PAYLOAD_MAGIC:
        magic, t, d = corpus.read_payload_header(path)
        print(f"payload {path}")
        print(f"magic {magic.decode('ascii')}")
        print(f"dims T={t} D={d}")
    elif head == flow.CHECKPOINT_MAGIC:
        version, header = flow.read_checkpoint_header(path)
        n = sum(_prod(p["shape"]) for p in header["parameters"])
        print(f"checkpoint {path}")
        print(f"magic {flow.CHECKPOINT_MAGIC.decode('ascii')} version {version}")
        print(f"parameters {len(header['parameters'])} tensors, {n} values")
        print(f"model {json.dumps(header['model_config'], sort_keys=True)}")
        print(f"train {json.dumps(header['config'], sort_keys=True)}")
        print(f"final_loss {json.dumps(header['final_loss'], sort_keys=True)}")
    elif path.suffix == ".jsonl":
        manifest = corpus.load_manifest(path)
        counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
        print(f"manifest {path}")
        print(f"clips {len(manifest)} {counts}")
        problems = corpus.validate(manifest)
        print(f"violations {len(problems)}")
        for v in problems[:20]:
            print(f"  {v.clip_id} {v.rule}: {v.detail}")
    else:
        try:
            report = metrics.MetricsReport.from_json(path.read_text(encoding="utf-8"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: unrecognised artifact") from exc
        print(f"report {path}")
        print(f"config {json.dumps(report.config_echo, sort_keys=True)}")
        for name, value in report.aggregate.items():
            print(f"{name:12s} {value}")
    return 0


def _prod(shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise BadFlag(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dubflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model on the train split")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate features for every clip of a split")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--lambda-v", type=float)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--lambda-t", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score generations against the references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print a summary of any artifact")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"ERROR:{exc.code}:{exc}", file=sys.stderr)
        return 1
    except DubflowError as exc:
        print(f"ERROR:{exc.code}:{exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"ERROR:{type(exc).__name__}:{exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
