"""``sslnet`` command line: synth, extract, train, eval, sweep, dump-embeddings.

Exit codes: 0 success, 1 configuration/usage error, 2 data/IO error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, load_config, override
from .encoders import FileEmbeddingProvider, PseudoEmbeddingProvider, write_embedding_archive
from .errors import ConfigError, DataError, SSLNetError, UsageError
from .synth import generate, generate_complementary
from .trainer import (ModelBundle, default_model_config, evaluate, fit, frozen, fused_features,
                      label_budget_sweep)

log = logging.getLogger("sslnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.paths.out
    if out is None:
        raise UsageError("no output directory: pass --out or set paths.out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} {path} does not exist")
    return path


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = override(cfg, "paths", manifest=getattr(args, "manifest", None), features=getattr(args, "features", None),
                   embeddings=getattr(args, "embeddings", None), out=getattr(args, "out", None))
    return cfg


def _provider(cfg: RunConfig, spectral=None, provider_dict: dict | None = None):
    kind = provider_dict["kind"] if provider_dict else cfg.provider.kind
    d_emb = provider_dict["d_emb"] if provider_dict else cfg.provider.d_emb
    if kind == "file":
        path = cfg.paths.embeddings or cfg.provider.path
        return FileEmbeddingProvider(_existing(path, "embedding archive"), d_emb)
    seed = provider_dict["seed"] if provider_dict else cfg.provider.seed
    return PseudoEmbeddingProvider(seed, d_emb, spectral or cfg.spectral)


def _features(cfg: RunConfig, manifest: D.Manifest, provider, spectral=None, stats=None) -> D.FeatureSet:
    """Features from the archive when configured, otherwise extracted from audio."""
    spectral = spectral or cfg.spectral
    if cfg.paths.features is None:
        return D.extract_features(manifest, spectral, provider, stats)
    feats = D.features_from_archive(_existing(cfg.paths.features, "feature archive"), manifest)
    if stats is not None and feats.stats is not None and not (
            np.array_equal(stats.mean, feats.stats.mean) and np.array_equal(stats.std, feats.stats.std)):
        raise DataError(f"{cfg.paths.features}: standardization statistics differ from the model's")
    if isinstance(provider, FileEmbeddingProvider):
        return D.attach_embeddings(feats, provider)
    # pseudo embeddings need audio; the archive only saves the spectral work
    audio = D.extract_features(manifest, spectral, provider, stats or feats.stats)
    feats.embeddings = audio.embeddings
    return feats


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    cfg = override(cfg, "synth", seed=args.seed, clips_per_class=args.clips_per_class, n_classes=args.classes)
    out = _out_dir(args, cfg)
    if args.complementary:
        path = generate_complementary(out, clips_per_class=cfg.synth.clips_per_class, seed=cfg.synth.seed,
                                      d_emb=cfg.provider.d_emb, snr=cfg.synth.snr, duration=cfg.synth.duration,
                                      sample_rate=cfg.synth.sample_rate)
    else:
        path = generate(cfg.synth, out)
    print(f"wrote {path}")
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    manifest = D.read_manifest(_existing(cfg.paths.manifest, "manifest"))
    out = _out_dir(args, cfg)
    provider = _provider(cfg) if cfg.provider.kind == "pseudo" and not args.no_embeddings else None
    feats = D.extract_features(manifest, cfg.spectral, provider)
    D.write_feature_archive(out / "features.sslf", feats.ids, feats.stacks, feats.labels, sidecar={
        "stats": feats.stats.to_dict(),
        "spectral_config": cfg.spectral.to_dict(),
        "vocabulary": feats.vocabulary,
        "channel_order": ["MEL", "STFT", "MFCC"],
    })
    if provider is not None:
        write_embedding_archive(out / "embeddings.ssle", feats.ids, feats.embeddings)
    print(f"extracted {len(feats)} clips from {len(manifest.records)} records into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg = override(cfg, "train", seed=args.seed, epochs=args.epochs)
    cfg = override(cfg, "fusion", strategy=args.strategy)
    manifest = D.read_manifest(_existing(cfg.paths.manifest, "manifest"))
    out = _out_dir(args, cfg)
    provider = _provider(cfg)
    feats = _features(cfg, manifest, provider)
    model_cfg = dataclasses.replace(
        default_model_config(len(feats.vocabulary), cfg.fusion, cfg.spectral, cfg.provider.d_emb, cfg.model.branches),
        head_hidden=cfg.model.head_hidden,
    )
    result = fit(feats, cfg.train, model_cfg, cfg.spectral, provider.to_dict())
    result.bundle.save(out / "model")
    write_json(out / "history.json", result.history_dict())
    last = result.history[-1]
    print(f"trained {cfg.fusion.strategy} model: loss={last['train_loss']:.4f} "
          f"val_acc={last['val_accuracy']} params={result.bundle.param_count()}")
    return 0


def _bundle_inputs(args):
    cfg = _config(args)
    bundle = ModelBundle.load(_existing(args.bundle, "model bundle"))
    manifest = D.read_manifest(_existing(cfg.paths.manifest, "manifest"))
    provider = _provider(cfg, bundle.spectral_config, bundle.provider) if bundle.model.uses_learned else None
    feats = _features(cfg, manifest, provider, bundle.spectral_config, bundle.stats)
    if feats.vocabulary != bundle.vocabulary:
        raise DataError("manifest label vocabulary differs from the model's")
    return cfg, bundle, feats


def cmd_eval(args) -> int:
    cfg, bundle, feats = _bundle_inputs(args)
    metrics = evaluate(bundle, feats, args.split)
    out = _out_dir(args, cfg)
    write_json(out / f"metrics_{args.split}.json", {"split": args.split, **metrics.to_dict()})
    print(metrics.summary())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    cfg = override(cfg, "train", seed=args.seed, epochs=args.epochs)
    budgets = [int(b) for b in args.budgets.split(",")] if args.budgets else list(cfg.sweep.budgets)
    variants = args.variants.split(",") if args.variants else list(cfg.sweep.variants)
    manifest = D.read_manifest(_existing(cfg.paths.manifest, "manifest"))
    out = _out_dir(args, cfg)
    provider = _provider(cfg)
    feats = _features(cfg, manifest, provider)
    base = dataclasses.replace(
        default_model_config(len(feats.vocabulary), cfg.fusion, cfg.spectral, cfg.provider.d_emb),
        head_hidden=cfg.model.head_hidden,
    )
    rows = label_budget_sweep(feats, budgets, cfg.train, base, variants, cfg.sweep.split)
    write_json(out / "sweep.json", {"split": cfg.sweep.split, "rows": rows})
    for row in rows:
        print(f"{row['strategy']},{row['budget']},{row['accuracy']:.4f},{row['f1_macro']:.4f},{row['params']}")
    return 0


def cmd_dump_embeddings(args) -> int:
    cfg, bundle, feats = _bundle_inputs(args)
    subset = feats.split(args.split)
    if not len(subset):
        raise DataError(f"split {args.split!r} is empty")
    params = frozen(bundle.params)
    chunks = []
    for start in range(0, len(subset), 64):
        sl = slice(start, start + 64)
        emb = subset.embeddings[sl] if subset.embeddings is not None else None
        chunks.append(fused_features(params, bundle.model, subset.stacks[sl], emb).values)
    out = _out_dir(args, cfg) / f"fused_{args.split}.ssle"
    write_embedding_archive(out, subset.ids, np.concatenate(chunks), subset.labels)
    print(f"wrote {len(subset)} fused vectors of width {chunks[0].shape[1]} to {out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sslnet", description="Spectral + learned feature fusion for bird-sound classification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--clips-per-class", type=int)
    p.add_argument("--complementary", action="store_true",
                   help="label split between audio frequency and a file-backed embedding group")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="build the SSLF feature archive")
    common(p, seed=False)
    p.add_argument("--manifest")
    p.add_argument("--no-embeddings", action="store_true", help="skip the pseudo-embedding archive")
    p.set_defaults(func=cmd_extract)

    for name, func, helptext in (("train", cmd_train, "train a model"), ("sweep", cmd_sweep, "label-budget sweep")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--manifest")
        p.add_argument("--features", help="SSLF archive from extract")
        p.add_argument("--embeddings", help="SSLE archive for the learned branch")
        p.add_argument("--epochs", type=int)
        if name == "train":
            p.add_argument("--strategy", help="fixed, shared or sampling")
        else:
            p.add_argument("--budgets", help="comma-separated samples per class, ascending")
            p.add_argument("--variants", help="comma-separated: fixed,shared,sampling,spectral,learned")
        p.set_defaults(func=func)

    for name, func in (("eval", cmd_eval), ("dump-embeddings", cmd_dump_embeddings)):
        p = sub.add_parser(name, help="evaluate a model" if name == "eval" else "write fused features (SSLE)")
        common(p, seed=False)
        p.add_argument("--bundle", required=True, help="model directory written by train")
        p.add_argument("--manifest")
        p.add_argument("--features")
        p.add_argument("--embeddings")
        p.add_argument("--split", default="test", choices=D.SPLITS)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except SSLNetError as exc:
        print(f"sslnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sslnet {args.command}: IO error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"sslnet {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
