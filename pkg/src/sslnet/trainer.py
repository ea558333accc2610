"""End-to-end training, evaluation metrics and the label-budget sweep."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import FeatureSet
from .dsp import ChannelStats, SpectralConfig
from .encoders import (SemanticEncoderSpec, SpectralEncoderSpec, linear_count, linear_params,
                       semantic_encode, spectral_encode)
from .errors import ConfigError, DataError, DimensionError
from .fusion import FusionConfig, fuse, init_fusion_params
from .tensor import Tensor

log = logging.getLogger(__name__)

BRANCHES = ("both", "spectral", "learned")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    fusion: FusionConfig = field(default_factory=FusionConfig)
    spectral: SpectralEncoderSpec = field(default_factory=SpectralEncoderSpec)
    semantic: SemanticEncoderSpec = field(default_factory=SemanticEncoderSpec)
    head_hidden: int = 64
    branches: str = "both"

    def __post_init__(self):
        if self.branches not in BRANCHES:
            raise ConfigError(f"model.branches: unknown value {self.branches!r}, expected one of {BRANCHES}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least two classes, got {self.n_classes}")
        if self.branches == "both" and not (self.spectral.out_dim == self.semantic.out_dim == self.fusion.d):
            raise ConfigError(
                f"branch widths must match fusion.d: spectral {self.spectral.out_dim}, "
                f"semantic {self.semantic.out_dim}, fusion {self.fusion.d}"
            )

    @property
    def head_in(self) -> int:
        if self.branches == "spectral":
            return self.spectral.out_dim
        if self.branches == "learned":
            return self.semantic.out_dim
        return self.fusion.out_dim

    @property
    def uses_spectral(self) -> bool:
        return self.branches in ("both", "spectral")

    @property
    def uses_learned(self) -> bool:
        return self.branches in ("both", "learned")

    def head_param_count(self) -> int:
        return linear_count(self.head_in, self.head_hidden) + linear_count(self.head_hidden, self.n_classes)

    def param_count(self) -> int:
        total = self.head_param_count()
        if self.uses_spectral:
            total += self.spectral.param_count()
        if self.uses_learned:
            total += self.semantic.param_count()
        if self.branches == "both":
            total += self.fusion.param_count()
        return total

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "fusion": self.fusion.to_dict(),
            "spectral": self.spectral.to_dict(),
            "semantic": self.semantic.to_dict(),
            "head_hidden": self.head_hidden,
            "branches": self.branches,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        spectral = dict(d["spectral"])
        spectral["widths"] = tuple(spectral["widths"])
        return cls(
            n_classes=d["n_classes"],
            fusion=FusionConfig(**d["fusion"]),
            spectral=SpectralEncoderSpec(**spectral),
            semantic=SemanticEncoderSpec(**d["semantic"]),
            head_hidden=d["head_hidden"],
            branches=d["branches"],
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    samples_per_class: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for key in ("epochs", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"train.{key}: must be >= 1, got {getattr(self, key)}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate: must be positive, got {self.learning_rate}")
        if self.samples_per_class is not None and self.samples_per_class < 1:
            raise ConfigError(f"train.samples_per_class: must be >= 1, got {self.samples_per_class}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("train: need 0 <= beta1, beta2 < 1 and eps > 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ model

def init_params(cfg: ModelConfig, rng: T.Rng) -> dict[str, Tensor]:
    gen = rng.stream("init")
    params: dict[str, Tensor] = {}
    if cfg.uses_spectral:
        params.update(cfg.spectral.init(gen))
    if cfg.uses_learned:
        params.update(cfg.semantic.init(gen))
    if cfg.branches == "both":
        params.update(init_fusion_params(cfg.fusion, gen))
    params["head.fc0.w"], params["head.fc0.b"] = linear_params(gen, cfg.head_in, cfg.head_hidden)
    # output layer starts at zero so the untrained model predicts the uniform distribution
    params["head.fc1.w"] = Tensor(np.zeros((cfg.head_hidden, cfg.n_classes)), requires_grad=True)
    params["head.fc1.b"] = Tensor(np.zeros(cfg.n_classes), requires_grad=True)
    return params


def mlp_head(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    w0 = params["head.fc0.w"]
    if h.shape[-1] != w0.shape[0]:
        raise ConfigError(f"head expects features of width {w0.shape[0]}, got {h.shape[-1]}")
    hidden = T.relu(T.linear(h, w0, params["head.fc0.b"]))
    return T.linear(hidden, params["head.fc1.w"], params["head.fc1.b"])


def fused_features(params, cfg: ModelConfig, stacks=None, embeddings=None, rng=None, noise=None) -> Tensor:
    """h for a batch: fused vector, or the single branch feature for ablations."""
    f_spe = spectral_encode(stacks, params, cfg.spectral) if cfg.uses_spectral else None
    f_sem = semantic_encode(embeddings, params, cfg.semantic) if cfg.uses_learned else None
    if cfg.branches == "spectral":
        return f_spe
    if cfg.branches == "learned":
        return f_sem
    return fuse(f_spe, f_sem, params, cfg.fusion, rng=rng, noise=noise)


def forward(params, cfg: ModelConfig, stacks=None, embeddings=None, rng=None, noise=None) -> Tensor:
    return mlp_head(fused_features(params, cfg, stacks, embeddings, rng, noise), params)


def frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Same values, no graph recording."""
    return {k: Tensor(v.values) for k, v in params.items()}


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ------------------------------------------------------------------ metrics

@dataclass
class Metrics:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    confusion: np.ndarray
    params: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "f1_macro": self.f1_macro,
            "params": self.params,
            "confusion": self.confusion.tolist(),
        }

    def summary(self) -> str:
        return (f"acc={self.accuracy:.4f} prc={self.precision_macro:.4f} rec={self.recall_macro:.4f} "
                f"f1={self.f1_macro:.4f} params={self.params}")


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def metrics_from_confusion(confusion: np.ndarray, params: int = 0) -> Metrics:
    """Rows are true classes, columns predictions. 0/0 counts as 0."""
    cm = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_ratio(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    total = cm.sum()
    return Metrics(
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision_macro=float(precision.mean()),
        recall_macro=float(recall.mean()),
        f1_macro=float(f1.mean()),
        confusion=cm,
        params=params,
    )


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


# ------------------------------------------------------------------ bundle

@dataclass
class ModelBundle:
    params: dict[str, Tensor]
    model: ModelConfig
    vocabulary: list[str]
    seed: int
    spectral_config: SpectralConfig = field(default_factory=SpectralConfig)
    stats: ChannelStats | None = None
    provider: dict | None = None
    train: TrainConfig | None = None

    def param_count(self) -> int:
        return T.count_params(self.params)

    def header(self) -> dict:
        return {
            "format": "sslnet-bundle",
            "version": 1,
            "model": self.model.to_dict(),
            "vocabulary": list(self.vocabulary),
            "seed": self.seed,
            "spectral_config": self.spectral_config.to_dict(),
            "stats": self.stats.to_dict() if self.stats is not None else None,
            "provider": self.provider,
            "train": self.train.to_dict() if self.train is not None else None,
            "param_count": self.param_count(),
            "tensors": [[name, list(t.shape)] for name, t in self.params.items()],
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "bundle.json").write_text(json.dumps(self.header(), indent=2, sort_keys=True) + "\n")
        parts = [b"SSLP", struct.pack("<HI", 1, len(self.params))]
        for name, t in self.params.items():
            raw = name.encode("utf-8")
            parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", t.values.ndim),
                      struct.pack(f"<{t.values.ndim}I", *t.shape), t.values.astype("<f8").tobytes()]
        (directory / "params.bin").write_bytes(b"".join(parts))

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = Path(directory)
        try:
            header = json.loads((directory / "bundle.json").read_text())
            blob = (directory / "params.bin").read_bytes()
        except OSError as exc:
            raise DataError(f"{directory}: cannot read model bundle ({exc.strerror or exc})") from exc
        if blob[:4] != b"SSLP":
            raise DataError(f"{directory}: params.bin is not a parameter blob")
        _, count = struct.unpack_from("<HI", blob, 4)
        pos, params = 10, {}
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + length].decode("utf-8")
            pos += 4 + length
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(blob[pos:pos + 8 * size], dtype="<f8").reshape(shape).copy()
            pos += 8 * size
            params[name] = Tensor(values, requires_grad=True)
        stats = ChannelStats.from_dict(header["stats"]) if header.get("stats") else None
        return cls(
            params=params,
            model=ModelConfig.from_dict(header["model"]),
            vocabulary=header["vocabulary"],
            seed=header["seed"],
            spectral_config=SpectralConfig(**header["spectral_config"]),
            stats=stats,
            provider=header.get("provider"),
            train=TrainConfig(**header["train"]) if header.get("train") else None,
        )


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict]
    initial_train_loss: float

    def history_dict(self) -> dict:
        return {"initial_train_loss": self.initial_train_loss, "epochs": self.history}


def truncate_per_class(train: FeatureSet, k: int | None, n_classes: int) -> FeatureSet:
    """Keep the first ``k`` train examples of each class, in manifest order."""
    if k is None:
        return train
    keep, taken = [], np.zeros(n_classes, dtype=np.int64)
    for i, label in enumerate(train.labels):
        if taken[label] < k:
            keep.append(i)
            taken[label] += 1
    empty = [train.vocabulary[c] for c in range(n_classes) if taken[c] == 0]
    if empty:
        raise DataError(f"no training examples left for class(es) {', '.join(empty)}")
    return train.subset(keep)


def _check_inputs(features: FeatureSet, cfg: ModelConfig):
    if cfg.uses_learned and features.embeddings is None:
        raise DataError("model uses the learned branch but the features carry no embeddings")
    if cfg.uses_learned and features.embeddings.shape[1] != cfg.semantic.d_emb:
        raise ConfigError(
            f"embeddings have length {features.embeddings.shape[1]}, semantic encoder expects {cfg.semantic.d_emb}"
        )


def predict_logits(params, cfg: ModelConfig, features: FeatureSet, batch_size: int = 64) -> np.ndarray:
    """Logits with Gumbel noise pinned to zero; no graph is recorded."""
    fixed = frozen(params)
    out = []
    for start in range(0, len(features), batch_size):
        sl = slice(start, start + batch_size)
        emb = features.embeddings[sl] if features.embeddings is not None else None
        out.append(forward(fixed, cfg, features.stacks[sl], emb).values)
    return np.concatenate(out) if out else np.zeros((0, cfg.n_classes))


def mean_loss(params, cfg: ModelConfig, features: FeatureSet, batch_size: int = 64) -> float:
    logits = predict_logits(params, cfg, features, batch_size)
    return float(T.cross_entropy(Tensor(logits), features.labels).values)


def fit(features: FeatureSet, train_cfg: TrainConfig, model_cfg: ModelConfig,
        spectral_config: SpectralConfig | None = None, provider: dict | None = None) -> TrainResult:
    """Train on the ``train`` split; report val accuracy per epoch when a val split exists."""
    _check_inputs(features, model_cfg)
    train = truncate_per_class(features.split("train"), train_cfg.samples_per_class, model_cfg.n_classes)
    val = features.split("val")
    rng = T.Rng(train_cfg.seed)
    params = init_params(model_cfg, rng)
    shuffle = rng.stream("shuffle")
    gumbel = rng.stream("gumbel")
    state = AdamState()
    initial = mean_loss(params, model_cfg, train)
    history = []
    n = len(train)
    for epoch in range(train_cfg.epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            emb = train.embeddings[idx] if train.embeddings is not None else None
            logits = forward(params, model_cfg, train.stacks[idx], emb, rng=gumbel)
            loss = T.cross_entropy(logits, train.labels[idx])
            for p in params.values():
                p.zero_grad()
            T.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state,
                      train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            total += float(loss.values) * idx.size
        record = {"epoch": epoch, "train_loss": total / n, "val_accuracy": None}
        if len(val):
            pred = np.argmax(predict_logits(params, model_cfg, val), axis=1)
            record["val_accuracy"] = float(np.mean(pred == val.labels))
        history.append(record)
        log.info("epoch %d loss %.4f val_acc %s", epoch, record["train_loss"], record["val_accuracy"])
    bundle = ModelBundle(
        params=params,
        model=model_cfg,
        vocabulary=list(features.vocabulary),
        seed=train_cfg.seed,
        spectral_config=spectral_config or SpectralConfig(),
        stats=features.stats,
        provider=provider,
        train=train_cfg,
    )
    return TrainResult(bundle, history, initial)


def train(manifest, train_cfg: TrainConfig, fusion_cfg: FusionConfig, provider,
          spectral_config: SpectralConfig | None = None, model_cfg: ModelConfig | None = None) -> TrainResult:
    """Extract features for ``manifest`` and fit a model on them."""
    from .data import extract_features

    spectral_config = spectral_config or SpectralConfig()
    features = extract_features(manifest, spectral_config, provider)
    if model_cfg is None:
        model_cfg = default_model_config(len(features.vocabulary), fusion_cfg, spectral_config, provider.d_emb)
    return fit(features, train_cfg, model_cfg, spectral_config, provider.to_dict())


def default_model_config(n_classes: int, fusion_cfg: FusionConfig, spectral_config: SpectralConfig,
                         d_emb: int = 256, branches: str = "both") -> ModelConfig:
    return ModelConfig(
        n_classes=n_classes,
        fusion=fusion_cfg,
        spectral=SpectralEncoderSpec(height=spectral_config.height, width=spectral_config.width,
                                     out_dim=fusion_cfg.d),
        semantic=SemanticEncoderSpec(d_emb=d_emb, out_dim=fusion_cfg.d),
        branches=branches,
    )


def evaluate(bundle: ModelBundle, features: FeatureSet, split: str | None = "test") -> Metrics:
    """Clip-level metrics; argmax ties go to the lowest class index."""
    subset = features.split(split) if split is not None else features
    if not len(subset):
        raise DataError(f"split {split!r} is empty")
    _check_inputs(subset, bundle.model)
    pred = np.argmax(predict_logits(bundle.params, bundle.model, subset), axis=1)
    cm = confusion_matrix(subset.labels, pred, bundle.model.n_classes)
    return metrics_from_confusion(cm, bundle.param_count())


# ------------------------------------------------------------------ sweep

VARIANTS = {
    "fixed": ("fixed", "both"),
    "shared": ("shared", "both"),
    "sampling": ("sampling", "both"),
    "spectral": ("fixed", "spectral"),
    "learned": ("fixed", "learned"),
}


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    """Fusion strategy by name, or a single-branch ablation ("spectral", "learned")."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown sweep variant {name!r}, expected one of {tuple(VARIANTS)}")
    strategy, branches = VARIANTS[name]
    return replace(base, fusion=replace(base.fusion, strategy=strategy), branches=branches)


def label_budget_sweep(features: FeatureSet, budgets, train_cfg: TrainConfig, base: ModelConfig,
                       variants=("fixed", "shared", "sampling"), split: str = "test") -> list[dict]:
    """One fresh train + evaluate per (variant, budget)."""
    budgets = [int(k) for k in budgets]
    if budgets != sorted(budgets) or not budgets or budgets[0] < 1:
        raise ConfigError(f"budgets must be positive and ascending, got {budgets}")
    per_class = np.bincount(features.split("train").labels, minlength=base.n_classes)
    if budgets[-1] > per_class.min():
        raise DataError(f"largest budget {budgets[-1]} exceeds the smallest per-class train count {per_class.min()}")
    rows = []
    for name in variants:
        cfg = variant_config(base, name)
        for k in budgets:
            result = fit(features, replace(train_cfg, samples_per_class=k), cfg)
            metrics = evaluate(result.bundle, features, split)
            rows.append({"strategy": name, "budget": k, **metrics.to_dict()})
            log.info("sweep %s k=%d %s", name, k, metrics.summary())
    return rows
