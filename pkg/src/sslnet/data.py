"""Manifests, feature extraction over a dataset, and the SSLF feature archive."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import ChannelStats, SpectralConfig, load_wav, mel_filterbank, segment, spectral_grids, stack_grids
from .encoders import provide_embedding
from .errors import DataError, SSLNetError

SPLITS = ("train", "val", "test")
FEATURE_MAGIC = b"SSLF"


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: str
    split: str


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise DataError(f"manifest: duplicate id {rec.id!r}")
            seen.add(rec.id)
            if rec.split not in SPLITS:
                raise DataError(f"manifest: record {rec.id!r} has unknown split {rec.split!r}")
        splits = {rec.split for rec in self.records}
        if "train" not in splits or "test" not in splits:
            raise DataError("manifest: need at least one train and one test record")

    @property
    def vocabulary(self) -> list[str]:
        return sorted({rec.label for rec in self.records})

    def resolve(self, rec: ManifestRecord) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "path", "label", "split"]:
                raise DataError(f"{path}: manifest header must be id,path,label,split")
            records = [ManifestRecord(r["id"], r["path"], r["label"], r["split"]) for r in reader]
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    return Manifest(records, path.parent)


def write_manifest(path, records):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "path", "label", "split"])
        for rec in records:
            writer.writerow([rec.id, rec.path, rec.label, rec.split])


@dataclass
class FeatureSet:
    """Per-clip model inputs in manifest order.

    Stacks and embeddings are rounded through float32 so that features read back
    from an archive are identical to freshly extracted ones.
    """

    ids: list[str]
    stacks: np.ndarray  # (n, 3, H, W)
    labels: np.ndarray  # (n,) class indices
    splits: np.ndarray  # (n,) split names
    vocabulary: list[str]
    embeddings: np.ndarray | None = None  # (n, d_emb)
    stats: ChannelStats | None = None

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "FeatureSet":
        index = np.asarray(index, dtype=np.int64)
        return FeatureSet(
            [self.ids[i] for i in index],
            self.stacks[index],
            self.labels[index],
            self.splits[index],
            self.vocabulary,
            None if self.embeddings is None else self.embeddings[index],
            self.stats,
        )

    def split(self, name: str) -> "FeatureSet":
        return self.subset(np.flatnonzero(self.splits == name))


def _embed(provider, clip, logmel, cfg: SpectralConfig) -> np.ndarray:
    # the pseudo provider can reuse the log-mel already computed for the stack
    if hasattr(provider, "embed_logmel") and provider.spectral == cfg:
        vec = provider.embed_logmel(logmel)
        if vec.shape == (provider.d_emb,) and np.all(np.isfinite(vec)):
            return vec
    return provide_embedding(provider, clip)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def extract_features(manifest: Manifest, cfg: SpectralConfig, provider=None,
                     stats: ChannelStats | None = None) -> FeatureSet:
    """Segment, build spectral stacks and (optionally) embeddings for every record.

    Standardization statistics are fitted on the train split unless given.
    Every failing record is reported in one DataError.
    """
    vocab = manifest.vocabulary
    index = {name: i for i, name in enumerate(vocab)}
    bank = mel_filterbank(cfg)
    ids, stacks, labels, splits, embeddings, failures = [], [], [], [], [], []
    for rec in manifest.records:
        try:
            clip = load_wav(manifest.resolve(rec), rec.id)
            for piece in segment(clip, cfg):
                grids = spectral_grids(piece, cfg, bank)
                stacks.append(stack_grids(grids, cfg).channels)
                if provider is not None:
                    embeddings.append(_embed(provider, piece, grids[0], cfg))
                ids.append(piece.source_id)
                labels.append(index[rec.label])
                splits.append(rec.split)
        except SSLNetError as exc:
            failures.append(f"{rec.id}: {exc}")
    if failures:
        raise DataError(f"feature extraction failed for {len(failures)} record(s):\n  " + "\n  ".join(failures))
    raw = np.stack(stacks)
    split_arr = np.asarray(splits)
    if stats is None:
        stats = ChannelStats.fit(raw[split_arr == "train"])
    z = (raw - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return FeatureSet(
        ids,
        _f32(z),
        np.asarray(labels, dtype=np.int64),
        split_arr,
        vocab,
        _f32(np.stack(embeddings)) if embeddings else None,
        stats,
    )


def attach_embeddings(features: FeatureSet, provider) -> FeatureSet:
    """Fill embeddings by id (file-backed providers only need the id)."""
    vecs = np.stack([provide_embedding(provider, sid) for sid in features.ids])
    features.embeddings = _f32(vecs)
    return features


# ------------------------------------------------------------------ SSLF archive

def write_feature_archive(path, ids, stacks, labels, sidecar: dict | None = None):
    """SSLF archive plus an optional JSON sidecar (grid size, statistics, config)."""
    stacks = np.asarray(stacks)
    parts = [FEATURE_MAGIC, struct.pack("<HI", 1, len(ids))]
    for sid, stack, label in zip(ids, stacks, labels):
        raw = sid.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, np.ascontiguousarray(stack, dtype="<f4").tobytes(),
                  struct.pack("<I", int(label))]
    Path(path).write_bytes(b"".join(parts))
    if sidecar is not None:
        meta = dict(sidecar, height=int(stacks.shape[2]), width=int(stacks.shape[3]), n_records=len(ids))
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_feature_archive(path, height: int | None = None, width: int | None = None):
    """Return (ids, stacks float64 (n, 3, H, W), labels, sidecar dict or None).

    The archive itself does not record the grid size; it comes from the sidecar
    unless passed explicitly.
    """
    path = Path(path)
    meta = None
    if sidecar_path(path).exists():
        meta = json.loads(sidecar_path(path).read_text())
        height = height or meta["height"]
        width = width or meta["width"]
    if height is None or width is None:
        raise DataError(f"{path}: grid size unknown (no sidecar); pass height and width")
    data = path.read_bytes()
    if len(data) < 10 or data[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not an SSLF feature archive")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported SSLF version {version}")
    cells = 3 * height * width
    pos, ids, labels = 10, [], np.empty(n, dtype=np.int64)
    stacks = np.empty((n, 3, height, width))
    try:
        for i in range(n):
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ids.append(data[pos:pos + length].decode("utf-8"))
            pos += length
            chunk = data[pos:pos + 4 * cells]
            if len(chunk) != 4 * cells:
                raise DataError(f"{path}: record {i} is truncated")
            stacks[i] = np.frombuffer(chunk, dtype="<f4").reshape(3, height, width)
            pos += 4 * cells
            (labels[i],) = struct.unpack_from("<I", data, pos)
            pos += 4
    except struct.error as exc:
        raise DataError(f"{path}: truncated archive") from exc
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes; grid size {height}x{width} is probably wrong")
    return ids, stacks, labels, meta


def features_from_archive(path, manifest: Manifest) -> FeatureSet:
    """Rebuild a FeatureSet from an SSLF archive, taking splits from the manifest."""
    ids, stacks, labels, meta = read_feature_archive(path)
    split_of = {rec.id: rec.split for rec in manifest.records}
    splits = []
    for sid in ids:
        base = sid if sid in split_of else sid.rsplit(":", 1)[0]
        if base not in split_of:
            raise DataError(f"{path}: archive id {sid!r} not in manifest")
        splits.append(split_of[base])
    stats = ChannelStats.from_dict(meta["stats"]) if meta and "stats" in meta else None
    return FeatureSet(ids, stacks, labels, np.asarray(splits), manifest.vocabulary, None, stats)
