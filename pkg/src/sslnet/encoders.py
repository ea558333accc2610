"""Branch encoders and the learned-branch embedding providers."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .dsp import AudioClip, SpectralConfig, SpectralStack, mel_filterbank, mel_spectrogram
from .errors import ConfigError, DataError, DimensionError, EmbeddingLookupError
from .tensor import Tensor


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def linear_params(rng, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    return init_uniform(rng, (n_in, n_out), n_in), zeros(n_out)


def linear_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


# ------------------------------------------------------------------ spectral

@dataclass(frozen=True)
class SpectralEncoderSpec:
    in_channels: int = 3
    height: int = 64
    width: int = 64
    widths: tuple[int, ...] = (8, 16, 32)
    out_dim: int = 128

    def __post_init__(self):
        scale = 2 ** len(self.widths)
        if self.height % scale or self.width % scale:
            raise ConfigError(
                f"spectral encoder: {self.height}x{self.width} grid is not divisible by {scale} "
                f"({len(self.widths)} pooling blocks)"
            )
        if self.out_dim < 1 or not self.widths:
            raise ConfigError("spectral encoder needs at least one block and out_dim >= 1")

    def param_count(self) -> int:
        total, prev = 0, self.in_channels
        for width in self.widths:
            total += width * prev * 9 + width
            prev = width
        return total + linear_count(prev, self.out_dim)

    def init(self, rng: np.random.Generator, prefix: str = "spectral") -> dict[str, Tensor]:
        params, prev = {}, self.in_channels
        for i, width in enumerate(self.widths):
            params[f"{prefix}.conv{i}.w"] = init_uniform(rng, (width, prev, 3, 3), prev * 9)
            params[f"{prefix}.conv{i}.b"] = zeros(width)
            prev = width
        params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"] = linear_params(rng, prev, self.out_dim)
        return params

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _as_batch_nhwc(stacks) -> tuple[np.ndarray, bool]:
    if isinstance(stacks, SpectralStack):
        stacks = stacks.channels
    arr = np.asarray(stacks, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"spectral stacks must be (N, 3, H, W), got {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1)), single


def spectral_encode(stacks, params: dict[str, Tensor], spec: SpectralEncoderSpec,
                    prefix: str = "spectral") -> Tensor:
    """f_spe for a batch of (N, 3, H, W) stacks, or one (3, H, W) stack -> (d,)."""
    x, single = _as_batch_nhwc(stacks)
    if x.shape[1:] != (spec.height, spec.width, spec.in_channels):
        raise ConfigError(
            f"spectral encoder expects {spec.in_channels}x{spec.height}x{spec.width} stacks, "
            f"got {x.shape[3]}x{x.shape[1]}x{x.shape[2]}"
        )
    h = Tensor(x)
    for i in range(len(spec.widths)):
        h = T.avg_pool2d(T.relu(T.conv2d(h, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"])))
    h = T.mean(h, (1, 2))
    out = T.linear(h, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    return T.reshape(out, (spec.out_dim,)) if single else out


# ------------------------------------------------------------------ semantic

@dataclass(frozen=True)
class SemanticEncoderSpec:
    d_emb: int = 256
    hidden: int = 128
    out_dim: int = 128

    def param_count(self) -> int:
        return linear_count(self.d_emb, self.hidden) + linear_count(self.hidden, self.out_dim)

    def init(self, rng: np.random.Generator, prefix: str = "semantic") -> dict[str, Tensor]:
        w1, b1 = linear_params(rng, self.d_emb, self.hidden)
        w2, b2 = linear_params(rng, self.hidden, self.out_dim)
        return {f"{prefix}.fc0.w": w1, f"{prefix}.fc0.b": b1, f"{prefix}.fc1.w": w2, f"{prefix}.fc1.b": b2}

    def to_dict(self) -> dict:
        return asdict(self)


def semantic_encode(a_sem, params: dict[str, Tensor], spec: SemanticEncoderSpec,
                    prefix: str = "semantic") -> Tensor:
    """f_sem from (N, d_emb) embeddings, or one (d_emb,) vector -> (d,)."""
    x = a_sem.values if isinstance(a_sem, Tensor) else np.asarray(a_sem, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != spec.d_emb:
        raise ConfigError(f"semantic encoder expects embeddings of length {spec.d_emb}, got shape {x.shape}")
    inp = a_sem if isinstance(a_sem, Tensor) and not single else Tensor(x)
    h = T.relu(T.linear(inp, params[f"{prefix}.fc0.w"], params[f"{prefix}.fc0.b"]))
    out = T.linear(h, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"])
    return T.reshape(out, (spec.out_dim,)) if single else out


# ------------------------------------------------------------------ embedding archives

EMB_MAGIC = b"SSLE"
LABEL_MAGIC = b"LBLS"


def write_embedding_archive(path, ids, vectors, labels=None):
    """Write an SSLE archive; ``labels`` adds a trailing LBLS block of u32 class indices."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise DimensionError(f"need one vector per id, got {vectors.shape} for {len(ids)} ids")
    n, dim = vectors.shape
    parts = [EMB_MAGIC, struct.pack("<HII", 1, dim, n)]
    for sid, vec in zip(ids, vectors):
        raw = sid.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, vec.astype("<f4").tobytes()]
    if labels is not None:
        labels = np.asarray(labels, dtype="<u4")
        if labels.shape != (n,):
            raise DimensionError(f"need one label per record, got {labels.shape} for {n}")
        parts += [LABEL_MAGIC, struct.pack("<I", n), labels.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_embedding_archive(path):
    """Return (ids, vectors float64, labels or None)."""
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != EMB_MAGIC:
        raise DataError(f"{path}: not an SSLE embedding archive")
    version, dim, n = struct.unpack_from("<HII", data, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported SSLE version {version}")
    pos, ids = 14, []
    vectors = np.empty((n, dim))
    try:
        for i in range(n):
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ids.append(data[pos:pos + length].decode("utf-8"))
            pos += length
            chunk = data[pos:pos + 4 * dim]
            if len(chunk) != 4 * dim:
                raise DataError(f"{path}: record {i} has fewer than d_emb={dim} values")
            vectors[i] = np.frombuffer(chunk, dtype="<f4")
            pos += 4 * dim
    except struct.error as exc:
        raise DataError(f"{path}: truncated archive") from exc
    labels = None
    if data[pos:pos + 4] == LABEL_MAGIC:
        (count,) = struct.unpack_from("<I", data, pos + 4)
        labels = np.frombuffer(data[pos + 8:pos + 8 + 4 * count], dtype="<u4").astype(np.int64)
    return ids, vectors, labels


# ------------------------------------------------------------------ providers

class FileEmbeddingProvider:
    """Serves precomputed embeddings (e.g. from an external pretrained model)."""

    kind = "file"

    def __init__(self, path, d_emb: int | None = None):
        self.path = str(path)
        ids, vectors, _ = read_embedding_archive(path)
        if d_emb is not None and vectors.shape[1] != d_emb:
            raise DataError(f"{path}: archive dimension {vectors.shape[1]} does not match d_emb={d_emb}")
        self.d_emb = vectors.shape[1]
        self._table = {sid: vectors[i] for i, sid in enumerate(ids)}

    def provide(self, clip: AudioClip | str) -> np.ndarray:
        sid = clip if isinstance(clip, str) else clip.source_id
        vec = self._table.get(sid)
        if vec is None and ":" in sid:
            # segments of a long recording fall back to the recording's embedding
            vec = self._table.get(sid.rsplit(":", 1)[0])
        if vec is None:
            raise EmbeddingLookupError(f"no embedding for id {sid!r} in {self.path}")
        return vec.copy()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_emb": self.d_emb}


class PseudoEmbeddingProvider:
    """Deterministic stand-in for a pretrained audio backbone.

    Summarises the log-mel spectrogram by per-band mean and standard deviation,
    z-scores each of the two profiles, and applies a fixed seeded Gaussian projection.
    """

    kind = "pseudo"

    def __init__(self, seed: int = 0, d_emb: int = 256, spectral: SpectralConfig | None = None):
        self.seed = int(seed)
        self.d_emb = int(d_emb)
        self.spectral = spectral or SpectralConfig()
        self._bank = mel_filterbank(self.spectral)
        n_in = 2 * self.spectral.n_mels
        rng = T.Rng(self.seed).stream("pseudo-embedder")
        self._projection = rng.standard_normal((n_in, self.d_emb)) / np.sqrt(n_in)

    def provide(self, clip: AudioClip) -> np.ndarray:
        if isinstance(clip, str):
            raise EmbeddingLookupError(f"pseudo provider needs audio, got only the id {clip!r}")
        return self.embed_logmel(mel_spectrogram(clip, self.spectral, self._bank))

    def embed_logmel(self, logmel: np.ndarray) -> np.ndarray:
        # each half is standardized on its own so a flat std profile stays flat
        halves = []
        for part in (logmel.mean(axis=1), logmel.std(axis=1)):
            spread = part.std()
            halves.append((part - part.mean()) / (spread if spread > 0 else 1.0))
        return np.concatenate(halves) @ self._projection

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_emb": self.d_emb, "seed": self.seed}


def provide_embedding(provider, clip) -> np.ndarray:
    vec = np.asarray(provider.provide(clip), dtype=np.float64)
    if vec.shape != (provider.d_emb,) or not np.all(np.isfinite(vec)):
        raise DataError(f"provider returned an invalid embedding of shape {vec.shape}")
    return vec


count_params = T.count_params
