"""Synthetic bird-call stand-ins: tones, linear chirps and amplitude modulation in noise."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ManifestRecord, write_manifest
from .dsp import write_wav
from .encoders import write_embedding_archive
from .errors import ConfigError
from .tensor import Rng

# (base frequency Hz, chirp rate Hz/s, AM rate Hz); class 0 is a pure 1 kHz tone
DEFAULT_ARCHETYPES = (
    (1000.0, 0.0, 0.0),
    (2000.0, 400.0, 0.0),
    (3000.0, 0.0, 10.0),
    (4500.0, -600.0, 0.0),
    (6000.0, 0.0, 5.0),
    (1500.0, 300.0, 7.0),
    (5200.0, -300.0, 12.0),
    (8000.0, 0.0, 0.0),
)


@dataclass
class SynthSpec:
    n_classes: int = 5
    clips_per_class: int = 200
    archetypes: list = field(default_factory=lambda: [list(a) for a in DEFAULT_ARCHETYPES])
    snr: float = 10.0
    duration: float = 3.0
    seed: int = 0
    sample_rate: int = 22050
    jitter: float = 0.03

    def __post_init__(self):
        if self.n_classes < 1 or self.clips_per_class < 1:
            raise ConfigError("synth: n_classes and clips_per_class must be >= 1")
        if len(self.archetypes) < self.n_classes:
            raise ConfigError(f"synth: {self.n_classes} classes but only {len(self.archetypes)} archetypes")
        used = [tuple(float(v) for v in a) for a in self.archetypes[: self.n_classes]]
        if len(set(used)) != len(used):
            raise ConfigError("synth: archetypes must be pairwise distinct")
        if not self.snr > 0:
            raise ConfigError(f"synth: snr must be positive, got {self.snr}")
        if self.duration <= 0:
            raise ConfigError(f"synth: duration must be positive, got {self.duration}")


def render_call(base_hz: float, chirp: float, am_rate: float, duration: float, sample_rate: int,
                snr: float, rng: np.random.Generator, jitter: float = 0.0) -> np.ndarray:
    """One noisy call; peak amplitude at most 0.9."""
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    f0 = base_hz * (1.0 + jitter * rng.uniform(-1.0, 1.0))
    phase = 2 * np.pi * (f0 * t + 0.5 * chirp * t * t) + rng.uniform(0, 2 * np.pi)
    signal = np.sin(phase)
    if am_rate > 0:
        signal *= 0.5 * (1.0 + np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
    power = np.mean(signal ** 2)
    noisy = signal + rng.standard_normal(t.size) * np.sqrt(power / snr)
    return noisy * (0.9 / np.max(np.abs(noisy)))


def stratified_splits(n: int, rng: np.random.Generator) -> list[str]:
    """70/10/20 train/val/test over a shuffled order."""
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    out = [""] * n
    for slot, i in zip(labels, rng.permutation(n)):
        out[i] = slot
    return out


def generate(spec: SynthSpec, out_dir) -> Path:
    """Write WAV files and ``manifest.csv`` under ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = Rng(spec.seed)
    records = []
    for c in range(spec.n_classes):
        base, chirp, am = (float(v) for v in spec.archetypes[c])
        splits = stratified_splits(spec.clips_per_class, rng.stream(f"split/{c}"))
        for i in range(spec.clips_per_class):
            clip = render_call(base, chirp, am, spec.duration, spec.sample_rate, spec.snr,
                               rng.stream(f"clip/{c}/{i}"), spec.jitter)
            cid = f"c{c}_{i:04d}"
            rel = f"audio/{cid}.wav"
            write_wav(out_dir / rel, clip, spec.sample_rate)
            records.append(ManifestRecord(cid, rel, f"class{c}", splits[i]))
    path = out_dir / "manifest.csv"
    write_manifest(path, records)
    return path


def generate_complementary(out_dir, clips_per_class: int = 100, seed: int = 0, d_emb: int = 256,
                           base_frequencies=(1000.0, 3000.0), am_groups: int = 2, snr: float = 10.0,
                           duration: float = 3.0, sample_rate: int = 22050, embedding_noise: float = 0.3) -> Path:
    """Dataset whose label is (frequency archetype, hidden group).

    The audio carries only the frequency archetype. ``embeddings.ssle`` carries
    only the group, as a per-group prototype vector plus Gaussian noise. The
    audio alone tops out at 1/am_groups accuracy and the embeddings alone at
    1/len(base_frequencies); both together can separate every class.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    prototypes = rng.stream("prototypes").standard_normal((am_groups, d_emb))
    records, ids, vectors = [], [], []
    for f_idx, base in enumerate(base_frequencies):
        for g in range(am_groups):
            label = f"f{f_idx}_g{g}"
            splits = stratified_splits(clips_per_class, rng.stream(f"split/{label}"))
            for i in range(clips_per_class):
                gen = rng.stream(f"clip/{label}/{i}")
                clip = render_call(base, 0.0, 0.0, duration, sample_rate, snr, gen, 0.03)
                cid = f"{label}_{i:04d}"
                rel = f"audio/{cid}.wav"
                write_wav(out_dir / rel, clip, sample_rate)
                records.append(ManifestRecord(cid, rel, label, splits[i]))
                ids.append(cid)
                vectors.append(prototypes[g] + embedding_noise * gen.standard_normal(d_emb))
    write_embedding_archive(out_dir / "embeddings.ssle", ids, np.asarray(vectors))
    path = out_dir / "manifest.csv"
    write_manifest(path, records)
    return path
