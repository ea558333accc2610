import hashlib
import json

import numpy as np
import pytest

from sslnet import data as D
from sslnet.dsp import SpectralConfig, mel_filterbank, mel_spectrogram, load_wav
from sslnet.encoders import PseudoEmbeddingProvider
from sslnet.errors import ConfigError, DataError
from sslnet.synth import SynthSpec, generate, render_call, stratified_splits

SMALL = SpectralConfig(n_fft=256, hop_length=128, n_mels=16, n_mfcc=8, height=16, width=16)


@pytest.fixture(scope="module")
def tiny_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate(SynthSpec(n_classes=3, clips_per_class=10, duration=1.0, seed=5), out)
    return out


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- synth

def test_synth_counts_and_splits(tmp_path):
    path = generate(SynthSpec(n_classes=5, clips_per_class=20, duration=0.2), tmp_path)
    manifest = D.read_manifest(path)
    assert len(manifest.records) == 100
    assert len(list((tmp_path / "audio").glob("*.wav"))) == 100
    splits = [r.split for r in manifest.records]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (70, 10, 20)
    for c in range(5):
        per = [r.split for r in manifest.records if r.label == f"class{c}"]
        assert (per.count("train"), per.count("val"), per.count("test")) == (14, 2, 4)


def test_synth_split_arithmetic_at_200():
    splits = stratified_splits(200, np.random.default_rng(0))
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (140, 20, 40)


def test_synth_is_bitwise_reproducible(tmp_path):
    spec = SynthSpec(n_classes=2, clips_per_class=3, duration=0.3, seed=9)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert digest(f) == digest(tmp_path / "b" / f.relative_to(tmp_path / "a"))


def test_synth_class0_tone_peaks_at_1khz(tiny_set):
    cfg = SpectralConfig()
    bank = mel_filterbank(cfg)
    rec = next(r for r in D.read_manifest(tiny_set / "manifest.csv").records if r.label == "class0")
    mel = mel_spectrogram(load_wav(tiny_set / rec.path), cfg, bank)
    nearest = int(np.argmin(np.abs(bank.center_frequencies - 1000.0)))
    assert np.bincount(np.argmax(mel, axis=0)).argmax() == nearest


def test_synth_validation():
    with pytest.raises(ConfigError):
        SynthSpec(snr=0.0)
    with pytest.raises(ConfigError):
        SynthSpec(n_classes=2, archetypes=[[1000, 0, 0], [1000, 0, 0]])
    with pytest.raises(ConfigError):
        SynthSpec(n_classes=9)


def test_render_call_peak_and_snr():
    rng = np.random.default_rng(0)
    x = render_call(2000.0, 0.0, 0.0, 1.0, 22050, 10.0, rng)
    assert np.max(np.abs(x)) == pytest.approx(0.9)


# ---------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path):
    recs = [D.ManifestRecord("a", "x.wav", "owl", "train"), D.ManifestRecord("b", "y.wav", "finch", "test")]
    D.write_manifest(tmp_path / "m.csv", recs)
    m = D.read_manifest(tmp_path / "m.csv")
    assert m.records == recs
    assert m.vocabulary == ["finch", "owl"]
    assert m.resolve(recs[0]) == tmp_path / "x.wav"


@pytest.mark.parametrize("rows, match", [
    ([("a", "p", "l", "train"), ("a", "p", "l", "test")], "duplicate"),
    ([("a", "p", "l", "train"), ("b", "p", "l", "dev")], "split"),
    ([("a", "p", "l", "train")], "test"),
])
def test_manifest_validation(tmp_path, rows, match):
    with pytest.raises(DataError, match=match):
        D.write_manifest(tmp_path / "m.csv", [D.ManifestRecord(*r) for r in rows])
        D.read_manifest(tmp_path / "m.csv")


def test_manifest_header_required(tmp_path):
    (tmp_path / "m.csv").write_text("id,file,label,split\n")
    with pytest.raises(DataError, match="header"):
        D.read_manifest(tmp_path / "m.csv")


# ---------------------------------------------------------------- extraction

def test_extract_order_and_standardization(tiny_set):
    manifest = D.read_manifest(tiny_set / "manifest.csv")
    feats = D.extract_features(manifest, SMALL)
    assert feats.ids == [r.id for r in manifest.records]
    assert feats.stacks.shape == (30, 3, 16, 16)
    train = feats.stacks[feats.splits == "train"]
    np.testing.assert_allclose(train.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(train.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_extract_with_pseudo_provider_matches_direct_call(tiny_set):
    manifest = D.read_manifest(tiny_set / "manifest.csv")
    prov = PseudoEmbeddingProvider(1, 12, SMALL)
    feats = D.extract_features(manifest, SMALL, prov)
    rec = manifest.records[4]
    from sslnet.dsp import segment
    (piece,) = segment(load_wav(manifest.resolve(rec), rec.id), SMALL)
    direct = np.float32(prov.provide(piece)).astype(np.float64)
    np.testing.assert_array_equal(feats.embeddings[4], direct)


def test_extract_reports_every_bad_record(tmp_path, tiny_set):
    manifest = D.read_manifest(tiny_set / "manifest.csv")
    recs = list(manifest.records)
    recs[0] = D.ManifestRecord(recs[0].id, "missing.wav", recs[0].label, recs[0].split)
    recs[1] = D.ManifestRecord(recs[1].id, "missing2.wav", recs[1].label, recs[1].split)
    with pytest.raises(DataError) as info:
        D.extract_features(D.Manifest(recs, tiny_set), SMALL)
    assert "2 record(s)" in str(info.value)
    assert recs[0].id in str(info.value) and recs[1].id in str(info.value)


def test_extract_rejects_mismatched_rate(tmp_path, tiny_set):
    cfg = SpectralConfig(sample_rate=16000, f_max=8000.0, n_fft=256, hop_length=128, n_mels=16, n_mfcc=8,
                         height=16, width=16)
    with pytest.raises(DataError, match="16000"):
        D.extract_features(D.read_manifest(tiny_set / "manifest.csv"), cfg)


# ---------------------------------------------------------------- SSLF archive

def test_feature_archive_layout(tmp_path):
    stack = np.arange(3 * 2 * 2, dtype=np.float64).reshape(1, 3, 2, 2)
    D.write_feature_archive(tmp_path / "f.sslf", ["id1"], stack, [4])
    raw = (tmp_path / "f.sslf").read_bytes()
    expected = (b"SSLF" + (1).to_bytes(2, "little") + (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
                + b"id1" + stack.astype("<f4").tobytes() + (4).to_bytes(4, "little"))
    assert raw == expected


def test_feature_archive_round_trip(tmp_path, tiny_set):
    manifest = D.read_manifest(tiny_set / "manifest.csv")
    feats = D.extract_features(manifest, SMALL)
    D.write_feature_archive(tmp_path / "f.sslf", feats.ids, feats.stacks, feats.labels,
                            sidecar={"stats": feats.stats.to_dict()})
    back = D.features_from_archive(tmp_path / "f.sslf", manifest)
    assert back.ids == feats.ids
    assert np.array_equal(back.stacks, feats.stacks)
    assert np.array_equal(back.labels, feats.labels)
    assert np.array_equal(back.splits, feats.splits)
    np.testing.assert_array_equal(back.stats.mean, feats.stats.mean)
    meta = json.loads(D.sidecar_path(tmp_path / "f.sslf").read_text())
    assert (meta["height"], meta["width"], meta["n_records"]) == (16, 16, 30)


def test_feature_archive_wrong_grid(tmp_path):
    D.write_feature_archive(tmp_path / "f.sslf", ["a", "b"], np.zeros((2, 3, 4, 4)), [0, 1])
    with pytest.raises(DataError):
        D.read_feature_archive(tmp_path / "f.sslf")
    with pytest.raises(DataError):
        D.read_feature_archive(tmp_path / "f.sslf", 4, 2)
    ids, stacks, labels, _ = D.read_feature_archive(tmp_path / "f.sslf", 4, 4)
    assert ids == ["a", "b"] and labels.tolist() == [0, 1]


def test_feature_archive_not_sslf(tmp_path):
    (tmp_path / "x").write_bytes(b"SSLE\x01\x00")
    with pytest.raises(DataError):
        D.read_feature_archive(tmp_path / "x", 2, 2)
