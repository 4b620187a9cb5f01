import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impmoe import synth as S
from impmoe.objectives import Objective

CLEAN = S.SynthConfig(noise=0.0)


def rng():
    return np.random.default_rng(0)


def img_text(**kw):
    base = dict(name="img_text", modalities=("image", "text"), train_count=40, eval_count=10,
                objectives=("SCE", "NCE_pair(image,text)"))
    base.update(kw)
    return S.DatasetSpec(**base)


def test_image_determinism_and_separability():
    lat = S.Latent.zero()
    a = S.gen_image(3, lat, CLEAN, rng()).payload
    np.testing.assert_array_equal(a, S.gen_image(3, lat, CLEAN, np.random.default_rng(9)).payload)
    assert a.shape == (64, 64, 3) and a.dtype == np.float32
    for c in range(1, 16):
        assert np.linalg.norm(a - S.gen_image(c, lat, CLEAN, rng()).payload) > 1.0 or c == 3


def test_image_monte_carlo_mean():
    cfg = S.SynthConfig(noise=0.3)
    lat = S.Latent.zero()
    g = np.random.default_rng(1)
    draws = np.stack([S.gen_image(5, lat, cfg, g).payload for _ in range(100)])
    clean = S.image_pattern(5, lat, cfg)
    dev = np.abs(draws.mean(0) - clean)
    assert dev.max() < 5 * 0.3 / np.sqrt(100)
    assert np.mean(dev < 3 * 0.3 / np.sqrt(100)) > 0.99


def test_video_static_class_and_frame_zero():
    lat = S.Latent.draw(np.random.default_rng(2))
    v = S.gen_video(0, lat, CLEAN, rng()).payload
    assert S.velocity(0) == (0, 0)
    for t in range(1, v.shape[0]):
        np.testing.assert_array_equal(v[t], v[0])
    np.testing.assert_allclose(S.gen_video(7, lat, CLEAN, rng()).payload[0],
                               S.gen_image(7, lat, CLEAN, rng()).payload)


@pytest.mark.parametrize("c", [1, 4, 8, 13])
def test_video_argmax_tracks_velocity(c):
    lat = S.Latent.draw(np.random.default_rng(c))
    v = S.gen_video(c, lat, CLEAN, rng()).payload
    cy, cx = S.bump_center(c, lat, CLEAN)
    vy, vx = S.velocity(c)
    for t in range(v.shape[0]):
        energy = v[t].sum(-1)
        got = np.unravel_index(np.argmax(energy), energy.shape)
        assert got == ((cy + t * vy) % 64, (cx + t * vx) % 64)


def test_spectrogram_band_and_waveform_dft():
    for c in range(16):
        lat = S.Latent.draw(np.random.default_rng(100 + c))
        spec = S.gen_spectrogram(c, lat, CLEAN, rng()).payload
        assert spec.shape == (32, 32)
        assert np.argmax(spec.sum(axis=1)) // 2 == c
        wave = S.gen_waveform(c, lat, CLEAN, rng()).payload
        assert np.argmax(np.abs(np.fft.rfft(wave))) == CLEAN._wave_bin(c)


def test_invalid_class_and_config():
    with pytest.raises(ValueError):
        S.gen_image(16, S.Latent.zero(), CLEAN, rng())
    with pytest.raises(ValueError):
        S.gen_caption(-1, CLEAN)
    with pytest.raises(ValueError):
        S.SynthConfig(num_classes=20, spec_size=32)
    with pytest.raises(ValueError):
        S.SynthConfig(wave_len=256)


def test_caption_round_trip():
    reg = S.Registry([img_text()])
    caps = {tuple(S.gen_caption(c, CLEAN)) for c in range(16)}
    assert len(caps) == 16
    for c in range(16):
        assert reg.decode_caption("img_text", S.gen_caption(c, CLEAN)) == c


def test_example_purity_and_shared_class():
    spec = S.DatasetSpec("av", ("video", "spectrogram", "waveform", "text"), 10, 4,
                         objectives=("NCE_triplet(video,waveform,text)",),
                         synth=S.SynthConfig(video_frames=8))
    a, b = S.generate(spec, "train", 3), S.generate(spec, "train", 3)
    for m in spec.modalities:
        np.testing.assert_array_equal(a.samples[m].payload, b.samples[m].payload)
    assert np.argmax(a.samples["spectrogram"].payload.sum(1)) // 2 == a.label
    assert S.Registry([spec]).decode_caption("av", a.caption) == a.label
    other = S.generate(S.DatasetSpec("av2", spec.modalities, 10, 4, synth=spec.synth), "train", 3)
    assert not np.array_equal(other.samples["waveform"].payload, a.samples["waveform"].payload)


def test_split_disjointness():
    spec = img_text()
    train = {S.generate(spec, "train", i).index for i in range(spec.train_count)}
    evals = {S.generate(spec, "eval", i).index for i in range(spec.eval_count)}
    assert not train & evals and len(train) == 40 and len(evals) == 10
    with pytest.raises(IndexError):
        S.generate(spec, "eval", 10)
    with pytest.raises(ValueError):
        spec.split_range("test")


def test_classes_roughly_uniform():
    spec = img_text(train_count=3200)
    counts = np.bincount([S.example_class(spec, i) for i in range(3200)], minlength=16)
    assert counts.min() > 140 and counts.max() < 260


def test_linear_separability_of_clean_images():
    cfg = S.SynthConfig(noise=0.0)
    g = np.random.default_rng(0)
    feats, labels = [], []
    for c in range(16):
        for _ in range(5):
            img = S.gen_image(c, S.Latent.draw(g), cfg, g).payload
            feats.append(img.reshape(8, 8, 8, 8, 3).mean(axis=(1, 3)).reshape(-1))
            labels.append(c)
    X, y = np.asarray(feats), np.asarray(labels)
    # nearest class mean is a linear rule; perfect accuracy certifies separability
    means = np.stack([X[y == c].mean(0) for c in range(16)])
    pred = np.argmin(((X[:, None] - means[None]) ** 2).sum(-1), axis=1)
    assert (pred == y).all()


# ---------------------------------------------------------------------------
# shards

def test_shard_round_trip(tmp_path):
    spec = S.DatasetSpec("mix", ("image", "waveform", "text"), 100, 0,
                         synth=S.SynthConfig(image_size=32, wave_len=2048))
    exs = [S.generate(spec, "train", i) for i in range(100)]
    path = tmp_path / "a" / "mix.shard"
    assert S.write_shard(exs, path) == 100
    back = S.read_shard(path)
    assert len(back) == 100
    for e, r in zip(exs, back):
        assert (e.index, e.label) == (r.index, r.label)
        for m in spec.modalities:
            assert e.samples[m].payload.dtype == r.samples[m].payload.dtype
            np.testing.assert_array_equal(e.samples[m].payload, r.samples[m].payload)


def test_empty_shard(tmp_path):
    S.write_shard([], tmp_path / "e.shard")
    assert S.read_shard(tmp_path / "e.shard") == []


def test_corruption_and_truncation(tmp_path):
    spec = img_text()
    path = tmp_path / "s.shard"
    S.write_shard([S.generate(spec, "train", i) for i in range(3)], path)
    raw = bytearray(path.read_bytes())
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0x01
    (tmp_path / "f.shard").write_bytes(bytes(flipped))
    with pytest.raises(S.ShardError, match="checksum"):
        S.read_shard(tmp_path / "f.shard")
    (tmp_path / "t.shard").write_bytes(bytes(raw[:-7]))
    with pytest.raises(S.ShardError, match="truncated"):
        S.read_shard(tmp_path / "t.shard")
    bad = bytearray(raw)
    bad[8:12] = struct.pack("<I", 99)
    (tmp_path / "v.shard").write_bytes(bytes(bad))
    with pytest.raises(S.ShardError, match="version"):
        S.read_shard(tmp_path / "v.shard")


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["image", "spectrogram", "waveform"]),
                          st.integers(0, 15)), max_size=5))
def test_shard_round_trip_property(tmp_path_factory, items):
    cfg = S.SynthConfig(image_size=16, wave_len=2048)
    g = np.random.default_rng(len(items))
    exs = [S.SynthExample(i, c, {m: S.GENERATORS[m](c, S.Latent.zero(), cfg, g)})
           for i, (m, c) in enumerate(items)]
    path = tmp_path_factory.mktemp("p") / "x.shard"
    S.write_shard(exs, path)
    for e, r in zip(exs, S.read_shard(path)):
        (m,) = e.samples
        np.testing.assert_array_equal(e.samples[m].payload, r.samples[m].payload)


# ---------------------------------------------------------------------------
# registry

def test_registry_lookup_and_counts(tmp_path):
    reg = S.Registry([img_text(), S.DatasetSpec("aud", ("spectrogram",), 7, 0, ("SCE",))])
    with pytest.raises(KeyError, match="img_text"):
        reg.lookup("nope")
    spec = reg.lookup("img_text")
    path = S.materialize(spec, tmp_path)
    assert len(S.read_shard(path)) == spec.example_count == 40
    with pytest.raises(ValueError):
        reg.register(img_text())


def test_image_text_dataset_rejects_triplet():
    spec = img_text()
    assert "waveform" not in spec.modalities
    with pytest.raises(ValueError, match="absent"):
        spec.validate_objective(Objective.parse("NCE_triplet(video,waveform,text)"))
    with pytest.raises(ValueError):
        img_text(objectives=("NCE_triplet(image,waveform,text)",))


def test_generate_batch_shapes():
    b = S.generate_batch(img_text(), "train", range(4))
    assert b["image"].shape == (4, 64, 64, 3) and b["text"].shape == (4, 5)
    assert b["label"].shape == (4,)
