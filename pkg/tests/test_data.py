import hashlib
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexsep.config import ConfigError, data_preset
from flexsep.data import (
    DegenerateSourceError, FormatError, Manifest, ManifestError, Waveform, build_dataset, gen_speaker, make_sample,
    mix, read_visual, read_wav, speaker_pools, write_visual, write_wav,
)
from flexsep.data.synth import F0_BANDS, VISUAL_DIM, energy, speaker_profile


def snr_db(a, b):
    return 10 * np.log10(energy(a) / energy(b))


def test_gen_speaker_deterministic():
    w1, v1 = gen_speaker(17, 1.0, 8000, utterance_seed=3)
    w2, v2 = gen_speaker(17, 1.0, 8000, utterance_seed=3)
    assert w1.samples.tobytes() == w2.samples.tobytes() and v1.tobytes() == v2.tobytes()
    w3, _ = gen_speaker(17, 1.0, 8000, utterance_seed=4)
    assert not np.array_equal(w1.samples, w3.samples)


def test_gen_speaker_shapes_and_peak():
    w, v = gen_speaker(5, 2.0, 8000)
    assert w.samples.shape == (16000,) and w.sample_rate == 8000
    assert v.shape == (VISUAL_DIM, 50)
    assert np.max(np.abs(w.samples)) <= 1.0


@pytest.mark.parametrize("seed", range(6))
def test_silent_gaps_show_in_visual_envelope(seed):
    w, v = gen_speaker(seed, 2.0, 8000, utterance_seed=seed)
    centres = np.arange(v.shape[1]) * 320 + 160       # frame centres in samples
    silent = np.flatnonzero(v[0] == 0.0)
    assert silent.size > 0
    assert not np.any(w.samples[centres[silent]])
    # every frame centred inside a silent stretch of the waveform reads 0
    quiet = np.convolve(w.samples != 0, np.ones(9), mode="same") == 0
    assert np.all(v[0][quiet[centres]] == 0.0)


def test_identity_code_constant_per_speaker():
    _, a = gen_speaker(9, 1.0, 8000, utterance_seed=1)
    _, b = gen_speaker(9, 1.0, 8000, utterance_seed=2)
    np.testing.assert_array_equal(a[1:5], b[1:5])
    assert np.all(a[1:5] == a[1:5, :1])


def test_f0_in_band():
    for s in range(40):
        p = speaker_profile(s)
        lo, hi = F0_BANDS[p.band]
        assert lo <= p.f0 <= hi


def test_short_duration_rejected():
    with pytest.raises(ValueError, match="0.5"):
        gen_speaker(1, 0.4, 8000)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10.0, 10.0), st.integers(0, 1000))
def test_mix_hits_target_snr(snr, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=400), r.normal(size=400) * 3
    res = mix([a, b], [snr], None)
    assert abs(snr_db(res.sources[0], res.sources[1]) - snr) < 0.01


@pytest.mark.parametrize("snr", [0.0, 10.0])
def test_mix_examples(rng, snr):
    a, b = rng.normal(size=800) * 0.1, rng.normal(size=800)
    res = mix([a, b], [snr])
    assert abs(snr_db(res.sources[0], res.sources[1]) - snr) < 0.01


def test_single_source_identity(rng):
    s = rng.uniform(-0.5, 0.5, size=300)
    res = mix([s], [])
    np.testing.assert_array_equal(res.mixture, s)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.one_of(st.none(), st.floats(0.0, 40.0)))
def test_mixture_identity_and_peak(seed, noise_snr):
    r = np.random.default_rng(seed)
    srcs = [r.normal(size=300) * r.uniform(0.1, 3) for _ in range(3)]
    res = mix(srcs, list(r.uniform(-10, 10, size=2)), noise_snr, rng=r)
    assert np.max(np.abs(res.mixture - (sum(res.sources) + res.noise))) < 1e-6
    assert np.max(np.abs(res.mixture)) <= 0.9 + 1e-12
    assert 0 < res.gain <= 1.0
    if noise_snr is not None:
        assert abs(snr_db(sum(res.sources), res.noise) - noise_snr) < 0.01


def test_zero_energy_source(rng):
    with pytest.raises(DegenerateSourceError):
        mix([rng.normal(size=10), np.zeros(10)], [0.0])


def test_wav_round_trip(tmp_path, rng):
    x = rng.uniform(-1, 1, size=1000)
    write_wav(tmp_path / "a.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768


def test_wav_rejects_stereo(tmp_path):
    with wave.open(str(tmp_path / "s.wav"), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(8000)
        fh.writeframes(b"\0" * 40)
    with pytest.raises(FormatError, match="channels"):
        read_wav(tmp_path / "s.wav")


def test_wav_rejects_8bit_and_garbage(tmp_path):
    with wave.open(str(tmp_path / "b.wav"), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(1)
        fh.setframerate(8000)
        fh.writeframes(b"\x80" * 40)
    with pytest.raises(FormatError, match="width"):
        read_wav(tmp_path / "b.wav")
    (tmp_path / "g.wav").write_bytes(b"not a riff file at all")
    with pytest.raises(FormatError, match="header"):
        read_wav(tmp_path / "g.wav")


def test_visual_round_trip_and_errors(tmp_path, rng):
    frames = rng.normal(size=(8, 13)).astype(np.float32)
    write_visual(tmp_path / "v.avfs", frames, 25)
    back, rate = read_visual(tmp_path / "v.avfs")
    assert rate == 25
    np.testing.assert_array_equal(back, frames)
    blob = (tmp_path / "v.avfs").read_bytes()
    assert blob[:4] == b"AVFS"
    (tmp_path / "t.avfs").write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="payload"):
        read_visual(tmp_path / "t.avfs")
    (tmp_path / "m.avfs").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        read_visual(tmp_path / "m.avfs")


def test_desk_split_sizes():
    cfg = data_preset("desk")
    assert (cfg.n_train, cfg.n_valid, cfg.n_test) == (2000, 200, 200)
    assert (cfg.sample_rate, cfg.duration) == (8000, 2.0)


def test_speaker_pools_disjoint():
    pools = speaker_pools(data_preset("desk"))
    sets = {k: set(v) for k, v in pools.items()}
    assert not sets["train"] & sets["test"]
    assert not sets["train"] & sets["valid"]
    assert not sets["valid"] & sets["test"]


def test_sample_composition():
    cfg = data_preset("tiny")
    pools = speaker_pools(cfg)
    seen = set()
    for i in range(6):
        s, _ = make_sample(cfg, "23mix", "test", i, pools["test"])
        seen.add(s.n_active)
        assert s.n_branches == 3 and len(s.visuals) == 3
        assert len(set(s.speakers)) == 3
        assert all((src is not None) == act for src, act in zip(s.sources, s.active))
        bands = [speaker_profile(int(name[3:])).band for name, a in zip(s.speakers, s.active) if a]
        assert len(set(bands)) == len(bands)
    assert seen == {2, 3}
    two, _ = make_sample(cfg, "2mix", "train", 0, pools["train"])
    three, _ = make_sample(cfg, "3mix", "train", 0, pools["train"])
    assert (two.n_active, two.n_branches) == (2, 3)
    assert (three.n_active, three.n_branches) == (3, 4)


def test_sample_mixture_identity():
    cfg = data_preset("tiny")
    s, _ = make_sample(cfg, "3mix", "valid", 2, speaker_pools(cfg)["valid"])
    total = sum(x for x in s.sources if x is not None) + s.noise
    assert np.max(np.abs(s.mixture - total)) < 1e-6


def test_manifest_files_and_reload(tiny_manifest):
    m = tiny_manifest
    assert set(m.kinds()) == {"2mix", "3mix", "23mix"}
    for kind in m.kinds():
        for split in ("train", "valid", "test"):
            for e in m.entries(kind, split):
                for rel in [e["mixture"], *e["visuals"], *(x for x in e["sources"] if x)]:
                    assert (m.root / rel).exists()
    sample = m.split("2mix", "train")[0]
    total = sum(x for x in sample.sources if x is not None) + sample.noise
    # stored files are 16-bit; each of the summed terms rounds independently
    assert np.max(np.abs(sample.mixture - total)) <= 4 / 32768


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_is_byte_deterministic(tmp_path):
    cfg = data_preset("tiny", n_train=3, n_valid=1, n_test=1, mixes=("2mix",))
    build_dataset(cfg, tmp_path / "a")
    build_dataset(cfg, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_unknown_mix_kind(tmp_path):
    with pytest.raises(ConfigError, match="4mix"):
        build_dataset(data_preset("tiny", mixes=("4mix",)), tmp_path)


def test_manifest_errors(tmp_path, tiny_manifest):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ManifestError, match="JSON"):
        Manifest(tmp_path / "bad.json")
    (tmp_path / "other.json").write_text('{"format": "something-else"}')
    with pytest.raises(ManifestError, match="flexsep-manifest"):
        Manifest(tmp_path / "other.json")
    with pytest.raises(ManifestError, match="no 4mix/train"):
        tiny_manifest.entries("4mix", "train")
