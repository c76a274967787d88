import json
from pathlib import Path
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_equal
from scipy.io import wavfile

from tbdmnet import features as F
from tbdmnet.features import (
    DatasetManifest,
    FeatureMatrix,
    FeatureSet,
    GenderSidecar,
    Sample,
    extract_features,
    fit_frames,
    inject_gender,
    load_audio,
    load_feature_set,
    mfcc,
    read_features,
    read_gender_sidecar,
    read_manifest,
    write_features,
    write_manifest,
)
from tbdmnet.testing import tone, white_noise, write_wav
from tbdmnet.util import ConfigError, DataError, ExtractionWarning, FrameCountWarning


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(x) for x in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def corpus(tmp_path):
    audio = tmp_path / "audio"
    audio.mkdir()
    rows = []
    for uid, freq, duration, emotion, gender in (
        ("a", 220, 0.5, "happy", "M"),
        ("b", 440, 1.0, "sad", "F"),
        ("c", 880, 2.0, "happy", "F"),
    ):
        write_wav(audio / f"{uid}.wav", tone(freq, duration))
        rows.append((uid, f"audio/{uid}.wav", emotion, f"spk_{uid}", gender))
    manifest = write_csv(tmp_path / "manifest.csv", F.MANIFEST_COLUMNS, rows)
    return tmp_path, manifest


def test_load_audio_silence(tmp_path):
    wavfile.write(str(tmp_path / "s.wav"), 22050, np.zeros(1000, dtype=np.int16))
    samples, rate = load_audio(tmp_path / "s.wav")
    assert rate == 22050
    assert samples.shape == (1000,)
    assert_equal(samples, 0)


def test_load_audio_full_scale(tmp_path):
    square = np.tile(np.array([32767, -32767], dtype=np.int16), 50)
    wavfile.write(str(tmp_path / "q.wav"), 22050, square)
    samples, _ = load_audio(tmp_path / "q.wav")
    assert_allclose(np.abs(samples), 0.99997, atol=1e-5)
    assert samples[0] == 32767 / 32768


def test_load_audio_stereo_and_resample(tmp_path):
    left = (tone(440, 1.0, 44100) * 32767).astype(np.int16)
    stereo = np.stack([left, np.zeros_like(left)], axis=1)
    wavfile.write(str(tmp_path / "st.wav"), 44100, stereo)
    samples, rate = load_audio(tmp_path / "st.wav")
    assert rate == 22050
    assert abs(len(samples) - 22050) <= 1
    assert np.abs(samples).max() == pytest.approx(0.25, abs=0.01)


def test_load_audio_errors(tmp_path):
    with pytest.raises(DataError, match="missing.wav"):
        load_audio(tmp_path / "missing.wav")
    wavfile.write(str(tmp_path / "f.wav"), 22050, np.zeros(10, dtype=np.float32))
    with pytest.raises(DataError, match="16-bit"):
        load_audio(tmp_path / "f.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file")
    with pytest.raises(DataError, match="junk.wav"):
        load_audio(tmp_path / "junk.wav")


def test_mel_scale():
    assert F.hz_to_mel(0) == 0
    assert F.hz_to_mel(1000) == pytest.approx(15.0)
    f = np.array([0.0, 500.0, 1000.0, 4000.0, 11025.0])
    assert_allclose(F.mel_to_hz(F.hz_to_mel(f)), f)


def test_mel_filterbank():
    fb = F.mel_filterbank()
    assert fb.shape == (128, 1025)
    assert not fb.flags.writeable
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)
    assert F.mel_filterbank() is fb


def test_mel_filterbank_librosa():
    librosa = pytest.importorskip("librosa")
    expected = librosa.filters.mel(sr=22050, n_fft=2048, n_mels=128, dtype=np.float64)
    assert_allclose(F.mel_filterbank(), expected, rtol=1e-6, atol=1e-10)


def test_power_to_db():
    assert_allclose(F.power_to_db(np.array([1.0, 10.0, 100.0])), [0, 10, 20])
    assert_allclose(F.power_to_db(np.array([0.0, 1.0]), top_db=None), [-100, 0])
    assert_allclose(F.power_to_db(np.array([1e-12, 1.0])), [-80, 0])


def test_mfcc_frame_count():
    assert mfcc(tone(440, 1.0)).shape == (39, 44)
    assert mfcc(np.zeros(512)).shape == (39, 2)
    assert mfcc(np.zeros(511)).shape == (39, 1)
    assert mfcc(np.ones(100) * 0.1).shape == (39, 1)
    assert mfcc(tone(440, 1.0), n_mfcc=13).shape == (13, 44)


def test_mfcc_silence_is_time_invariant():
    grid = mfcc(np.zeros(22050))
    assert_allclose(grid, np.broadcast_to(grid[:, :1], grid.shape), rtol=0, atol=1e-12)


def test_mfcc_time_shift():
    y = white_noise(1.0, seed=3)
    shift = 2 * 512
    a = mfcc(y)
    b = mfcc(y[shift:])
    assert b.shape == (39, 42)
    # frames whose window lies inside both signals
    interior = np.arange(2, 40)
    assert_allclose(b[:, interior], a[:, interior + 2], rtol=0, atol=1e-6)


def test_mfcc_errors():
    with pytest.raises(ValueError):
        mfcc(np.zeros(0))
    with pytest.raises(ValueError):
        mfcc(np.zeros((2, 100)))


@pytest.mark.parametrize(
    "signal", [tone(440, 1.0), white_noise(1.0, seed=3)], ids=["tone", "noise"]
)
def test_mfcc_librosa(signal):
    librosa = pytest.importorskip("librosa")
    expected = librosa.feature.mfcc(
        y=signal,
        sr=22050,
        n_mfcc=39,
        n_fft=2048,
        hop_length=512,
        n_mels=128,
        pad_mode="reflect",
    )
    got = mfcc(signal)
    assert got.shape == expected.shape
    assert_allclose(got, expected, rtol=0, atol=1e-3)


@pytest.mark.parametrize(
    "row, frames, expected",
    [
        ([1, 2, 3], 5, [0, 1, 2, 3, 0]),
        ([1, 2, 3, 4], 5, [1, 2, 3, 4, 0]),
        ([1, 2, 3, 4, 5, 6], 4, [2, 3, 4, 5]),
        ([1, 2, 3, 4, 5], 2, [2, 3]),
        ([1, 2], 2, [1, 2]),
        ([7], 4, [0, 7, 0, 0]),
    ],
)
def test_fit_frames(row, frames, expected):
    grid = np.array([row, row], dtype=float)
    assert_equal(fit_frames(grid, frames), [expected, expected])


def test_fit_frames_invalid():
    with pytest.raises(ValueError):
        fit_frames(np.zeros((2, 3)), 0)


def test_inject_gender():
    grid = np.random.default_rng(1).normal(size=(39, 5)).astype(np.float32)
    assert inject_gender(grid, "none") is grid

    out = inject_gender(grid, "probabilities", (0.3, 0.7))
    assert out.shape == (41, 5)
    assert out.dtype == np.float32
    assert_equal(out[:39], grid)
    assert_equal(out[39], np.float32(0.3))
    assert_equal(out[40], np.float32(0.7))

    assert_equal(inject_gender(grid, "golden", "F")[39], 1)
    assert_equal(inject_gender(grid, "golden", "m")[39], 0)
    assert_equal(inject_gender(grid, "binary", "M")[39], 0)

    with pytest.raises(DataError):
        inject_gender(grid, "golden", "X")
    with pytest.raises(DataError, match="needs gender"):
        inject_gender(grid, "binary")
    with pytest.raises(ConfigError):
        inject_gender(grid, "soft", 0.5)


def test_gender_code():
    assert F.gender_code("M") == 0
    assert F.gender_code(" f ") == 1
    assert F.gender_code(0.7) == 1
    assert F.gender_code(0.5) == 0


def test_gender_info_for():
    s = Sample("u1", "u1.wav", "happy", "s", "F")
    sidecar = GenderSidecar({"u1": (0.8, 0.2)})
    assert F.gender_info_for("none", s) is None
    assert F.gender_info_for("golden", s) == "F"
    assert F.gender_info_for("binary", s, sidecar) == "M"
    assert F.gender_info_for("probabilities", s, sidecar) == (0.8, 0.2)
    with pytest.raises(ConfigError):
        F.gender_info_for("binary", s)
    with pytest.raises(DataError, match="no golden gender"):
        F.gender_info_for("golden", Sample("u2", "u2.wav", "sad"))
    with pytest.raises(DataError, match="u3"):
        F.gender_info_for("probabilities", Sample("u3", "u3.wav", "sad"), sidecar)


def test_feature_file(tmp_path):
    values = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    path = write_features(tmp_path, FeatureMatrix("utt", values))
    assert path == tmp_path / "utt.tbf"
    raw = path.read_bytes()
    assert raw[:4] == b"TBDM"
    assert len(raw) == 16 + 48
    m = read_features(tmp_path, "utt")
    assert m.utterance_id == "utt"
    assert (m.channels, m.frames) == (3, 4)
    assert_equal(m.values, values)
    assert F.feature_bytes(m.values) == raw
    assert read_features(path).utterance_id == "utt"


def test_feature_file_corrupt(tmp_path):
    raw = F.feature_bytes(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(DataError, match="bad magic"):
        F.parse_feature_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="does not match"):
        F.parse_feature_bytes(raw[:-4])
    with pytest.raises(DataError, match="truncated"):
        F.parse_feature_bytes(raw[:10])
    bad_version = raw[:4] + (2).to_bytes(4, "little") + raw[8:]
    with pytest.raises(DataError, match="version"):
        F.parse_feature_bytes(bad_version)
    with pytest.raises(DataError, match="nothing"):
        read_features(tmp_path / "nothing.tbf")


def test_presets():
    p = F.get_preset("IEMOCAP")
    assert p.frames == 606
    assert p.emotions == ("angry", "happy", "neutral", "sad")
    assert F.get_preset("casia").frames == 172
    assert F.get_preset(None) is None
    assert sorted(F.PRESETS) == ["casia", "emodb", "emovo", "iemocap", "ravdess", "savee"]
    with pytest.raises(ConfigError, match="unknown dataset preset"):
        F.get_preset("timit")


def test_read_manifest(corpus):
    root, path = corpus
    m = read_manifest(path)
    assert len(m) == 3
    assert m.ids == ["a", "b", "c"]
    assert m.label_set == ("happy", "sad")
    assert_equal(m.labels, [0, 1, 0])
    assert m[0].audio_path == root / "audio" / "a.wav"
    assert m[1].gender == "F"
    assert m.by_id()["c"].speaker == "spk_c"


def test_manifest_write_read(tmp_path, corpus):
    _, path = corpus
    m = read_manifest(path)
    write_manifest(tmp_path / "copy.csv", m)
    m2 = read_manifest(tmp_path / "copy.csv")
    assert list(m2) == list(m)


def test_read_manifest_preset(tmp_path):
    rows = [
        ("u1", "x.wav", "Excited", "s1", "M"),
        ("u2", "x.wav", "angry", "s1", "f"),
        ("u3", "x.wav", "frustrated", "s2", ""),
        ("u4", "x.wav", "sad", "s2", "?"),
    ]
    path = write_csv(tmp_path / "m.csv", F.MANIFEST_COLUMNS, rows)
    with pytest.warns(ExtractionWarning, match="dropped 1 rows"):
        m = read_manifest(path, "iemocap")
    assert m.ids == ["u1", "u2", "u4"]
    assert m.label_set == ("angry", "happy", "neutral", "sad")
    assert_equal(m.labels, [1, 0, 3])
    assert [s.gender for s in m] == ["M", "F", "?"]


def test_readme_manifest_example(tmp_path):
    readme = (Path(__file__).parents[1] / "README.rst").read_text(encoding="utf-8")
    lines = [s.strip() for s in readme.splitlines()]
    start = lines.index(",".join(F.MANIFEST_COLUMNS))
    (tmp_path / "m.csv").write_text("\n".join(lines[start : start + 2]) + "\n")
    manifest = read_manifest(tmp_path / "m.csv", preset="ravdess")
    assert len(manifest) == 1
    s = manifest[0]
    assert s.emotion == "angry"
    assert s.gender == "M"
    assert s.audio_path == tmp_path / "audio" / "Actor_01" / "03-01-05-01-01-01-01.wav"


def test_read_manifest_errors(tmp_path):
    path = write_csv(tmp_path / "m.csv", ("utterance_id", "audio_path"), [("a", "a.wav")])
    with pytest.raises(DataError, match="lacks columns"):
        read_manifest(path)
    rows = [("a", "a.wav", "sad", "s", "M"), ("a", "b.wav", "sad", "s", "M")]
    path = write_csv(tmp_path / "d.csv", F.MANIFEST_COLUMNS, rows)
    with pytest.raises(DataError, match="duplicate utterance_id 'a'"):
        read_manifest(path)
    rows = [("a", "a.wav", "sad", "s", "X")]
    path = write_csv(tmp_path / "g.csv", F.MANIFEST_COLUMNS, rows)
    with pytest.raises(DataError, match="g.csv:2"):
        read_manifest(path)
    with pytest.raises(DataError, match="cannot read manifest"):
        read_manifest(tmp_path / "none.csv")


def test_manifest_label_set():
    samples = [Sample("a", "a.wav", "sad"), Sample("b", "b.wav", "angry")]
    assert DatasetManifest(samples).label_set == ("angry", "sad")
    with pytest.raises(DataError, match="not in label set"):
        DatasetManifest(samples, ["sad"])


def test_gender_sidecar(tmp_path):
    rows = [("a", 0.9, 0.1), ("b", 0.5, 0.5), ("c", 0.2, 0.8)]
    path = write_csv(tmp_path / "g.csv", F.GENDER_COLUMNS, rows)
    sc = read_gender_sidecar(path)
    assert len(sc) == 3
    assert "a" in sc
    assert sc["c"] == (0.2, 0.8)
    pm, pf = sc.probabilities(["c", "a"])
    assert_equal(pm, [0.2, 0.9])
    assert_equal(pf, [0.8, 0.1])
    assert_equal(sc.binary(["a", "b", "c"]), ["M", "M", "F"])
    with pytest.raises(DataError, match="lacks 1 utterances"):
        sc.probabilities(["a", "z"])
    with pytest.raises(DataError, match="'z'"):
        sc["z"]


def test_gender_sidecar_errors(tmp_path):
    path = write_csv(tmp_path / "g.csv", F.GENDER_COLUMNS, [("a", 0.6, 0.6)])
    with pytest.raises(DataError, match="summing to 1"):
        read_gender_sidecar(path)
    path = write_csv(tmp_path / "h.csv", F.GENDER_COLUMNS, [("a", "x", 0.6)])
    with pytest.raises(DataError, match="numbers"):
        read_gender_sidecar(path)
    path = write_csv(tmp_path / "i.csv", ("utterance_id", "p_male"), [("a", 1)])
    with pytest.raises(DataError, match="lacks columns"):
        read_gender_sidecar(path)


def test_extract_features(corpus):
    root, path = corpus
    m = read_manifest(path)
    out = root / "features"
    with pytest.warns(FrameCountWarning, match="95th percentile 83"):
        result = extract_features(m, out)
    assert result.ok
    assert result.frames == 83
    assert result.frames_source == "p95"
    assert (result.padded, result.cropped) == (2, 1)
    assert sorted(result.written) == ["a", "b", "c"]
    index = json.loads((out / F.INDEX_FILE).read_text())
    assert index == {"frames": 83, "gender_mode": "none", "channels": 39, "utterances": 3}
    log = json.loads((out / F.LOG_FILE).read_text())
    assert log["failures"] == {}

    b = read_features(out, "b")
    assert b.values.shape == (39, 83)
    expected = fit_frames(mfcc(load_audio(m[1].audio_path)[0]), 83).astype(np.float32)
    assert_equal(b.values, expected)

    data = load_feature_set(m, out)
    assert data.X.shape == (3, 39, 83)
    assert data.X.dtype == np.float32
    assert_equal(data.y, [0, 1, 0])
    assert data.label_set == ("happy", "sad")
    assert data.gender_mode == "none"
    assert list(data.genders) == ["M", "F", "F"]


def test_extract_features_parallel_matches_serial(corpus):
    root, path = corpus
    m = read_manifest(path)
    extract_features(m, root / "serial", frames=50)
    extract_features(m, root / "parallel", frames=50, jobs=3)
    for uid in m.ids:
        a = (root / "serial" / f"{uid}.tbf").read_bytes()
        b = (root / "parallel" / f"{uid}.tbf").read_bytes()
        assert a == b


def test_extract_features_gender_modes(corpus):
    root, path = corpus
    m = read_manifest(path)
    result = extract_features(m, root / "golden", frames=40, gender_mode="golden")
    assert result.channels == 40
    assert_equal(read_features(root / "golden", "a").values[39], 0)
    assert_equal(read_features(root / "golden", "b").values[39], 1)
    data = load_feature_set(m, root / "golden")
    assert data.gender_mode == "golden"
    assert data.n_channels == 40

    sidecar = GenderSidecar({"a": (0.3, 0.7), "b": (0.9, 0.1), "c": (0.5, 0.5)})
    extract_features(m, root / "prob", 40, "probabilities", sidecar)
    v = read_features(root / "prob", "a").values
    assert v.shape == (41, 40)
    assert_equal(v[39], np.float32(0.3))
    assert_equal(v[40], np.float32(0.7))

    extract_features(m, root / "bin", 40, "binary", sidecar)
    assert_equal(read_features(root / "bin", "a").values[39], 1)
    assert_equal(read_features(root / "bin", "c").values[39], 0)

    with pytest.raises(ConfigError, match="requires a gender file"):
        extract_features(m, root / "x", 40, "binary")


def test_extract_features_failures(corpus):
    root, path = corpus
    (root / "audio" / "bad.wav").write_bytes(b"garbage")
    samples = list(read_manifest(path)) + [Sample("bad", root / "audio" / "bad.wav", "sad")]
    m = DatasetManifest(samples)
    with pytest.warns(ExtractionWarning, match="skipped bad"):
        result = extract_features(m, root / "out", frames=30)
    assert not result.ok
    assert list(result.failures) == ["bad"]
    assert sorted(result.written) == ["a", "b", "c"]
    log = json.loads((root / "out" / F.LOG_FILE).read_text())
    assert "bad" in log["failures"]
    with pytest.raises(DataError, match="missing"):
        load_feature_set(m, root / "out")


def test_extract_features_invalid(corpus):
    root, path = corpus
    m = read_manifest(path)
    with pytest.raises(ConfigError):
        extract_features(m, root / "x", frames=0)
    with pytest.raises(ConfigError):
        extract_features(m, root / "x", jobs=0)
    with pytest.raises(ConfigError):
        extract_features(m, root / "x", gender_mode="fuzzy")


def test_feature_set():
    X = np.arange(4 * 2 * 3, dtype=np.float32).reshape(4, 2, 3)
    data = FeatureSet(X, [0, 1, 1, 0], ["a", "b", "c", "d"], ["x", "y"], genders="MFFM")
    assert len(data) == 4
    assert (data.n_channels, data.frames, data.n_classes) == (2, 3, 2)
    sub = data.subset([True, False, True, False])
    assert list(sub.ids) == ["a", "c"]
    assert_equal(sub.X, X[[0, 2]])
    assert list(data.gender_subset("F").ids) == ["b", "c"]
    assert len(data.subset(np.zeros(4, dtype=bool))) == 0
    with pytest.raises(ValueError):
        data.gender_subset("?")
    with pytest.raises(DataError, match="disagree"):
        FeatureSet(X, [0, 1], ["a", "b", "c", "d"], ["x", "y"])
    with pytest.raises(DataError, match=r"\(N, C, F\)"):
        FeatureSet(X[0], [0], ["a"], ["x"])


def test_feature_set_inject_gender():
    X = np.zeros((3, 39, 5), dtype=np.float32)
    data = FeatureSet(X, [0, 1, 0], ["a", "b", "c"], ["x", "y"], genders="MFM")
    golden = data.inject_gender("golden")
    assert golden.gender_mode == "golden"
    assert golden.X.shape == (3, 40, 5)
    assert_equal(golden.X[:, 39, 0], [0, 1, 0])
    sidecar = GenderSidecar({"a": (0.1, 0.9), "b": (0.6, 0.4), "c": (1.0, 0.0)})
    prob = data.inject_gender("probabilities", sidecar)
    assert_allclose(prob.X[:, 39:, 0], [[0.1, 0.9], [0.6, 0.4], [1.0, 0.0]])
    assert data.inject_gender("none") is data
    with pytest.raises(ConfigError, match="already"):
        golden.inject_gender("binary", sidecar)
    empty = data.subset(np.zeros(3, dtype=bool)).inject_gender("probabilities", sidecar)
    assert empty.X.shape == (0, 41, 5)
