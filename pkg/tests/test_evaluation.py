import math

import numpy as np
import pytest
import torch

from blow import evaluation as ev
from blow.audio import Waveform, write_wav
from blow.corpus import index_from_arrays
from blow.errors import ConfigError, DimensionError
from blow.flow import Blow, FlowConfig

SR = 16000


def tone(freq, seconds=0.5, phase=0.0, amp=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return amp * np.sin(2 * np.pi * freq * t + phase)


def test_feature_length():
    assert ev.mfcc_features(tone(440)).shape == (242,)
    assert ev.mfcc_features(np.random.default_rng(0).standard_normal(300) * 0.1).shape == (242,)


def test_silence_has_zero_spread():
    f = ev.mfcc_features(np.zeros(8000))
    assert np.all(np.isfinite(f))
    assert np.all(f[121:] == 0)
    # every log-mel value sits at the floor, so c0 is sqrt(200) * 10 log10(1e-10)
    assert f[0] == pytest.approx(math.sqrt(200) * -100.0)


def test_tones_distance_ordering():
    a = ev.mfcc_features(tone(440))
    b = ev.mfcc_features(tone(440, phase=1.3))
    c = ev.mfcc_features(tone(3000))
    assert np.linalg.norm(a - c) > 0
    assert np.linalg.norm(a - c) > np.linalg.norm(a - b)


def test_sign_insensitive():
    x = np.random.default_rng(1).standard_normal(4000) * 0.2
    assert np.linalg.norm(ev.mfcc_features(x) - ev.mfcc_features(-x)) < 1e-6


def test_shift_sensitive():
    x = np.random.default_rng(2).standard_normal(4000) * 0.2
    assert np.linalg.norm(ev.mfcc_features(x) - ev.mfcc_features(np.roll(x, 37))) > 1e-6


def test_too_short():
    with pytest.raises(DimensionError):
        ev.mfcc_features(np.zeros(255))


def test_slaney_mel_points():
    assert ev.hz_to_mel(0.0) == 0.0
    assert ev.hz_to_mel(500.0) == pytest.approx(7.5)
    assert ev.hz_to_mel(1000.0) == pytest.approx(15.0)
    assert ev.hz_to_mel(6400.0) == pytest.approx(15.0 + 27.0)
    f = np.array([50.0, 999.0, 1000.0, 4321.0, 8000.0])
    assert np.allclose(ev.mel_to_hz(ev.hz_to_mel(f)), f)


def test_filterbank_shape_and_support():
    fb = ev.mel_filterbank(SR, 2048, 200)
    assert fb.shape == (200, 1025)
    assert np.all(fb >= 0)
    # every filter except possibly the narrowest low ones touches at least one bin
    assert np.count_nonzero(fb.sum(axis=1) > 0) >= 190
    # Slaney normalisation: each triangle has area ~ 2 / bandwidth * bandwidth / 2 = 1 in Hz units
    hz_per_bin = SR / 2048
    areas = fb.sum(axis=1) * hz_per_bin
    assert np.median(areas[100:]) == pytest.approx(1.0, rel=0.05)


def test_orthonormal_dct_matches_matrix():
    from scipy.fft import dct
    x = np.random.default_rng(3).standard_normal(200)
    n = np.arange(200)
    k = n[:, None]
    basis = np.sqrt(2 / 200) * np.cos(np.pi * (2 * n[None, :] + 1) * k / 400)
    basis[0] /= np.sqrt(2)
    assert np.allclose(dct(x, type=2, norm="ortho"), basis @ x)


def test_delta_of_ramp_is_slope():
    feat = np.arange(20, dtype=float)[None, :] * 3.0
    d = ev.delta(feat)
    assert np.allclose(d[0, 2:-2], 3.0)


def blobs(n=200, dim=10, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    centers = rng.standard_normal((3, dim)) * 4
    return centers[y] + rng.standard_normal((n, dim)), y


def test_classifier_separable():
    X, y = blobs()
    Xt, yt = blobs(seed=0)
    clf = ev.SpoofClassifier(seed=0).fit(X, y)
    assert clf.score(Xt, yt) > 0.95
    assert clf.get_params()["dropout"] == 0.4


def test_classifier_deterministic_inference():
    X, y = blobs()
    clf = ev.SpoofClassifier(seed=1).fit(X, y)
    assert np.array_equal(clf.decision_function(X), clf.decision_function(X))
    again = ev.SpoofClassifier(seed=1).fit(X, y)
    assert np.array_equal(clf.decision_function(X), again.decision_function(X))
    p = clf.predict_proba(X)
    assert np.allclose(p.sum(axis=1), 1)
    assert np.array_equal(clf.predict(X), clf.classes_[p.argmax(axis=1)])


def test_classifier_one_class():
    with pytest.raises(ConfigError):
        ev.SpoofClassifier().fit(np.zeros((5, 3)), np.zeros(5))


def test_classifier_zero_std_feature():
    X, y = blobs()
    X[:, 4] = 2.5
    clf = ev.SpoofClassifier().fit(X, y)
    assert clf.std_[4] == 1.0
    assert 4 in clf.degenerate_features_
    assert np.all(np.isfinite(clf.decision_function(X)))


def test_classifier_string_labels():
    X, y = blobs()
    names = np.array(["ann", "bo", "cy"])[y]
    clf = ev.SpoofClassifier().fit(X, names)
    assert set(clf.predict(X)) <= {"ann", "bo", "cy"}


class _Feat:
    def transform(self, paths):
        return np.array([[float(str(p).endswith("b.wav"))] for p in paths])


class _Clf:
    def predict(self, X):
        return X[:, 0].astype(int)


def test_spoofing_two_of_three(tmp_path):
    rows = []
    for name, tgt in [("a.wav", "s0"), ("b.wav", "s1"), ("c.wav", "s1")]:
        write_wav(tmp_path / name, Waveform(np.zeros(300)))
        rows.append(dict(output=str(tmp_path / name), tgt=tgt))
    res = ev.spoofing_rate(_Clf(), rows, ["s0", "s1"], features=_Feat())
    assert res.rate == pytest.approx(66.666, abs=0.01)
    assert (res.n_scored, res.n_fooled) == (3, 2)


def test_spoofing_missing_excluded(tmp_path):
    write_wav(tmp_path / "b.wav", Waveform(np.zeros(300)))
    rows = [dict(output=str(tmp_path / "b.wav"), tgt="s1"), dict(output=str(tmp_path / "gone.wav"), tgt="s0"),
            dict(output="", tgt="s0")]
    res = ev.spoofing_rate(_Clf(), rows, ["s0", "s1"], features=_Feat())
    assert res.rate == 100.0 and res.n_scored == 1 and len(res.missing) == 2


def test_spoofing_real_pipeline(tmp_path):
    X = []
    y = []
    paths = []
    for i in range(30):
        for s, f in enumerate((300.0, 2500.0)):
            x = tone(f * (1 + 0.01 * i), seconds=0.3, phase=i)
            p = tmp_path / f"{s}_{i}.wav"
            write_wav(p, Waveform(x))
            paths.append((p, s))
    feats = ev.MFCCFeatures()
    X = feats.transform([p for p, _ in paths])
    y = np.array([s for _, s in paths])
    clf = ev.SpoofClassifier().fit(X, y)
    rows = [dict(output=str(p), tgt=["lo", "hi"][s]) for p, s in paths]
    assert ev.spoofing_rate(clf, rows, ["lo", "hi"]).rate == 100.0
    wrong = [dict(output=str(p), tgt=["lo", "hi"][1 - s]) for p, s in paths]
    assert ev.spoofing_rate(clf, wrong, ["lo", "hi"]).rate == 0.0


def test_probe_chance_and_range():
    cfg = FlowConfig(n_blocks=2, n_flows_per_block=1, coupling_hidden_channels=8, embedding_dim=4,
                     frame_size=32, n_speakers=4)
    rng = np.random.default_rng(0)
    y = np.arange(80) % 4
    frames = rng.standard_normal((80, 32)) * (1 + y[:, None]) * 0.1
    m = Blow(cfg)
    m.initialize_actnorm(torch.as_tensor(frames[:16], dtype=torch.float32).unsqueeze(1), torch.as_tensor(y[:16]))
    tr = index_from_arrays(frames[:60], y[:60])
    te = index_from_arrays(frames[60:], y[60:], "test")
    res = ev.latent_probe(m, tr, te, max_frames=None)
    assert res.chance == 25.0
    assert 0 <= res.accuracy <= 100
    assert (res.n_train, res.n_test) == (60, 20)


def test_metrics_csv(tmp_path):
    ev.write_metrics(tmp_path / "m.csv", {"L": 3.25, "spoofing": 80.0, "n": 4})
    assert (tmp_path / "m.csv").read_text().splitlines() == ["metric,value", "L,3.250000", "spoofing,80.000000", "n,4"]


def test_feature_cache_round_trip(tmp_path):
    X = np.random.default_rng(0).standard_normal((5, 242))
    y = np.arange(5)
    ev.save_features(tmp_path / "f.bin", X, y)
    X2, y2 = ev.load_features(tmp_path / "f.bin")
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
