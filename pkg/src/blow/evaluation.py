"""Objective evaluation: MFCC summary features, a linear speaker classifier,
the spoofing rate of conversions and a linear identity probe on latents."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.fft import dct
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .audio import SAMPLE_RATE, Waveform, hann_window, read_wav
from .checkpoint import read_container, write_container
from .corpus import FrameIndex, iter_frames
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

N_FEATURES = 242
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sr, n_fft, n_mels, fmin=0.0, fmax=None):
    """Triangular Slaney-normalised filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    mel_f = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2:n_mels + 2] - mel_f[:n_mels]))[:, None]
    return weights


def delta(feat, width=2):
    """Regression deltas over +-``width`` frames along axis 1, edges replicated."""
    padded = np.pad(feat, ((0, 0), (width, width)), mode="edge")
    n = feat.shape[1]
    num = sum(k * (padded[:, width + k:width + k + n] - padded[:, width - k:width - k + n])
              for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def _frames(x, length, hop):
    return np.lib.stride_tricks.sliding_window_view(x, length)[::hop]


def mfcc_features(wav, sr=SAMPLE_RATE, n_mfcc=40, n_mels=200, n_fft=2048, win_length=256, hop=128):
    """242-dim utterance summary: mean and std over frames of 40 MFCCs, their deltas,
    delta-deltas and RMS energy."""
    x = wav.samples if isinstance(wav, Waveform) else np.asarray(wav, dtype=np.float64)
    if len(x) < win_length:
        raise DimensionError(f"utterance of {len(x)} samples is shorter than one {win_length}-sample window",
                             axis="time")
    # centred frames: pad n_fft/2 zeros each side; the window sits in the middle of the FFT buffer
    padded = np.pad(x, n_fft // 2)
    window = np.zeros(n_fft)
    off = (n_fft - win_length) // 2
    window[off:off + win_length] = hann_window(win_length)
    frames = _frames(padded, n_fft, hop)
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = mel_filterbank(sr, n_fft, n_mels) @ power.T
    log_mel = 10.0 * np.log10(np.maximum(mel, LOG_FLOOR))
    mfcc = dct(log_mel, type=2, axis=0, norm="ortho")[:n_mfcc]
    d1 = delta(mfcc)
    d2 = delta(d1)
    rms_frames = _frames(np.pad(x, win_length // 2), win_length, hop)[:mfcc.shape[1]]
    rms = np.sqrt(np.mean(rms_frames ** 2, axis=1))[None, :]
    stacked = np.vstack([mfcc, d1, d2, rms])
    # spread measured about the first frame: same value, exactly zero for constant rows
    return np.concatenate([stacked.mean(axis=1), (stacked - stacked[:, :1]).std(axis=1)])


class MFCCFeatures(BaseEstimator, TransformerMixin):
    """Stateless transformer from waveforms (or paths) to 242-dim summary vectors."""

    def __init__(self, n_mfcc=40, n_mels=200, n_fft=2048, win_length=256, hop=128):
        self.n_mfcc = n_mfcc
        self.n_mels = n_mels
        self.n_fft = n_fft
        self.win_length = win_length
        self.hop = hop

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        rows = []
        for item in X:
            if isinstance(item, (str, Path)):
                item = read_wav(item, strict=False)
            rows.append(mfcc_features(item, n_mfcc=self.n_mfcc, n_mels=self.n_mels, n_fft=self.n_fft,
                                      win_length=self.win_length, hop=self.hop))
        return np.vstack(rows)


class SpoofClassifier(BaseEstimator, ClassifierMixin):
    """z-scored linear classifier with input dropout, trained by Adam with early stopping
    on a validation loss."""

    def __init__(self, dropout=0.4, lr=1e-3, patience=10, max_epochs=1000, batch_size=32,
                 val_fraction=0.1, seed=0):
        self.dropout = dropout
        self.lr = lr
        self.patience = patience
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.seed = seed

    def _standardize(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.std_

    def fit(self, X, y, X_val=None, y_val=None):
        """Fit on (X, y); early-stops on (X_val, y_val) or on a held-out slice of X."""
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("speaker classifier needs at least two speakers")
        rng = np.random.default_rng(self.seed)
        if X_val is None:
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.val_fraction * len(X))))
            val, tr = order[:n_val], order[n_val:]
            X, X_val, y_idx, yv_idx = X[tr], X[val], y_idx[tr], y_idx[val]
        else:
            lookup = {c: i for i, c in enumerate(self.classes_)}
            yv_idx = np.array([lookup[v] for v in y_val])
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.degenerate_features_ = np.flatnonzero(std == 0)
        self.std_ = np.where(std == 0, 1.0, std)
        self.n_features_in_ = X.shape[1]

        gen = torch.Generator().manual_seed(self.seed)
        torch_state = torch.random.get_rng_state()
        torch.manual_seed(self.seed)
        self.linear_ = nn.Linear(X.shape[1], len(self.classes_)).double()
        torch.random.set_rng_state(torch_state)
        xt = torch.as_tensor(self._standardize(X))
        yt = torch.as_tensor(y_idx)
        xv = torch.as_tensor(self._standardize(X_val))
        yv = torch.as_tensor(yv_idx)
        opt = torch.optim.Adam(self.linear_.parameters(), lr=self.lr)
        best, best_state, waited = np.inf, None, 0
        self.n_epochs_ = 0
        for _ in range(self.max_epochs):
            self.n_epochs_ += 1
            perm = torch.randperm(len(xt), generator=gen)
            for lo in range(0, len(xt), self.batch_size):
                sel = perm[lo:lo + self.batch_size]
                keep = (torch.rand(xt[sel].shape, generator=gen, dtype=xt.dtype) >= self.dropout)
                inp = xt[sel] * keep / (1 - self.dropout)
                loss = F.cross_entropy(self.linear_(inp), yt[sel])
                opt.zero_grad()
                loss.backward()
                opt.step()
            with torch.no_grad():
                val_loss = F.cross_entropy(self.linear_(xv), yv).item()
            if val_loss < best:
                best, waited = val_loss, 0
                best_state = {k: v.clone() for k, v in self.linear_.state_dict().items()}
            else:
                waited += 1
                if waited >= self.patience:
                    break
        self.linear_.load_state_dict(best_state)
        self.best_val_loss_ = best
        return self

    @torch.no_grad()
    def decision_function(self, X):
        check_is_fitted(self, "linear_")
        return self.linear_(torch.as_tensor(self._standardize(X))).numpy()

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def split_features(corpus, split, features=None):
    """MFCC features and speaker ids for every utterance in ``split``."""
    features = features or MFCCFeatures()
    utts = corpus.split(split)
    X = features.transform([u.path for u in utts])
    return X, np.array([u.speaker for u in utts])


def train_spoof_classifier(corpus, seed=0, train_split="train", valid_split="valid", **params):
    """Fit the speaker classifier on one split, early-stopping on another."""
    if corpus.n_speakers < 2:
        raise ConfigError("speaker classifier needs at least two speakers")
    X, y = split_features(corpus, train_split)
    Xv, yv = split_features(corpus, valid_split)
    return SpoofClassifier(seed=seed, **params).fit(X, y, Xv, yv)


@dataclass
class SpoofingResult:
    rate: float
    n_scored: int
    n_fooled: int
    missing: list = field(default_factory=list)


def spoofing_rate(classifier, conversions, speakers, features=None):
    """Percentage of converted files classified as their target speaker.

    ``conversions`` are mappings with at least ``output`` and ``tgt`` (speaker name).
    Missing output files are listed and excluded.
    """
    features = features or MFCCFeatures()
    ids = {name: i for i, name in enumerate(speakers)}
    paths, targets, missing = [], [], []
    for row in conversions:
        out = row.get("output")
        if not out or not Path(out).is_file():
            missing.append(out)
            continue
        paths.append(out)
        targets.append(ids[row["tgt"]])
    if missing:
        log.warning("spoofing: %d conversion outputs missing", len(missing))
    if not paths:
        return SpoofingResult(0.0, 0, 0, missing)
    pred = classifier.predict(features.transform(paths))
    fooled = int(np.sum(pred == np.array(targets)))
    return SpoofingResult(100.0 * fooled / len(paths), len(paths), fooled, missing)


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    n_train: int
    n_test: int


def _latents(model, index, max_frames, seed, batch_size=64):
    rng = np.random.default_rng(seed)
    sel = np.sort(rng.permutation(len(index))[:max_frames]) if max_frames else np.arange(len(index))
    sub = FrameIndex(index.corpus, index.split, index.frame_size, index.entries[sel], index._cache)
    dtype = next(model.parameters()).dtype
    zs, ys = [], []
    with torch.no_grad():
        for x, y in iter_frames(sub, batch_size, dtype=dtype):
            z, _ = model(x, y)
            zs.append(z.flatten(1).double().numpy())
            ys.append(y.numpy())
    return np.vstack(zs), np.concatenate(ys)


def latent_probe(model, train_index, test_index, max_frames=2000, seed=0, **params):
    """Train the linear classifier on flattened latents of true-speaker encodings and
    report held-out accuracy against the 1/S chance level."""
    Xtr, ytr = _latents(model, train_index, max_frames, seed)
    Xte, yte = _latents(model, test_index, max_frames, seed + 1)
    clf = SpoofClassifier(seed=seed, **params).fit(Xtr, ytr)
    acc = float(np.mean(clf.predict(Xte) == yte))
    return ProbeResult(100.0 * acc, 100.0 / model.cfg.n_speakers, len(ytr), len(yte))


def write_metrics(path, metrics):
    """``metric,value`` rows in insertion order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, f"{v:.6f}" if isinstance(v, float) else v])


def save_features(path, X, y):
    write_container(path, {"kind": "features"}, {"X": torch.as_tensor(np.asarray(X, dtype=np.float64)),
                                                 "y": torch.as_tensor(np.asarray(y, dtype=np.int64))})


def load_features(path):
    header, tensors = read_container(path)
    return tensors["X"].numpy(), tensors["y"].numpy()
