"""Synthetic multi-speaker corpus: each "speaker" is a pulse train with its own pitch
plus noise, shaped by its own all-pole resonator bank and gated by a syllable-like
amplitude envelope.

Every speaker reads the same numbered "sentences", written as sidecar transcripts,
so sentence-disjoint splitting behaves like it would on a real read-speech corpus.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import SAMPLE_RATE, Waveform, normalize_peak, write_wav


@dataclass(frozen=True)
class ToySpeaker:
    name: str
    formants: tuple  # (center_hz, bandwidth_hz) pairs
    f0: float = 0.0  # mean pitch of the pulse excitation; 0 means noise only
    harmonic_mix: float = 0.0  # share of pulse vs noise excitation
    floor_db: float = -30.0  # white "breath" noise mixed into voiced segments

    def filter_coefficients(self, sample_rate=SAMPLE_RATE):
        a = np.array([1.0])
        for freq, bw in self.formants:
            r = np.exp(-np.pi * bw / sample_rate)
            theta = 2 * np.pi * freq / sample_rate
            a = np.convolve(a, [1.0, -2 * r * np.cos(theta), r * r])
        return a


_BW = (60.0, 80.0, 100.0)


def _preset(name, centers, f0):
    return ToySpeaker(name, tuple(zip(centers, _BW)), f0=f0, harmonic_mix=0.8, floor_db=-40.0)


DEFAULT_SPEAKERS = (
    _preset("spk_low", (550.0, 1300.0, 2500.0), 110.0),
    _preset("spk_high", (750.0, 1800.0, 3100.0), 210.0),
    _preset("spk_mid", (650.0, 1550.0, 2800.0), 150.0),
    _preset("spk_bright", (850.0, 2100.0, 3500.0), 250.0),
)


def _envelope(n, rng, sample_rate=SAMPLE_RATE):
    """Syllable bursts of 150-450 ms separated by 50-250 ms pauses, with 20 ms ramps."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * sample_rate)
    ramp = int(0.02 * sample_rate)
    while pos < n:
        length = int(rng.uniform(0.15, 0.45) * sample_rate)
        seg = np.full(length, rng.uniform(0.5, 1.0))
        r = min(ramp, length // 2)
        seg[:r] *= np.linspace(0, 1, r, endpoint=False)
        seg[length - r:] *= np.linspace(1, 0, r)
        end = min(n, pos + length)
        env[pos:end] = seg[:end - pos]
        pos = end + int(rng.uniform(0.05, 0.25) * sample_rate)
    return env


def _pulses(n, f0, rng, sample_rate=SAMPLE_RATE):
    """Unit impulses at a slowly wandering pitch around ``f0``."""
    t = np.arange(n) / sample_rate
    pitch = f0 * rng.uniform(0.9, 1.1) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t
                                                          + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(pitch) / sample_rate
    out = np.zeros(n)
    out[1:][np.diff(np.floor(phase)) > 0] = 1.0
    return out


def synth_utterance(speaker, duration, rng, sample_rate=SAMPLE_RATE):
    n = int(duration * sample_rate)
    a = speaker.filter_coefficients(sample_rate)
    warm = 2048
    exc = rng.standard_normal(n + warm)
    if speaker.f0 > 0 and speaker.harmonic_mix > 0:
        p = _pulses(n + warm, speaker.f0, rng, sample_rate)
        exc = speaker.harmonic_mix * p / np.std(p) + (1 - speaker.harmonic_mix) * exc
    voiced = lfilter([1.0], a, exc)[warm:]
    voiced /= np.std(voiced)
    voiced += 10 ** (speaker.floor_db / 20) * rng.standard_normal(n)
    floor = 1e-3 * rng.standard_normal(n)
    return normalize_peak(Waveform(voiced * _envelope(n, rng, sample_rate) + floor, sample_rate))


def make_toy_corpus(root, n_speakers=2, minutes_per_speaker=10.0, utterance_seconds=3.0,
                    seed=0, speakers=None):
    """Write root/<speaker>/<utt>.wav plus a .txt transcript per utterance.

    Returns the list of written wav paths.
    """
    speakers = list(speakers or DEFAULT_SPEAKERS[:n_speakers])
    if len(speakers) < n_speakers:
        raise ValueError(f"only {len(speakers)} toy speaker presets available")
    root = Path(root)
    n_utts = max(1, int(round(minutes_per_speaker * 60 / utterance_seconds)))
    rng = np.random.default_rng(seed)
    paths = []
    for spk in speakers:
        d = root / spk.name
        d.mkdir(parents=True, exist_ok=True)
        for k in range(n_utts):
            wav = synth_utterance(spk, utterance_seconds, rng)
            stem = f"{spk.name}_{k:04d}"
            write_wav(d / f"{stem}.wav", wav)
            (d / f"{stem}.txt").write_text(f"Sentence number {k}.\n")
            paths.append(d / f"{stem}.wav")
    return paths
