"""Utterance-level forward-backward voice conversion with overlap-add synthesis."""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform, normalize_peak, overlap_add, read_wav, write_wav
from .errors import BlowError, ConversionError, SpeakerLookupError
from .flow import convert_frame

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("input", "src", "tgt", "output")


def synthesis_frames(samples, frame_size):
    """Half-overlapping frames padded with hop zeros at the front and enough at the end
    that every input sample is covered by two windows."""
    hop = frame_size // 2
    n = math.ceil(len(samples) / hop) + 1
    padded = np.zeros((n + 1) * hop)
    padded[hop:hop + len(samples)] = samples
    return np.lib.stride_tricks.sliding_window_view(padded, frame_size)[::hop][:n]


@torch.no_grad()
def convert_utterance(model, wav, y_src, y_tgt, batch_size=64, clip=True):
    """Encode every frame with ``y_src``, decode with ``y_tgt``, overlap-add, peak-normalize.

    With ``clip`` each decoded frame is limited to [-1, 1] and non-finite samples are
    zeroed before synthesis, so one diverging frame cannot dominate the normalization.
    """
    wav = wav if isinstance(wav, Waveform) else Waveform(wav)
    x = normalize_peak(wav).samples
    F = model.cfg.frame_size
    frames = synthesis_frames(x, F)
    dtype = next(model.parameters()).dtype
    out = []
    for lo in range(0, len(frames), batch_size):
        chunk = torch.as_tensor(np.array(frames[lo:lo + batch_size]), dtype=dtype).unsqueeze(1)
        n = chunk.shape[0]
        conv = convert_frame(model, chunk, torch.full((n,), y_src), torch.full((n,), y_tgt))
        out.append(conv[:, 0].double().numpy())
    out = np.concatenate(out)
    name = wav.source_path or "waveform"
    if clip:
        finite = np.isfinite(out).all(axis=1)
        if not finite.any():
            raise ConversionError(f"every decoded frame is non-finite ({name})")
        n_clipped = int(np.count_nonzero(~finite | (np.abs(np.nan_to_num(out)) > 1.0).any(axis=1)))
        if n_clipped:
            log.info("%s: clipped %d of %d decoded frames", name, n_clipped, len(out))
        out = np.clip(np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0), -1.0, 1.0)
    hop = F // 2
    y = overlap_add(list(out), hop, normalize=False).samples[hop:hop + len(x)]
    if not np.all(np.isfinite(y)):
        bad = int(np.count_nonzero(~np.isfinite(y)))
        raise ConversionError(f"{bad} non-finite output samples ({name})")
    return normalize_peak(Waveform(y, wav.sample_rate, wav.source_path))


@dataclass
class ConversionJob:
    input: str
    src: str
    tgt: str
    output: str


@dataclass
class ConversionReport:
    rows: list
    errors: list = field(default_factory=list)

    @property
    def n_ok(self):
        return sum(1 for r in self.rows if r["output"])


def speaker_index(speakers, name):
    try:
        return list(speakers).index(name)
    except ValueError:
        raise SpeakerLookupError(name, speakers) from None


def random_targets(jobs, speakers, seed=0):
    """Replace each job's target with a different speaker drawn uniformly at random."""
    rng = np.random.default_rng(seed)
    out = []
    for job in jobs:
        pool = [s for s in speakers if s != job.src] or list(speakers)
        out.append(ConversionJob(job.input, job.src, pool[rng.integers(len(pool))], job.output))
    return out


def batch_convert(model, speakers, jobs, manifest=None, batch_size=64, clip=True):
    """Run every job; failures are recorded and the run continues.

    Writes ``manifest`` (CSV ``input,src,tgt,output``) with one row per job; failed
    jobs have an empty output field.
    """
    rows, errors = [], []
    for job in jobs:
        row = dict(input=str(job.input), src=job.src, tgt=job.tgt, output="")
        try:
            src = speaker_index(speakers, job.src)
            tgt = speaker_index(speakers, job.tgt)
            wav = read_wav(job.input)
            converted = convert_utterance(model, wav, src, tgt, batch_size, clip)
            Path(job.output).parent.mkdir(parents=True, exist_ok=True)
            write_wav(job.output, converted)
            row["output"] = str(job.output)
        except (BlowError, OSError, KeyError) as exc:
            log.warning("conversion of %s failed: %s", job.input, exc)
            errors.append((str(job.input), str(exc)))
        rows.append(row)
    if manifest:
        write_conversion_manifest(manifest, rows)
    return ConversionReport(rows, errors)


def write_conversion_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in MANIFEST_FIELDS})


def read_conversion_manifest(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
