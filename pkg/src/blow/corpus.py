"""Speaker-labelled corpora, sentence-disjoint splits, frame indexing and batching."""
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .audio import augment, frame_signal, is_silent, normalize_peak, read_wav
from .errors import CorpusError, FormatError, SpeakerLookupError, SplitError

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


def sentence_key(text):
    """Lowercase, drop punctuation, collapse whitespace."""
    text = re.sub(r"[^\w\s]", "", text.lower())
    return " ".join(text.split())


def _key_for(path):
    sidecar = Path(path).with_suffix(".txt")
    if sidecar.is_file():
        key = sentence_key(sidecar.read_text(errors="replace"))
        if key:
            return key
    return Path(path).stem


@dataclass
class Utterance:
    path: str
    speaker: int
    sentence_key: str
    split: str = None


@dataclass
class Corpus:
    speakers: list
    utterances: list
    report: list = field(default_factory=list)

    @property
    def n_speakers(self):
        return len(self.speakers)

    def speaker_id(self, name):
        try:
            return self.speakers.index(name)
        except ValueError:
            raise SpeakerLookupError(name, self.speakers) from None

    def split(self, name):
        return [u for u in self.utterances if u.split == name]

    def check_disjoint(self):
        """Raise SplitError if any sentence key lands in two splits."""
        seen = {}
        for u in self.utterances:
            if u.split is None:
                raise SplitError(f"{u.path} has no split assignment")
            other = seen.setdefault(u.sentence_key, u.split)
            if other != u.split:
                raise SplitError(f"sentence {u.sentence_key!r} appears in {other} and {u.split}")


def build_corpus(root, strict=True):
    """Scan root/<speaker>/<utterance>.wav. Unreadable files are reported and skipped."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    report = []
    found = []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav in sorted(spk_dir.glob("*.wav")):
            try:
                read_wav(wav, strict=strict)
            except (FormatError, OSError) as exc:
                report.append(f"skip {wav}: {exc}")
                continue
            found.append((spk_dir.name, wav))
    if not found:
        report.append(f"no valid utterances under {root}")
        raise CorpusError(f"no valid utterances under {root}")
    speakers = sorted({name for name, _ in found})
    ids = {name: i for i, name in enumerate(speakers)}
    utts = [Utterance(str(wav), ids[name], _key_for(wav)) for name, wav in found]
    report.append(f"{len(speakers)} speakers, {len(utts)} utterances, "
                  f"{len({u.sentence_key for u in utts})} distinct sentences")
    for line in report:
        log.info(line)
    return Corpus(speakers, utts, report)


def split_corpus(corpus, val_frac=0.1, test_frac=0.1, seed=0):
    """Assign whole sentence-key groups to train/valid/test."""
    if not (0 < val_frac < 1 and 0 < test_frac < 1 and val_frac + test_frac < 1):
        raise SplitError(f"bad split fractions valid={val_frac}, test={test_frac}")
    keys = sorted({u.sentence_key for u in corpus.utterances})
    if len(keys) < 3:
        raise SplitError(f"need at least 3 distinct sentences to split, have {len(keys)}")
    order = np.random.default_rng(seed).permutation(len(keys))
    n_val = max(1, int(round(val_frac * len(keys))))
    n_test = max(1, int(round(test_frac * len(keys))))
    if n_val + n_test >= len(keys):
        raise SplitError(f"{len(keys)} sentences leave nothing for training")
    assign = {}
    for rank, k in enumerate(order):
        assign[keys[k]] = "valid" if rank < n_val else "test" if rank < n_val + n_test else "train"
    utts = [replace(u, split=assign[u.sentence_key]) for u in corpus.utterances]
    out = Corpus(list(corpus.speakers), utts, list(corpus.report))
    out.check_disjoint()
    return out


def write_manifest(corpus, path):
    """One line per utterance: path<TAB>speaker<TAB>split."""
    with open(path, "w") as fh:
        for u in corpus.utterances:
            fh.write(f"{u.path}\t{corpus.speakers[u.speaker]}\t{u.split}\n")


def read_manifest(path):
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in SPLITS:
                raise FormatError(f"{path}:{n}: expected path<TAB>speaker<TAB>split", field="manifest")
            rows.append(parts)
    if not rows:
        raise CorpusError(f"manifest {path} is empty")
    speakers = sorted({r[1] for r in rows})
    ids = {name: i for i, name in enumerate(speakers)}
    utts = [Utterance(p, ids[s], _key_for(p), split) for p, s, split in rows]
    corpus = Corpus(speakers, utts)
    corpus.check_disjoint()
    return corpus


class FrameIndex:
    """Non-silent frame positions for one split; audio is loaded lazily and cached
    peak-normalized per utterance."""

    def __init__(self, corpus, split, frame_size, entries, cache=None):
        self.corpus = corpus
        self.split = split
        self.frame_size = frame_size
        self.entries = np.asarray(entries, dtype=np.int64).reshape(-1, 2)
        self._cache = {} if cache is None else cache

    def __len__(self):
        return len(self.entries)

    def audio(self, utt):
        if utt not in self._cache:
            wav = normalize_peak(read_wav(self.corpus.utterances[utt].path, strict=False))
            self._cache[utt] = wav.samples.astype(np.float32)
        return self._cache[utt]

    def speaker(self, i):
        return self.corpus.utterances[self.entries[i, 0]].speaker

    def frame(self, i):
        utt, start = self.entries[i]
        return self.audio(utt)[start:start + self.frame_size]

    def speakers(self):
        return np.array([self.corpus.utterances[u].speaker for u in self.entries[:, 0]], dtype=np.int64)


def index_frames(corpus, split, frame_size=4096):
    """Peak-normalize each utterance of ``split``, cut non-overlapping frames, keep non-silent ones."""
    entries = []
    cache = {}
    for i, u in enumerate(corpus.utterances):
        if u.split != split:
            continue
        samples = normalize_peak(read_wav(u.path, strict=False)).samples
        cache[i] = samples.astype(np.float32)
        kept = 0
        for j, frame in enumerate(frame_signal(samples, frame_size, frame_size)):
            if not is_silent(frame):
                entries.append((i, j * frame_size))
                kept += 1
        if not kept:
            log.info("%s: no non-silent frames", u.path)
    return FrameIndex(corpus, split, frame_size, entries, cache)


@dataclass
class Batch:
    x: torch.Tensor
    speakers: torch.Tensor
    epoch_end: bool
    short: bool
    indices: np.ndarray


class BatchSampler:
    """Shuffled passes over a FrameIndex; one pass is one epoch."""

    def __init__(self, index, batch_size, augment_cfg=None, rng=None, dtype=torch.float32):
        if len(index) == 0:
            raise CorpusError(f"frame index for split {index.split!r} is empty")
        self.index = index
        self.batch_size = batch_size
        self.augment_cfg = augment_cfg
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype
        self._order = None
        self._pos = 0

    def _load(self, i):
        utt, start = self.index.entries[i]
        if self.augment_cfg is None:
            return self.index.frame(i)
        return augment(self.index.audio(utt), int(start), self.index.frame_size, self.augment_cfg, self.rng)

    def next_batch(self):
        if self._order is None:
            self._order = self.rng.permutation(len(self.index))
            self._pos = 0
        take = self._order[self._pos:self._pos + self.batch_size]
        self._pos += len(take)
        frames = np.stack([self._load(i) for i in take])
        ids = np.array([self.index.speaker(i) for i in take], dtype=np.int64)
        epoch_end = self._pos >= len(self._order)
        if epoch_end:
            self._order = None
        return Batch(
            torch.as_tensor(frames, dtype=self.dtype).unsqueeze(1),
            torch.as_tensor(ids),
            epoch_end,
            len(take) < self.batch_size,
            take,
        )

    def epoch(self):
        """Yield batches until the current pass over the index is exhausted."""
        while True:
            batch = self.next_batch()
            yield batch
            if batch.epoch_end:
                return


def next_batch(sampler):
    return sampler.next_batch()


def iter_frames(index, batch_size, dtype=torch.float32):
    """Deterministic, un-augmented, in-order batches (for evaluation)."""
    for lo in range(0, len(index), batch_size):
        sel = np.arange(lo, min(lo + batch_size, len(index)))
        frames = np.stack([index.frame(i) for i in sel])
        ids = np.array([index.speaker(i) for i in sel], dtype=np.int64)
        yield torch.as_tensor(frames, dtype=dtype).unsqueeze(1), torch.as_tensor(ids)


def index_from_arrays(frames, speakers, split="train", speaker_names=None):
    """FrameIndex over in-memory frames (n, frame_size); each frame is its own utterance.

    Silent frames are kept: the caller chose them.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ValueError(f"frames must be 2-D (n, frame_size), got shape {frames.shape}")
    speakers = np.asarray(speakers, dtype=np.int64).reshape(-1)
    if len(speakers) != len(frames):
        raise ValueError(f"{len(speakers)} speaker ids for {len(frames)} frames")
    n_spk = int(speakers.max()) + 1 if len(speakers) else 0
    names = list(speaker_names) if speaker_names is not None else [str(i) for i in range(n_spk)]
    utts = [Utterance(f"<frame {i}>", int(s), f"{split}-{i}", split) for i, s in enumerate(speakers)]
    corpus = Corpus(names, utts)
    entries = [(i, 0) for i in range(len(frames))]
    return FrameIndex(corpus, split, frames.shape[1], entries, cache=dict(enumerate(frames)))
