"""scikit-learn style wrapper around the flow for array-in, array-out use."""
import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .audio import AugmentConfig, Waveform
from .conversion import convert_utterance
from .corpus import index_from_arrays
from .errors import SpeakerLookupError
from .flow import Blow, FlowConfig
from .trainer import TrainConfig, evaluate_nll, train


class BlowConverter(BaseEstimator, TransformerMixin):
    """Fit a flow on labelled frames, then encode, decode, score and convert.

    ``X`` is an array of frames with shape (n, frame_size); ``y`` holds speaker labels
    of any hashable type. ``transform`` maps frames to latents, ``inverse_transform``
    maps latents back, ``score`` returns the mean log-likelihood in nats/dim.
    """

    def __init__(self, n_blocks=8, n_flows_per_block=12, coupling_hidden_channels=512,
                 embedding_dim=128, frame_size=4096, lr=1e-4, batch_size=16, max_epochs=999,
                 patience=10, augment=True, val_fraction=0.1, seed=0, outdir=None):
        self.n_blocks = n_blocks
        self.n_flows_per_block = n_flows_per_block
        self.coupling_hidden_channels = coupling_hidden_channels
        self.embedding_dim = embedding_dim
        self.frame_size = frame_size
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.augment = augment
        self.val_fraction = val_fraction
        self.seed = seed
        self.outdir = outdir

    def _ids(self, y, n):
        y = np.asarray(y)
        if y.ndim == 0:
            y = np.full(n, y.item(), dtype=object)
        lookup = {c: i for i, c in enumerate(self.classes_)}
        try:
            return np.array([lookup[v] for v in y.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise SpeakerLookupError(exc.args[0], [str(c) for c in self.classes_]) from None

    def _frames(self, X):
        X = np.asarray(X, dtype=np.float32)
        return X[None] if X.ndim == 1 else X

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._frames(X)
        self.classes_ = np.unique(np.asarray(y))
        ids = self._ids(y, len(X))
        if X_val is None:
            rng = np.random.default_rng(self.seed)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.val_fraction * len(X))))
            val, tr = order[:n_val], order[n_val:]
            X, X_val, ids, val_ids = X[tr], X[val], ids[tr], ids[val]
        else:
            X_val = self._frames(X_val)
            val_ids = self._ids(y_val, len(X_val))
        names = [str(c) for c in self.classes_]
        cfg = FlowConfig(n_blocks=self.n_blocks, n_flows_per_block=self.n_flows_per_block,
                         coupling_hidden_channels=self.coupling_hidden_channels,
                         embedding_dim=self.embedding_dim, frame_size=self.frame_size,
                         n_speakers=len(self.classes_))
        self.model_ = Blow(cfg, seed=self.seed)
        tcfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.seed)
        aug = AugmentConfig(rng_seed=self.seed) if self.augment else AugmentConfig.disabled(rng_seed=self.seed)
        self.history_ = train(self.model_, index_from_arrays(X, ids, "train", names),
                              index_from_arrays(X_val, val_ids, "valid", names), tcfg, aug,
                              outdir=self.outdir, speakers=names)
        self.model_.eval()
        return self

    def _tensor(self, X):
        return torch.as_tensor(self._frames(X)).unsqueeze(1)

    @torch.no_grad()
    def transform(self, X, y):
        check_is_fitted(self, "model_")
        x = self._tensor(X)
        z, _ = self.model_(x, torch.as_tensor(self._ids(y, len(x))))
        return z.flatten(1).numpy()

    @torch.no_grad()
    def inverse_transform(self, Z, y):
        check_is_fitted(self, "model_")
        Z = np.asarray(Z, dtype=np.float32)
        Z = Z[None] if Z.ndim == 1 else Z
        c, t = self.model_.cfg.block_shapes()[-1]
        z = torch.as_tensor(Z).reshape(len(Z), c, t)
        return self.model_.inverse(z, torch.as_tensor(self._ids(y, len(Z))))[:, 0].numpy()

    def fit_transform(self, X, y, **fit_params):
        return self.fit(X, y, **fit_params).transform(X, y)

    def score(self, X, y):
        """Mean log-likelihood of ``X`` under speakers ``y``, nats/dim (higher is better)."""
        check_is_fitted(self, "model_")
        X = self._frames(X)
        return evaluate_nll(self.model_, index_from_arrays(X, self._ids(y, len(X)), "score"))

    def convert(self, X, source, target):
        """Frame-wise conversion: encode as ``source``, decode as ``target``."""
        return self.inverse_transform(self.transform(X, source), target)

    def convert_waveform(self, wav, source, target):
        """Whole-utterance conversion with overlap-add synthesis."""
        check_is_fitted(self, "model_")
        wav = wav if isinstance(wav, Waveform) else Waveform(wav)
        src, tgt = self._ids([source, target], 2)
        return convert_utterance(self.model_, wav, int(src), int(tgt))
