"""Single-scale hyperconditioned normalizing flow over raw audio frames.

Each block squeezes time into channels and runs a stack of flow steps
(channel mixer -> ActNorm -> affine coupling). Every coupling network reads the
same speaker embedding row through its own linear adapter, which emits the
depthwise kernels of the coupling's first convolution.
"""
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .errors import ConfigError, DimensionError, NonFiniteLossError, StateError

LOG_2PI = math.log(2 * math.pi)
ACTNORM_EPS = 1e-6
DEGENERATE_SCALE = 1e-12


@dataclass
class FlowConfig:
    n_blocks: int = 8
    n_flows_per_block: int = 12
    squeeze_factor: int = 2
    coupling_hidden_channels: int = 512
    embedding_dim: int = 128
    frame_size: int = 4096
    n_speakers: int = 2
    scale_eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_blocks", "n_flows_per_block", "coupling_hidden_channels",
                     "embedding_dim", "frame_size", "n_speakers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.squeeze_factor < 2 or self.squeeze_factor % 2:
            raise ConfigError(f"squeeze_factor must be an even integer >= 2, got {self.squeeze_factor}")
        total = self.squeeze_factor ** self.n_blocks
        if self.frame_size % total:
            raise ConfigError(
                f"frame_size {self.frame_size} not divisible by squeeze_factor**n_blocks = {total}"
            )
        if self.scale_eps < 0:
            raise ConfigError("scale_eps must be >= 0")

    def block_shapes(self):
        """(channels, time) seen by the flow steps of each block."""
        c, t = 1, self.frame_size
        shapes = []
        for _ in range(self.n_blocks):
            c, t = c * self.squeeze_factor, t // self.squeeze_factor
            shapes.append((c, t))
        return shapes

    def to_dict(self):
        return asdict(self)


def squeeze(x, factor=2):
    """(B, C, T) -> (B, fC, T/f) with out[b, f*i + k, t] = x[b, i, f*t + k]."""
    B, C, T = x.shape
    if T % factor:
        raise DimensionError(f"time length {T} not divisible by squeeze factor {factor}", axis="time")
    return x.reshape(B, C, T // factor, factor).permute(0, 1, 3, 2).reshape(B, C * factor, T // factor)


def unsqueeze(x, factor=2):
    B, C, T = x.shape
    if C % factor:
        raise DimensionError(f"channels {C} not divisible by squeeze factor {factor}", axis="channels")
    return x.reshape(B, C // factor, factor, T).permute(0, 1, 3, 2).reshape(B, C // factor, T * factor)


def gaussian_logp(z):
    """Standard normal log-density summed over all but the batch axis."""
    return -0.5 * (z.pow(2) + LOG_2PI).flatten(1).sum(1)


class ActNorm(nn.Module):
    """h' = scale * (h + bias) per channel, with data-dependent initialization."""

    def __init__(self, channels):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("initialized", torch.tensor(False))
        self.degenerate_channels = []

    @torch.no_grad()
    def initialize(self, h):
        if bool(self.initialized):
            raise StateError("ActNorm already initialized")
        mean = h.mean(dim=(0, 2))
        std = h.std(dim=(0, 2), unbiased=False)
        self.bias.copy_(-mean)
        self.scale.copy_(1.0 / (std + ACTNORM_EPS))
        self.degenerate_channels = torch.nonzero(std < ACTNORM_EPS).flatten().tolist()
        self.initialized.fill_(True)

    def _check(self):
        if not bool(self.initialized):
            raise StateError("ActNorm used before initialization")
        if (self.scale.detach().abs() < DEGENERATE_SCALE).any():
            raise StateError("ActNorm scale collapsed below 1e-12")

    def forward(self, h):
        self._check()
        out = self.scale[None, :, None] * (h + self.bias[None, :, None])
        logdet = h.shape[2] * torch.log(self.scale.abs()).sum()
        return out, logdet.expand(h.shape[0])

    def inverse(self, h):
        self._check()
        return h / self.scale[None, :, None] - self.bias[None, :, None]


class ChannelMixer(nn.Module):
    """Dense invertible c x c matrix applied at every time step."""

    def __init__(self, channels, generator=None):
        super().__init__()
        q, _ = torch.linalg.qr(torch.randn(channels, channels, generator=generator))
        self.weight = nn.Parameter(q.contiguous())
        self._inv_cache = None

    def forward(self, h):
        lu = numerics.lu_det_inverse(self.weight, with_inverse=False)
        out = torch.einsum("ij,bjt->bit", self.weight, h)
        return out, (h.shape[2] * lu.logabsdet).expand(h.shape[0])

    def inverse_weight(self):
        w = self.weight
        key = (w._version, w.data_ptr(), w.dtype)
        if self._inv_cache is None or self._inv_cache[0] != key:
            with torch.no_grad():
                # factor in float64 so the cached inverse is accurate to the storage dtype
                inv = numerics.lu_det_inverse(w.detach().double()).inverse.to(w.dtype)
            self._inv_cache = (key, inv)
        return self._inv_cache[1]

    def inverse(self, h):
        return torch.einsum("ij,bjt->bit", self.inverse_weight(), h)


class HyperAdapter(nn.Module):
    """Linear map from a speaker embedding to depthwise width-3 kernels and biases."""

    width = 3

    def __init__(self, embedding_dim, channels):
        super().__init__()
        self.channels = channels
        self.linear = nn.Linear(embedding_dim, channels * (self.width + 1))

    def forward(self, e):
        if e.shape[-1] != self.linear.in_features:
            raise DimensionError(
                f"embedding dim {e.shape[-1]} != adapter input {self.linear.in_features}", axis="embedding"
            )
        out = self.linear(e)
        B, c = e.shape[0], self.channels
        kernels = out[:, :c * self.width].reshape(B, c, self.width)
        biases = out[:, c * self.width:]
        return kernels, biases


def hyper_kernels(adapter, e_y):
    """Per-example depthwise kernels (B, c, 3) and biases (B, c) for embedding rows ``e_y``."""
    return adapter(e_y)


def hyperconv(h, kernels, biases):
    """Depthwise convolution with a different kernel set per batch element."""
    B, c, T = h.shape
    out = numerics.conv1d(
        h.reshape(1, B * c, T),
        kernels.reshape(B * c, 1, kernels.shape[-1]),
        biases.reshape(B * c),
        groups=B * c,
    )
    return out.reshape(B, c, T)


class Coupling(nn.Module):
    """Affine coupling whose first layer is a speaker-conditioned hyperconvolution."""

    def __init__(self, channels, hidden, embedding_dim, eps):
        super().__init__()
        if channels % 2:
            raise DimensionError(f"coupling needs an even channel count, got {channels}", axis="channels")
        half = channels // 2
        self.half = half
        self.eps = eps
        self.adapter = HyperAdapter(embedding_dim, half)
        pointwise = nn.Conv1d(half, hidden, 1)
        self.w1 = nn.Parameter(pointwise.weight.detach().clone())
        self.b1 = nn.Parameter(pointwise.bias.detach().clone())
        self.w2 = nn.Parameter(torch.zeros(channels, hidden, 3))
        self.b2 = nn.Parameter(torch.zeros(channels))

    def scale_shift(self, h1, e):
        kernels, biases = self.adapter(e)
        a = F.relu(hyperconv(h1, kernels, biases))
        a = F.relu(numerics.conv1d(a, self.w1, self.b1))
        st = numerics.conv1d(a, self.w2, self.b2)
        s, t = st[:, :self.half], st[:, self.half:]
        return torch.sigmoid(s + 2.0) + self.eps, t

    def forward(self, h, e):
        h1, h2 = h[:, :self.half], h[:, self.half:]
        s, t = self.scale_shift(h1, e)
        out = torch.cat([h1, s * (h2 + t)], dim=1)
        return out, torch.log(s).flatten(1).sum(1)

    def inverse(self, h, e):
        h1, h2 = h[:, :self.half], h[:, self.half:]
        s, t = self.scale_shift(h1, e)
        return torch.cat([h1, h2 / s - t], dim=1)


class FlowStep(nn.Module):
    def __init__(self, channels, cfg, generator=None):
        super().__init__()
        self.mixer = ChannelMixer(channels, generator)
        self.actnorm = ActNorm(channels)
        self.coupling = Coupling(channels, cfg.coupling_hidden_channels, cfg.embedding_dim, cfg.scale_eps)

    def forward(self, h, e, init=False, record=None):
        h, ld_mix = self.mixer(h)
        if init and not bool(self.actnorm.initialized):
            self.actnorm.initialize(h)
        h, ld_act = self.actnorm(h)
        h, ld_cpl = self.coupling(h, e)
        if record is not None:
            record.extend([ld_mix, ld_act, ld_cpl])
        return h, ld_mix + ld_act + ld_cpl

    def inverse(self, h, e):
        h = self.coupling.inverse(h, e)
        h = self.actnorm.inverse(h)
        return self.mixer.inverse(h)


@dataclass
class LikelihoodReport:
    logp_prior: torch.Tensor
    logdet_total: torch.Tensor
    per_dim: torch.Tensor
    dim: int
    layer_logdets: dict = field(default_factory=dict, repr=False)


class Blow(nn.Module):
    """The full flow: speaker table plus ``n_blocks`` x ``n_flows_per_block`` steps."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embedding = nn.Embedding(cfg.n_speakers, cfg.embedding_dim)
            self.blocks = nn.ModuleList(
                nn.ModuleList(FlowStep(c, cfg, gen) for _ in range(cfg.n_flows_per_block))
                for c, _ in cfg.block_shapes()
            )

    @property
    def initialized(self):
        return all(bool(step.actnorm.initialized) for block in self.blocks for step in block)

    def speaker_embedding(self, y):
        y = torch.as_tensor(y, dtype=torch.long, device=self.embedding.weight.device).reshape(-1)
        if (y < 0).any() or (y >= self.cfg.n_speakers).any():
            raise IndexError(f"speaker ids must lie in [0, {self.cfg.n_speakers}), got {y.tolist()}")
        return self.embedding(y)

    def _check_input(self, x):
        if x.dim() != 3 or x.shape[1] != 1 or x.shape[2] != self.cfg.frame_size:
            raise DimensionError(
                f"expected input (B, 1, {self.cfg.frame_size}), got {tuple(x.shape)}", axis="time"
            )

    def _embed(self, x, y):
        e = self.speaker_embedding(y)
        if e.shape[0] == 1 and x.shape[0] > 1:
            e = e.expand(x.shape[0], -1)
        if e.shape[0] != x.shape[0]:
            raise DimensionError(f"{e.shape[0]} speaker ids for batch of {x.shape[0]}", axis="batch")
        return e

    def forward(self, x, y, record_layers=False):
        """x -> (z, LikelihoodReport); logdets are accumulated per layer."""
        self._check_input(x)
        if not self.initialized:
            raise StateError("ActNorm layers are not initialized; call initialize_actnorm first")
        return self._run_forward(x, self._embed(x, y), init=False, record_layers=record_layers)

    def _run_forward(self, x, e, init, record_layers=False):
        h = x
        logdet = x.new_zeros(x.shape[0])
        layers = {}
        for b, block in enumerate(self.blocks):
            h = squeeze(h, self.cfg.squeeze_factor)
            for i, step in enumerate(block):
                rec = [] if record_layers else None
                h, ld = step(h, e, init=init, record=rec)
                logdet = logdet + ld
                if rec is not None:
                    for name, v in zip(("mixer", "actnorm", "coupling"), rec):
                        layers[f"block{b}.step{i}.{name}"] = v.detach()
        logp = gaussian_logp(h)
        dim = x[0].numel()
        return h, LikelihoodReport(logp, logdet, (logp + logdet) / dim, dim, layers)

    @torch.no_grad()
    def initialize_actnorm(self, x, y):
        """Data-dependent ActNorm init, layer by layer, propagating the batch through
        already-initialized layers."""
        self._check_input(x)
        if self.initialized:
            raise StateError("ActNorm layers already initialized")
        self._run_forward(x, self._embed(x, y), init=True)

    def inverse(self, z, y):
        if not self.initialized:
            raise StateError("ActNorm layers are not initialized")
        e = self._embed(z, y)
        h = z
        for block in reversed(self.blocks):
            for step in reversed(block):
                h = step.inverse(h, e)
            h = unsqueeze(h, self.cfg.squeeze_factor)
        return h


def flow_forward(model, x, y):
    return model(x, y)


def flow_inverse(model, z, y):
    return model.inverse(z, y)


def convert_frame(model, x, y_src, y_tgt):
    """Encode with the source speaker, decode with the target speaker."""
    z, _ = model(x, y_src)
    return model.inverse(z, y_tgt)


def nll_per_dim(model, x, y, check_finite=True):
    """Negative mean log-likelihood in nats per dimension."""
    _, report = model(x, y)
    loss = -report.per_dim.mean()
    if check_finite and not torch.isfinite(loss):
        with torch.no_grad():
            _, dump = model(x, y, record_layers=True)
        raise NonFiniteLossError("non-finite loss", {k: v.tolist() for k, v in dump.layer_logdets.items()})
    return loss
