"""Built-in numerical self checks, runnable from the command line."""
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import numerics
from .audio import overlap_add
from .flow import Blow, FlowConfig, nll_per_dim
from .trainer import AnnealSchedule, TrainState

# max |x - f^-1(f(x))| allowed per dtype
INVERT_TOL = {torch.float64: 1e-8, torch.float32: 1e-4}
JACOBIAN_TOL = {torch.float64: 1e-5, torch.float32: 1e-2}
JACOBIAN_STEP = {torch.float64: 1e-6, torch.float32: 1e-2}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@torch.no_grad()
def randomize(model, x, y, std=0.01, seed=0):
    """Initialise ActNorm from ``x`` if needed, then add N(0, std^2) noise to every
    parameter so that no layer sits at its identity initialisation."""
    if not model.initialized:
        model.initialize_actnorm(x, y)
    g = torch.Generator().manual_seed(seed)
    for p in model.parameters():
        p.add_(std * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return model


def toy_model(cfg, dtype=torch.float64, batch=4, seed=0, std=0.01):
    """A randomly parameterised model plus the batch used to initialise it."""
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.rand(batch, 1, cfg.frame_size, generator=g, dtype=torch.float64) * 2 - 1
    y = torch.randint(0, cfg.n_speakers, (batch,), generator=g)
    model = Blow(cfg, seed=seed).to(dtype)
    randomize(model, x.to(dtype), y, std=std, seed=seed)
    return model, x.to(dtype), y


def fd_jacobian(fn, x, step):
    """Column-wise central-difference Jacobian of fn: R^n -> R^n at flat ``x``."""
    n = x.numel()
    J = torch.empty(n, n, dtype=torch.float64)
    for k in range(n):
        e = torch.zeros_like(x)
        e.view(-1)[k] = step
        J[:, k] = ((fn(x + e) - fn(x - e)).reshape(-1) / (2 * step)).double()
    return J


@torch.no_grad()
def check_invertibility(dtype=torch.float64, eps=1e-6, seed=0):
    cfg = FlowConfig(n_blocks=2, n_flows_per_block=3, coupling_hidden_channels=32,
                     embedding_dim=16, frame_size=64, n_speakers=3, scale_eps=eps)
    model, x, y = toy_model(cfg, dtype, seed=seed)
    z, _ = model(x, y)
    err = (model.inverse(z, y) - x).abs().max().item()
    tol = INVERT_TOL[dtype]
    return SuiteResult("invertibility", err < tol, err, f"max error {err:.3e} (tol {tol:g})")


@torch.no_grad()
def check_jacobian(dtype=torch.float64, eps=1e-6, seed=0, draws=3):
    cfg = FlowConfig(n_blocks=1, n_flows_per_block=2, coupling_hidden_channels=16,
                     embedding_dim=8, frame_size=8, n_speakers=2, scale_eps=eps)
    worst = 0.0
    for d in range(draws):
        model, x, y = toy_model(cfg, dtype, batch=2, seed=seed + d, std=0.1)
        x1, y1 = x[:1], y[:1]
        _, rep = model(x1, y1)
        J = fd_jacobian(lambda v: model(v, y1)[0], x1, JACOBIAN_STEP[dtype])
        oracle = torch.linalg.slogdet(J).logabsdet.item()
        got = rep.logdet_total.item()
        worst = max(worst, abs(got - oracle) / max(abs(oracle), 1e-12))
    tol = JACOBIAN_TOL[dtype]
    return SuiteResult("jacobian", worst < tol, worst, f"worst relative error {worst:.3e} (tol {tol:g})")


def check_gradients(eps=1e-6, seed=0, coords=8):
    """Gradient check always runs in float64; finite differences are meaningless in float32."""
    cfg = FlowConfig(n_blocks=2, n_flows_per_block=2, coupling_hidden_channels=8,
                     embedding_dim=4, frame_size=16, n_speakers=2, scale_eps=eps)
    model, x, y = toy_model(cfg, torch.float64, seed=seed, std=0.1)
    names, params = zip(*model.named_parameters())
    report = numerics.grad_check(lambda: nll_per_dim(model, x, y, check_finite=False), list(params),
                                 rel_tol=1e-4, coords_per_param=coords, seed=seed, names=list(names))
    return SuiteResult("gradients", report.passed, report.max_rel_error,
                       f"{report.n_checked} coordinates, worst relative error {report.max_rel_error:.3e}")


@torch.no_grad()
def check_logdet_bound(dtype=torch.float64, eps=1e-6, seed=0):
    """Saturate every coupling's scale pre-activation; its logdet must stay finite and
    respect the (c/2) * T * log(eps) floor."""
    cfg = FlowConfig(n_blocks=1, n_flows_per_block=1, coupling_hidden_channels=8,
                     embedding_dim=4, frame_size=16, n_speakers=2, scale_eps=eps)
    model, x, y = toy_model(cfg, dtype, seed=seed)
    coupling = model.blocks[0][0].coupling
    coupling.b2[:coupling.half] = -1e4
    h = torch.randn(2, 2 * coupling.half, 8, dtype=dtype, generator=torch.Generator().manual_seed(seed))
    _, ld = coupling(h, model.speaker_embedding(y[:2]))
    floor = coupling.half * h.shape[2] * math.log(eps) if eps > 0 else -math.inf
    ok = bool(torch.isfinite(ld).all()) and bool((ld >= floor - 1e-6 * abs(floor)).all())
    return SuiteResult("logdet_bound", ok, ld.min().item(), f"min logdet {ld.min().item():.4g}, floor {floor:.4g}")


def check_cola(frame_size=512, n=12):
    out = overlap_add([np.ones(frame_size)] * n, normalize=False).samples
    hop = frame_size // 2
    err = float(np.max(np.abs(out[hop:-hop] - 1.0)))
    return SuiteResult("cola", err < 1e-6, err, f"interior deviation {err:.3e}")


def check_schedule(lr=1e-4):
    schedule = AnnealSchedule(patience=10, factor=5.0, max_anneals=3)
    state = TrainState.fresh(lr)
    lrs = [state.current_lr]
    events = []
    for v in [3.0, 2.0, 1.0] + [1.0] * 40:
        state.epoch += 1
        ev = schedule.update(state, v)
        events.append(ev)
        if ev == "anneal":
            lrs.append(state.current_lr)
        if ev == "stop":
            break
    expected = [lr, lr / 5, lr / 25]
    anneal_epochs = [i + 1 for i, e in enumerate(events) if e in ("anneal", "stop")]
    ok = (np.allclose(lrs, expected, rtol=1e-12) and anneal_epochs == [13, 23, 33]
          and state.anneal_count == 3 and state.stopped)
    return SuiteResult("schedule", ok, float(state.anneal_count),
                       f"anneal events at epochs {anneal_epochs}, lr {' -> '.join('%.0e' % v for v in lrs)} -> stop")


def run_selftest(dtype=torch.float64, eps=1e-6, seed=0):
    return [
        check_invertibility(dtype, eps, seed),
        check_jacobian(dtype, eps, seed),
        check_gradients(eps, seed),
        check_logdet_bound(dtype, eps, seed),
        check_cola(),
        check_schedule(),
    ]
