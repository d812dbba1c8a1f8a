"""Differentiable array kernels, finite-difference gradient checking, Adam and LU.

Tensors are plain ``torch.Tensor`` objects laid out as ``(batch, channels, time)``;
reverse-mode gradients come from torch autograd.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, GradCheckError, SingularMatrixError

PIVOT_TOL = 1e-12


def as_tensor3(x, dtype=None):
    """Coerce ``x`` to a 3-D float tensor, raising ``DimensionError`` otherwise."""
    t = torch.as_tensor(x, dtype=dtype)
    if t.dim() != 3:
        raise DimensionError(f"expected (batch, channels, time), got shape {tuple(t.shape)}", axis="rank")
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def conv1d(x, weight, bias=None, groups=1):
    """Cross-correlation with 'same' zero padding.

    ``weight`` has shape ``(out_ch, in_ch // groups, width)`` with an odd width.
    """
    if x.dim() != 3:
        raise DimensionError(f"input must be 3-D, got {tuple(x.shape)}", axis="rank")
    if weight.dim() != 3:
        raise DimensionError(f"kernels must be 3-D, got {tuple(weight.shape)}", axis="kernel_rank")
    in_ch = x.shape[1]
    out_ch, k_in, width = weight.shape
    if groups < 1 or in_ch % groups:
        raise DimensionError(f"in_channels={in_ch} not divisible by groups={groups}", axis="groups")
    if out_ch % groups:
        raise DimensionError(f"out_channels={out_ch} not divisible by groups={groups}", axis="groups")
    if k_in * groups != in_ch:
        raise DimensionError(
            f"kernel expects {k_in * groups} input channels, input has {in_ch}", axis="in_channels"
        )
    if width % 2 == 0:
        raise DimensionError(f"kernel width must be odd, got {width}", axis="width")
    if bias is not None and bias.shape != (out_ch,):
        raise DimensionError(f"bias shape {tuple(bias.shape)} != ({out_ch},)", axis="bias")
    return F.conv1d(x, weight, bias, padding=width // 2, groups=groups)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    rel_tol: float
    worst: tuple = ()
    errors: list = field(default_factory=list, repr=False)

    @property
    def passed(self):
        return self.max_rel_error < self.rel_tol


def _pick_coords(numel, n, rng):
    if n is None or n >= numel:
        return np.arange(numel)
    return np.sort(rng.choice(numel, size=n, replace=False))


def grad_check(f, params, rel_tol=1e-4, step=1e-5, coords_per_param=None, seed=0, names=None):
    """Compare autograd gradients of scalar ``f()`` against central differences.

    ``params`` are leaf tensors with ``requires_grad``; ``f`` closes over them.
    ``coords_per_param`` caps how many coordinates of each tensor are probed.
    """
    params = list(params)
    names = names or [f"param{i}" for i in range(len(params))]
    rng = np.random.default_rng(seed)

    out = f()
    if not torch.isfinite(out).all():
        raise GradCheckError(f"f is not finite at the base point ({out.item()})")
    grads = torch.autograd.grad(out, params, allow_unused=True)

    errors = []
    worst = ()
    max_err = 0.0
    with torch.no_grad():
        for name, p, g in zip(names, params, grads):
            g_flat = torch.zeros(p.numel(), dtype=p.dtype) if g is None else g.reshape(-1)
            for i in _pick_coords(p.numel(), coords_per_param, rng):
                at = np.unravel_index(i, p.shape) if p.dim() else ()
                orig = p[at].item()
                p[at] = orig + step
                f_plus = f().item()
                p[at] = orig - step
                f_minus = f().item()
                p[at] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise GradCheckError(f"f not finite when perturbing {name}[{i}]")
                g_fd = (f_plus - f_minus) / (2 * step)
                g_a = g_flat[i].item()
                err = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
                errors.append((name, int(i), g_a, g_fd, err))
                if err >= max_err:
                    max_err = err
                    worst = (name, int(i), g_a, g_fd)
    return GradCheckReport(max_err, len(errors), rel_tol, worst, errors)


def make_adam(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    return torch.optim.Adam(list(params), lr=lr, betas=(beta1, beta2), eps=eps)


def adam_step(optimizer, lr=None):
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    if lr is not None:
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


@dataclass
class LUResult:
    logabsdet: torch.Tensor
    sign: int
    inverse: torch.Tensor


def lu_det_inverse(W, with_inverse=True):
    """LU with partial pivoting; returns log|det W|, its sign and ``W^-1``.

    ``logabsdet`` stays attached to the autograd graph of ``W``.
    """
    W = torch.as_tensor(W)
    if W.dim() != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"matrix must be square, got {tuple(W.shape)}", axis="square")
    if not torch.isfinite(W).all():
        raise ValueError("matrix has non-finite entries")
    LU, piv, _ = torch.linalg.lu_factor_ex(W)
    diag = torch.diagonal(LU)
    mags = diag.detach().abs()
    bad = torch.nonzero(mags < PIVOT_TOL)
    if len(bad):
        k = int(bad[0, 0])
        raise SingularMatrixError(f"pivot {k} has magnitude {mags[k].item():.3e}", pivot_index=k)
    n = W.shape[0]
    swaps = int((piv.cpu() != torch.arange(1, n + 1, dtype=piv.dtype)).sum())
    negative = int((diag.detach() < 0).sum())
    sign = -1 if (swaps + negative) % 2 else 1
    logabsdet = torch.log(diag.abs()).sum()
    inverse = None
    if with_inverse:
        eye = torch.eye(n, dtype=W.dtype, device=W.device)
        inverse = torch.linalg.lu_solve(LU.detach(), piv, eye)
    return LUResult(logabsdet, sign, inverse)
