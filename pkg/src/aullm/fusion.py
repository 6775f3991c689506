"""Multi-granularity evidence-enhanced fusion projector (MGE-EFP).

Turns the backbone's (f_mid, f_high) pair into a single content token T_v:
Laplacian high-frequency excitation of f_mid, spatial alignment to f_high,
a sigmoid cross-channel gate mixing the two, global pooling and a rectified
projection to the reasoner width.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ShapeError

FUSION_MODES = ("full", "mid_only", "high_only", "linear_proj")


def _check_finite(x, what):
    if not torch.isfinite(x).all():
        raise InputError(f"non-finite values in {what}")


def laplacian(x):
    """5-point spatial Laplacian over the last two dims, replicate padding."""
    p = F.pad(x.reshape(-1, 1, *x.shape[-2:]), (1, 1, 1, 1), mode="replicate").reshape(
        *x.shape[:-2], x.shape[-2] + 2, x.shape[-1] + 2
    )
    centre = p[..., 1:-1, 1:-1]
    return (
        p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:] - 4.0 * centre
    )


def laplacian_enhance(f_mid, gamma):
    _check_finite(f_mid, "f_mid")
    return f_mid + gamma * laplacian(f_mid)


def gated_fuse(f_hf_aligned, f_high, w_g1, w_g2, b_g, gate=None):
    """Return (F_fused, G).

    ``w_g1``/``w_g2`` are C2 x C2 channel-mixing matrices (1x1x1 kernels) and
    ``b_g`` a per-channel bias; tensors are B x C2 x T x H x W. ``gate`` forces
    G to a constant (the mid-only / high-only ablations).
    """
    if f_hf_aligned.shape != f_high.shape:
        raise ShapeError(f"aligned mid features {tuple(f_hf_aligned.shape)} != f_high {tuple(f_high.shape)}")
    if gate is None:
        pre = (
            torch.einsum("oc,bc...->bo...", w_g1, f_hf_aligned)
            + torch.einsum("oc,bc...->bo...", w_g2, f_high)
            + b_g.view(1, -1, *([1] * (f_high.dim() - 2)))
        )
        G = torch.sigmoid(pre)
        return G * f_hf_aligned + (1.0 - G) * f_high, G
    if gate == 1.0:
        return f_hf_aligned, torch.ones_like(f_high)
    if gate == 0.0:
        return f_high, torch.zeros_like(f_high)
    raise ValueError(f"forced gate must be 0 or 1, got {gate}")


def project_content_token(f_fused, w_proj, rectify=True):
    """Global average pool over (T, H, W) then ``pooled @ w_proj``; B x D."""
    _check_finite(f_fused, "f_fused")
    pooled = f_fused.flatten(2).mean(-1)
    t_v = pooled @ w_proj
    return F.relu(t_v) if rectify else t_v


class MGEEFP(nn.Module):
    def __init__(self, c_mid=32, c_high=64, width=64, mode="full", gamma_init=0.1):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init)))
        self.align = nn.Conv3d(c_mid, c_high, kernel_size=1)
        bound = 1.0 / math.sqrt(c_high)
        self.w_g1 = nn.Parameter(torch.empty(c_high, c_high).uniform_(-bound, bound))
        self.w_g2 = nn.Parameter(torch.empty(c_high, c_high).uniform_(-bound, bound))
        self.b_g = nn.Parameter(torch.zeros(c_high))
        self.w_proj = nn.Parameter(torch.empty(c_high, width).uniform_(-bound, bound))

    def align_mid(self, f_hf):
        return self.align(F.avg_pool3d(f_hf, (1, 2, 2)))

    def forward(self, f_mid, f_high):
        """Return (t_v, cache) with t_v: B x D."""
        if self.mode == "linear_proj":
            return project_content_token(f_high, self.w_proj, rectify=False), {}
        f_hf = laplacian_enhance(f_mid, self.gamma)
        f_tilde = self.align_mid(f_hf)
        gate = {"full": None, "mid_only": 1.0, "high_only": 0.0}[self.mode]
        fused, G = gated_fuse(f_tilde, f_high, self.w_g1, self.w_g2, self.b_g, gate=gate)
        return project_content_token(fused, self.w_proj), {"gate": G}
