"""Loss terms: multi-label BCE, Bernoulli KL, counterfactual consistency, total."""

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError

EPS = 1e-7
TARGET_MODES = ("sample", "all")


@dataclass
class CcrConfig:
    lambda_inv: float = 1.0
    lambda_delta: float = 0.01
    lambda_ccr: float = 0.1
    target_mode: str = "sample"

    def validate(self):
        for name in ("lambda_inv", "lambda_delta", "lambda_ccr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"ccr.{name} must be >= 0")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"ccr.target_mode must be one of {TARGET_MODES}")


def _clamp(p):
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.to(torch.get_default_dtype())
    return p.clamp(EPS, 1 - EPS)


def bce_loss(y_hat, y):
    """Mean binary cross-entropy over every entry (AUs and batch)."""
    y_hat = _clamp(y_hat)
    y = torch.as_tensor(y, dtype=y_hat.dtype)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {tuple(y_hat.shape)} != target shape {tuple(y.shape)}")
    return -(y * torch.log(y_hat) + (1 - y) * torch.log1p(-y_hat)).mean()


def bernoulli_kl(p, q):
    """Elementwise KL(Bernoulli(p) || Bernoulli(q))."""
    p, q = _clamp(p), _clamp(q)
    return p * torch.log(p / q) + (1 - p) * torch.log((1 - p) / (1 - q))


def ccr_loss(y_hat, y_hat_cf, y, k, delta_k, cfg: CcrConfig):
    """Flip loss on AU ``k`` + invariance KL on the others + perturbation norm.

    Works on single vectors (N,) or batches (B x N); batch terms are averaged
    over samples, the KL is summed over the non-target AUs.
    """
    y_hat, y_hat_cf = _clamp(y_hat), _clamp(y_hat_cf)
    y = torch.as_tensor(y, dtype=y_hat.dtype)
    n = y_hat.shape[-1]
    if not 0 <= k < n:
        raise IndexError(f"target AU index {k} outside [0, {n})")
    if y_hat.shape != y_hat_cf.shape or y_hat.shape != y.shape:
        raise ShapeError("y_hat, y_hat_cf and y must share a shape")
    flip = bce_loss(y_hat_cf[..., k], 1 - y[..., k])
    others = torch.ones(n, dtype=torch.bool)
    others[k] = False
    inv = bernoulli_kl(y_hat[..., others], y_hat_cf[..., others]).sum(-1).mean()
    norm = torch.linalg.vector_norm(torch.as_tensor(delta_k, dtype=y_hat.dtype))
    return flip + cfg.lambda_inv * inv + cfg.lambda_delta * norm


def total_loss(l_cls, l_ccr, lambda_ccr):
    return l_cls + lambda_ccr * l_ccr
