"""Lightweight 3D spatio-temporal encoder.

Three blocks of conv(3x3x3) -> BatchNorm -> ReLU -> average pool. The first
block halves time and space, the next two halve space only, so for a clip of
T x C x H x W:

    f_mid  : T/2 x 32 x H/4 x W/4   (after block 2)
    f_high : T/2 x 64 x H/8 x W/8   (after block 3)

Before block 1 the per-pixel temporal mean of the clip is removed (static
appearance such as identity and illumination carries no AU evidence) and two
small coordinate planes are appended, so globally pooled features can still
tell where on the face a response came from.

Internally tensors use torch's (B, C, T, H, W) layout.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ShapeError

TEMPORAL_STRIDE = 2
MIN_SPATIAL = 16


@dataclass
class FeaturePyramid:
    f_mid: torch.Tensor
    f_high: torch.Tensor


class _Block(nn.Sequential):
    def __init__(self, c_in, c_out, pool):
        super().__init__(
            nn.Conv3d(c_in, c_out, kernel_size=3, padding=1, padding_mode="replicate", bias=False),
            nn.BatchNorm3d(c_out),
            nn.ReLU(),
            nn.AvgPool3d(pool),
        )


def coordinate_planes(x, scale):
    """Row/column planes spanning [-scale, scale], broadcast over batch and time."""
    b, _, t, h, w = x.shape
    rows = torch.linspace(-scale, scale, h, dtype=x.dtype, device=x.device).view(1, 1, 1, h, 1)
    cols = torch.linspace(-scale, scale, w, dtype=x.dtype, device=x.device).view(1, 1, 1, 1, w)
    return torch.cat([rows.expand(b, 1, t, h, w), cols.expand(b, 1, t, h, w)], dim=1)


class Backbone3D(nn.Module):
    def __init__(self, in_channels=1, widths=(16, 32, 64), remove_static=True, coord_scale=0.05):
        super().__init__()
        self.widths = tuple(widths)
        self.remove_static = remove_static
        self.coord_scale = coord_scale
        extra = 2 if coord_scale else 0
        self.block1 = _Block(in_channels + extra, widths[0], (2, 2, 2))
        self.block2 = _Block(widths[0], widths[1], (1, 2, 2))
        self.block3 = _Block(widths[1], widths[2], (1, 2, 2))

    def forward(self, clips):
        """clips: B x T x C x H x W -> (f_mid, f_high) in B x C x T x H x W layout."""
        if clips.dim() != 5:
            raise ShapeError(f"expected B x T x C x H x W input, got {tuple(clips.shape)}")
        _, t, _, h, w = clips.shape
        if h < MIN_SPATIAL or w < MIN_SPATIAL:
            raise ShapeError(f"spatial size {h}x{w} is below {MIN_SPATIAL}x{MIN_SPATIAL}")
        if not torch.isfinite(clips).all():
            raise InputError("non-finite values in clip tensor")
        x = clips.permute(0, 2, 1, 3, 4)
        pad = (-t) % TEMPORAL_STRIDE
        if pad:
            x = F.pad(x, (0, 0, 0, 0, 0, pad), mode="replicate")
        if self.remove_static:
            x = x - x.mean(dim=2, keepdim=True)
        if self.coord_scale:
            x = torch.cat([x, coordinate_planes(x, self.coord_scale)], dim=1)
        x = self.block1(x)
        f_mid = self.block2(x)
        f_high = self.block3(f_mid)
        return f_mid, f_high


@torch.no_grad()
def recalibrate_batchnorm(model: nn.Module, batches):
    """Replace BatchNorm running statistics with exact averages over ``batches``.

    Running averages collected during training lag behind fast-moving weights;
    one extra pass with the final weights gives eval mode the statistics the
    network was actually trained against.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    was_training = model.training
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    for batch in batches:
        model(batch)
    for m, momentum in zip(norms, saved):
        m.momentum = momentum
    model.train(was_training)


def extract_features(clip, backbone: Backbone3D) -> FeaturePyramid:
    """Single-clip convenience wrapper returning T' x C x H' x W' tensors."""
    frames = clip.frames if hasattr(clip, "frames") else clip
    x = torch.as_tensor(frames, dtype=next(backbone.parameters()).dtype)[None]
    f_mid, f_high = backbone(x)
    return FeaturePyramid(f_mid[0].permute(1, 0, 2, 3), f_high[0].permute(1, 0, 2, 3))
