"""Finite-difference audit of the analytic gradients of the training objective.

The objective checked is exactly what ``train_step`` differentiates:
L_cls plus lambda_ccr times the counterfactual loss, where the counterfactual
pass sees the factual content token, instruction tokens and probabilities as
constants. The numerical side therefore holds those cached values fixed too,
and only re-evaluates the parts the analytic gradient flows through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import torch

from .config import ExperimentConfig, default_config, derive_seed
from .objective import bce_loss, ccr_loss, total_loss
from .trainer import AULLMModel, build_model

MODULES = ("backbone", "mge-efp", "r-augnn", "lora", "head", "delta")
TOLERANCE = 1e-4
# denominators below this are treated as this; keeps near-zero gradients from
# turning float64 round-off into huge ratios
SCALE_FLOOR = 1e-7

# parameters that must always be among the checked entries
_FORCED = {
    "mge-efp": ("mge_efp.gamma",),
    "r-augnn": ("r_augnn.alpha_logit", "r_augnn.attn", "r_augnn.w_q", "r_augnn.w_k", "r_augnn.gcn.0", "r_augnn.gcn.1"),
}


@dataclass
class GradcheckResult:
    module: str
    checked: int
    max_rel_error: float
    worst: str
    passed: bool
    checked_names: List[str] = field(default_factory=list)


def _module_params(model: AULLMModel, module: str) -> List[Tuple[str, torch.nn.Parameter]]:
    prefix = {"backbone": "backbone.", "mge-efp": "mge_efp.", "r-augnn": "r_augnn.",
              "lora": "reasoner.lora.", "head": "reasoner.head.", "delta": "ccr."}[module]
    return [(n, p) for n, p in model.named_parameters() if n.startswith(prefix) and p.requires_grad]


def _build(seed: int, cfg: ExperimentConfig = None):
    cfg = cfg or default_config(seed=seed)
    torch.manual_seed(derive_seed(seed, "gradcheck.model"))
    model = build_model(cfg.synthetic.au_names, cfg).double()
    g = torch.Generator().manual_seed(derive_seed(seed, "gradcheck.init"))
    with torch.no_grad():
        # LoRA B starts at zero, which would leave A with an identically zero gradient
        for adapter in model.reasoner.lora.values():
            adapter.B.copy_(torch.randn(adapter.B.shape, generator=g, dtype=torch.float64) * 0.2)
        model.ccr.delta.copy_(torch.randn(model.ccr.delta.shape, generator=g, dtype=torch.float64) * 0.2)
    n = len(cfg.synthetic.au_names)
    x = 0.5 + 0.1 * torch.rand((4, 4, 1, 16, 16), generator=g, dtype=torch.float64)
    y = (torch.rand((4, n), generator=g) < 0.4).double()
    k = int(torch.randint(n, (1,), generator=g))
    model.train()
    return model, cfg, x, y, k


def _objective(model, cfg, x, y, k, frozen=None):
    """L_total; ``frozen`` supplies the (t_v, tau, y_hat) treated as constants by the CCR term."""
    y_hat, inter = model(x)
    l_cls = bce_loss(y_hat, y)
    if frozen is None:
        frozen = (inter["t_v"].detach(), inter["tau"].detach(), y_hat.detach())
    t_v, tau, y_fact = frozen
    tau_cf = tau.clone()
    tau_cf[:, k] = tau_cf[:, k] + model.ccr.delta[k]
    _, y_cf, _ = model.reasoner(t_v, tau_cf)
    l_ccr = ccr_loss(y_fact, y_cf, y, k, model.ccr.delta[k], cfg.ccr)
    return total_loss(l_cls, l_ccr, cfg.ccr.lambda_ccr), frozen


def check_module(module: str, seed: int = 0, samples: int = 20, eps: float = 1e-5) -> GradcheckResult:
    """Compare analytic and central-difference gradients on sampled entries of one module."""
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {MODULES}")
    model, cfg, x, y, k = _build(seed)
    params = _module_params(model, module)
    model.zero_grad(set_to_none=True)
    loss, frozen = _objective(model, cfg, x, y, k)
    loss.backward()

    rng = np.random.default_rng(derive_seed(seed, f"gradcheck.sample.{module}"))
    sizes = np.array([p.numel() for _, p in params])
    picks = []
    for name, p in params:
        if name in _FORCED.get(module, ()):
            picks.append((name, p, int(rng.integers(p.numel()))))
    owners = rng.choice(len(params), size=max(samples - len(picks), 0), p=sizes / sizes.sum())
    for i in owners:
        name, p = params[i]
        picks.append((name, p, int(rng.integers(p.numel()))))

    worst, worst_err = "", 0.0
    with torch.no_grad():
        for name, p, flat in picks:
            analytic = p.grad.reshape(-1)[flat].item() if p.grad is not None else 0.0
            view = p.data.view(-1)
            orig = view[flat].item()
            view[flat] = orig + eps
            up = _objective(model, cfg, x, y, k, frozen)[0].item()
            view[flat] = orig - eps
            down = _objective(model, cfg, x, y, k, frozen)[0].item()
            view[flat] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), SCALE_FLOOR)
            if err >= worst_err:
                worst, worst_err = f"{name}[{flat}]", err
    names = [f"{name}[{flat}]" for name, _, flat in picks]
    return GradcheckResult(module, len(picks), worst_err, worst, worst_err < TOLERANCE, names)


def check_all(seed: int = 0, samples: int = 20) -> Dict[str, GradcheckResult]:
    return {m: check_module(m, seed, samples) for m in MODULES}
