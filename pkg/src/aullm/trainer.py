"""Model composition, the CCR intervention pass, training and inference."""

from __future__ import annotations

import contextlib
import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone3D, recalibrate_batchnorm
from .config import ExperimentConfig, derive_seed
from .errors import AullmError, ModeError, NonFiniteLossError, StageError
from .fusion import MGEEFP
from .graph import RAUGNN, build_prior_graph, load_rules
from .objective import bce_loss, ccr_loss, total_loss
from .reasoner import Reasoner

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "aullm-checkpoint"
CHECKPOINT_VERSION = 1


@contextlib.contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except (AullmError, ValueError, RuntimeError) as exc:
        raise StageError(name, exc) from exc


class CounterfactualDeltas(nn.Module):
    """One learnable perturbation vector per AU, added to its instruction token."""

    def __init__(self, num_aus, width, init_std=0.1):
        super().__init__()
        self.delta = nn.Parameter(torch.randn(num_aus, width) * init_std)


class AULLMModel(nn.Module):
    def __init__(self, au_names: Sequence[str], cfg: ExperimentConfig, in_channels=1, backend=None):
        super().__init__()
        m, t = cfg.model, cfg.train
        self.au_names = tuple(au_names)
        self.no_r_augnn = t.no_r_augnn
        n = len(self.au_names)
        torch.manual_seed(derive_seed(cfg.seed, "model.init"))
        self.backbone = Backbone3D(in_channels, m.backbone_widths, m.remove_static, m.coord_scale)
        self.mge_efp = MGEEFP(m.backbone_widths[1], m.backbone_widths[2], m.width, t.fusion_mode, m.gamma_init)
        if t.no_r_augnn:
            self.r_augnn = None
        else:
            prior = build_prior_graph(load_rules(m.rules_file, self.au_names), self.au_names,
                                      m.rules_file or "default")
            self.r_augnn = RAUGNN(prior, m.backbone_widths[2], m.node_dim, m.width, m.gcn_layers,
                                  m.alpha_init, t.graph_mode)
        self.reasoner = Reasoner(n, m.width, m.layers, m.heads, m.lora_rank, m.lora_alpha, m.prompt,
                                 seed=derive_seed(cfg.seed, "reasoner.base"), head_mode=t.head_mode,
                                 backend=backend)
        self.ccr = CounterfactualDeltas(n, m.width)

    def forward(self, clips):
        """clips: B x T x C x H x W -> (y_hat B x N, intermediates)."""
        with _stage("backbone"):
            f_mid, f_high = self.backbone(clips)
        with _stage("mge_efp"):
            t_v, _ = self.mge_efp(f_mid, f_high)
        tau, graph_cache = None, {}
        if self.r_augnn is not None:
            with _stage("r_augnn"):
                tau, graph_cache = self.r_augnn(f_high)
        with _stage("reasoner"):
            logits, y_hat, bundle = self.reasoner(t_v, tau)
        inter = {"t_v": t_v, "tau": tau, "logits": logits, "bundle": bundle, **graph_cache}
        return y_hat, inter

    def ccr_intervention(self, inter, k):
        """Counterfactual probabilities with instruction token ``k`` shifted by delta_k.

        Visual and graph outputs are reused as constants; only the reasoner
        re-runs, so the counterfactual gradient reaches the adapters, the head
        and the deltas.
        """
        if not self.training:
            raise ModeError("the counterfactual pass exists only in training mode")
        if self.ccr is None:
            raise ModeError("counterfactual component has been removed from this model")
        if inter["tau"] is None:
            raise ModeError("no instruction tokens to intervene on (R-AUGNN disabled)")
        tau = inter["tau"].detach().clone()
        tau[:, k] = tau[:, k] + self.ccr.delta[k]
        _, y_cf, _ = self.reasoner(inter["t_v"].detach(), tau)
        return y_cf

    def strip_ccr(self):
        self.ccr = None
        return self

    def parameter_buckets(self):
        """(visual+graph params, lora+head+delta params); frozen weights excluded."""
        visual = [p for mod in (self.backbone, self.mge_efp, self.r_augnn) if mod is not None
                  for p in mod.parameters() if p.requires_grad]
        reasoning = []
        for mod in (self.reasoner.lora, self.reasoner.head, self.ccr):
            if mod is not None:
                reasoning.extend(p for p in mod.parameters() if p.requires_grad)
        if self.reasoner.external_backend is not None and isinstance(self.reasoner.external_backend, nn.Module):
            reasoning.extend(p for p in self.reasoner.external_backend.parameters() if p.requires_grad)
        return visual, reasoning


def build_model(au_names, cfg: ExperimentConfig, in_channels=1, backend=None) -> AULLMModel:
    return AULLMModel(au_names, cfg, in_channels, backend)


def make_optimizer(model: AULLMModel, cfg: ExperimentConfig):
    visual, reasoning = model.parameter_buckets()
    return torch.optim.AdamW(
        [
            {"params": visual, "lr": cfg.train.lr_visual_graph, "name": "visual_graph"},
            {"params": reasoning, "lr": cfg.train.lr_lora, "name": "lora_head_delta"},
        ],
        weight_decay=cfg.train.weight_decay,
    )


def base_checksum(model: AULLMModel) -> str:
    """SHA-256 over the frozen reasoner backend weights."""
    h = hashlib.sha256()
    if model.reasoner.base is not None:
        for name, tensor in sorted(model.reasoner.base.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def train_step(model: AULLMModel, optimizer, clips, labels, cfg: ExperimentConfig, rng: np.random.Generator):
    """One AdamW step on L_cls + lambda_ccr * L_ccr; returns the loss terms."""
    if not model.training:
        raise ModeError("train_step requires a model in training mode")
    y_hat, inter = model(clips)
    l_cls = bce_loss(y_hat, labels)
    l_ccr = torch.zeros((), dtype=l_cls.dtype)
    use_ccr = cfg.train.ccr_enabled and model.ccr is not None and inter["tau"] is not None
    if use_ccr:
        n = y_hat.shape[-1]
        targets = [int(rng.integers(n))] if cfg.ccr.target_mode == "sample" else range(n)
        terms = [
            ccr_loss(y_hat.detach(), model.ccr_intervention(inter, k), labels, k, model.ccr.delta[k], cfg.ccr)
            for k in targets
        ]
        l_ccr = torch.stack(terms).mean()
    l_total = total_loss(l_cls, l_ccr, cfg.ccr.lambda_ccr if use_ccr else 0.0)
    values = {"l_cls": l_cls.item(), "l_ccr": l_ccr.item(), "l_total": l_total.item()}
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(values)
    optimizer.zero_grad(set_to_none=True)
    l_total.backward()
    optimizer.step()
    return values


def fit(model: AULLMModel, clips: np.ndarray, labels: np.ndarray, cfg: ExperimentConfig,
        log_path=None, checkpoint_dir=None) -> List[Dict]:
    """Train on in-memory arrays for ``cfg.train.epochs`` epochs; returns the per-step log."""
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "trainer.shuffle"))
    # separate stream so switching CCR off leaves the batch order unchanged
    target_rng = np.random.default_rng(derive_seed(cfg.seed, "trainer.ccr_target"))
    dtype = next(model.parameters()).dtype
    x_all = torch.as_tensor(clips, dtype=dtype)
    y_all = torch.as_tensor(labels, dtype=dtype)
    history, step = [], 0
    model.train()
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        if log_file is not None and log_file.tell() == 0:
            log_file.write("step,epoch,l_cls,l_ccr,l_total,lr_visual_graph,lr_lora\n")
        for epoch in range(cfg.train.epochs):
            order = rng.permutation(len(x_all))
            for start in range(0, len(order), cfg.train.batch_size):
                idx = torch.as_tensor(order[start:start + cfg.train.batch_size])
                values = train_step(model, optimizer, x_all[idx], y_all[idx], cfg, target_rng)
                step += 1
                row = {"step": step, "epoch": epoch + 1, **values,
                       "lr_visual_graph": cfg.train.lr_visual_graph, "lr_lora": cfg.train.lr_lora}
                history.append(row)
                if log_file is not None:
                    log_file.write(
                        f"{step},{epoch + 1},{values['l_cls']!r},{values['l_ccr']!r},{values['l_total']!r},"
                        f"{cfg.train.lr_visual_graph!r},{cfg.train.lr_lora!r}\n"
                    )
            every = cfg.train.checkpoint_every
            if checkpoint_dir is not None and every and (epoch + 1) % every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.pt")
    finally:
        if log_file is not None:
            log_file.close()
    bs = cfg.train.batch_size
    recalibrate_batchnorm(model.backbone, (x_all[i:i + bs] for i in range(0, len(x_all), bs)))
    return history


@torch.no_grad()
def inference(model: AULLMModel, clips, threshold=0.5, batch_size=64):
    """Eval-mode probabilities and 0/1 predictions (ties at the threshold count as positive)."""
    if model.training:
        raise ModeError("inference requires a model in eval mode (call model.eval())")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(clips, dtype=dtype)
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    probs = torch.cat([model(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)])
    preds = (probs >= threshold).to(torch.int64)
    return (probs[0], preds[0]) if single else (probs, preds)


def threshold_predictions(y_hat, threshold=0.5):
    return (torch.as_tensor(y_hat) >= threshold).to(torch.int64)


def save_checkpoint(model: AULLMModel, path, extra: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
         "tensors": model.state_dict(), "extra": extra or {}},
        path,
    )


def load_checkpoint(model: AULLMModel, path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise AullmError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    tensors = blob["tensors"]
    if model.ccr is None:
        tensors = {k: v for k, v in tensors.items() if not k.startswith("ccr.")}
    model.load_state_dict(tensors)
    return blob.get("extra", {})
