"""Relation-aware AU graph network (R-AUGNN).

A frozen FACS prior adjacency is blended with a per-instance attention
adjacency; node states built from pooled high-level features are propagated
through a symmetric-normalised GCN and mapped to one instruction token per AU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ShapeError

GRAPH_MODES = ("facs", "full", "selfloop")
LEAKY_SLOPE = 0.2

Rule = Tuple[str, str, float]


@dataclass
class PriorGraph:
    au_names: Tuple[str, ...]
    a_prior: torch.Tensor
    rule_source: str = "inline"


def parse_rules(text: str) -> List[Rule]:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"rule line {lineno}: expected 'AU_i AU_j strength', got {line!r}")
        rules.append((parts[0], parts[1], float(parts[2])))
    return rules


def default_rules_text() -> str:
    return resources.files("aullm").joinpath("facs_rules.txt").read_text(encoding="utf-8")


def load_rules(path=None, au_names: Sequence[str] | None = None) -> List[Rule]:
    """Read a rule file (the packaged default when ``path`` is None).

    With ``au_names`` given, rules that mention AUs outside the set are
    dropped, so one rule file can serve datasets with different AU subsets.
    """
    text = default_rules_text() if path is None else Path(path).read_text(encoding="utf-8")
    rules = parse_rules(text)
    if au_names is not None:
        keep = set(au_names)
        rules = [r for r in rules if r[0] in keep and r[1] in keep]
    return rules


def build_prior_graph(rules: Iterable[Rule], au_names: Sequence[str], rule_source="inline") -> PriorGraph:
    index = {name: i for i, name in enumerate(au_names)}
    n = len(au_names)
    a = torch.zeros(n, n, dtype=torch.float64)
    placed = {}
    for ai, aj, strength in rules:
        if ai not in index or aj not in index:
            raise ValueError(f"rule ({ai}, {aj}) references an AU outside {list(au_names)}")
        if ai == aj:
            raise ValueError(f"self rule on {ai}")
        if abs(strength) > 1.0:
            raise ValueError(f"rule ({ai}, {aj}) strength {strength} outside [-1, 1]")
        key = frozenset((ai, aj))
        if key in placed and placed[key] != strength:
            raise ValueError(f"conflicting rules for ({ai}, {aj}): {placed[key]} vs {strength}")
        placed[key] = strength
        i, j = index[ai], index[aj]
        a[i, j] = a[j, i] = strength
    return PriorGraph(tuple(au_names), a, rule_source)


def prior_for_mode(prior: torch.Tensor, mode: str) -> torch.Tensor:
    """Swap the prior for the fully-connected / self-loop-only ablations."""
    if mode == "facs":
        return prior
    n = prior.shape[0]
    if mode == "full":
        return torch.ones(n, n, dtype=prior.dtype) - torch.eye(n, dtype=prior.dtype)
    if mode == "selfloop":
        return torch.zeros_like(prior)
    raise ValueError(f"unknown graph mode {mode!r}")


def init_node_states(pooled, proj, bias):
    """h_i = P_i @ pooled + b_i for every AU i.

    pooled: B x C, proj: N x d x C, bias: N x d  ->  B x N x d
    """
    if not torch.isfinite(pooled).all():
        raise InputError("non-finite pooled features")
    return torch.einsum("ndc,bc->bnd", proj, pooled) + bias


def attention_logits(h0, w_q, w_k, attn, negative_slope=LEAKY_SLOPE):
    """e_ij = LeakyReLU(a . [W_q h_i || W_k h_j]) for node states B x N x d."""
    if not torch.isfinite(h0).all():
        raise InputError("non-finite node states")
    d = w_q.shape[0]
    src = (h0 @ w_q.T) @ attn[:d]
    dst = (h0 @ w_k.T) @ attn[d:]
    return F.leaky_relu(src.unsqueeze(-1) + dst.unsqueeze(-2), negative_slope)


def row_softmax(e):
    return torch.softmax(e, dim=-1)


def dynamic_attention(h0, w_q, w_k, attn, negative_slope=LEAKY_SLOPE):
    """Row-stochastic instance adjacency from node states (B x N x d)."""
    return row_softmax(attention_logits(h0, w_q, w_k, attn, negative_slope))


def fuse_adjacency(a_prior, a_dynamic, alpha):
    if a_prior.shape[-2:] != a_dynamic.shape[-2:]:
        raise ShapeError(f"prior {tuple(a_prior.shape)} and dynamic {tuple(a_dynamic.shape)} shapes differ")
    return alpha * a_prior + (1.0 - alpha) * a_dynamic


def normalized_adjacency(a_hat):
    """D^-1/2 (A + I) D^-1/2 with degrees taken from |A + I|."""
    if not torch.isfinite(a_hat).all():
        raise InputError("non-finite routing matrix")
    n = a_hat.shape[-1]
    a = a_hat + torch.eye(n, dtype=a_hat.dtype, device=a_hat.device)
    inv_sqrt = a.abs().sum(-1).rsqrt()
    return inv_sqrt.unsqueeze(-1) * a * inv_sqrt.unsqueeze(-2)


def gcn_forward(h, a_hat, weights):
    """ReLU between layers, identity after the last one."""
    if len(weights) < 1:
        raise ValueError("need at least one GCN layer")
    norm = normalized_adjacency(a_hat)
    for layer, w in enumerate(weights):
        h = norm @ h @ w
        if layer < len(weights) - 1:
            h = F.relu(h)
    return h


class RAUGNN(nn.Module):
    def __init__(self, prior: PriorGraph, in_channels=64, node_dim=32, width=64, layers=2,
                 alpha_init=0.7, graph_mode="facs"):
        super().__init__()
        if graph_mode not in GRAPH_MODES:
            raise ValueError(f"unknown graph mode {graph_mode!r}")
        self.au_names = prior.au_names
        self.graph_mode = graph_mode
        n, d = len(prior.au_names), node_dim
        self.register_buffer("a_prior", prior_for_mode(prior.a_prior, graph_mode).float())

        b_in = 1.0 / math.sqrt(in_channels)
        b_d = 1.0 / math.sqrt(d)
        self.node_proj = nn.Parameter(torch.empty(n, d, in_channels).uniform_(-b_in, b_in))
        self.node_bias = nn.Parameter(torch.zeros(n, d))
        self.w_q = nn.Parameter(torch.empty(d, d).uniform_(-b_d, b_d))
        self.w_k = nn.Parameter(torch.empty(d, d).uniform_(-b_d, b_d))
        self.attn = nn.Parameter(torch.empty(2 * d).uniform_(-b_d, b_d))
        self.alpha_logit = nn.Parameter(torch.tensor(math.log(alpha_init / (1.0 - alpha_init))))
        self.gcn = nn.ParameterList(
            [nn.Parameter(torch.eye(d) + torch.empty(d, d).uniform_(-b_d, b_d) * 0.5) for _ in range(layers)]
        )
        self.emit = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, width))

    @property
    def alpha(self):
        return torch.sigmoid(self.alpha_logit)

    def forward(self, f_high):
        """f_high: B x C x T x H x W -> (tau: B x N x D, cache)."""
        pooled = f_high.flatten(2).mean(-1)
        h0 = init_node_states(pooled, self.node_proj, self.node_bias)
        a_dyn = dynamic_attention(h0, self.w_q, self.w_k, self.attn)
        a_hat = fuse_adjacency(self.a_prior, a_dyn, self.alpha)
        h_last = gcn_forward(h0, a_hat, list(self.gcn))
        tau = self.emit(h_last)
        return tau, {"h0": h0, "a_dynamic": a_dyn, "a_hat": a_hat, "h_last": h_last}
