"""Prompt assembly, the sequence-reasoning backend and the multi-label head.

The default backend is a small frozen causal transformer standing in for a
pretrained LLM; only the low-rank adapters on its query/value projections
train. Any callable mapping a B x L x D embedding sequence to a B x D hidden
state can be plugged in instead (``Reasoner(backend=...)``).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ShapeError

DEFAULT_PROMPT = (
    "Given facial evidence and AU relation instructions, decide which action units are active."
)
VOCAB_SIZE = 4096
MAX_LEN = 256


@dataclass
class PromptBundle:
    e_text: torch.Tensor
    t_v: torch.Tensor
    tau_au: Optional[torch.Tensor]
    assembled: torch.Tensor

    @property
    def text_length(self) -> int:
        return self.e_text.shape[-2]


def assemble_prompt(e_text, t_v, tau_au=None) -> PromptBundle:
    """Concatenate [text block | content token | instruction tokens].

    Accepts a single instance (e_text L x D, t_v D or 1 x D, tau N x D) or a
    batch (t_v B x D, tau B x N x D or None; e_text shared L x D or B x L x D).
    """
    if e_text.shape[-2] < 1:
        raise ShapeError("text block must contain at least one token")
    width = e_text.shape[-1]
    widths = {t_v.shape[-1]} | ({tau_au.shape[-1]} if tau_au is not None else set())
    if widths != {width}:
        raise ShapeError(f"embedding widths differ: text {width}, tokens {sorted(widths)}")
    if t_v.dim() == 1 or (tau_au is not None and tau_au.dim() == 2):
        parts = [e_text, t_v.reshape(1, width)]
        if tau_au is not None:
            parts.append(tau_au)
        return PromptBundle(e_text, t_v.reshape(1, width), tau_au, torch.cat(parts, dim=0))
    batch = t_v.shape[0]
    text = e_text.expand(batch, -1, -1) if e_text.dim() == 2 else e_text
    parts = [text, t_v.unsqueeze(1)]
    if tau_au is not None:
        parts.append(tau_au)
    return PromptBundle(e_text, t_v, tau_au, torch.cat(parts, dim=1))


def token_bucket(token: str, vocab_size: int = VOCAB_SIZE) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def embed_prompt_text(prompt: str, table: torch.Tensor) -> torch.Tensor:
    tokens = prompt.split()
    if not tokens:
        raise ValueError("prompt text is empty")
    ids = torch.tensor([token_bucket(t, table.shape[0]) for t in tokens])
    return table[ids]


class PromptText(nn.Module):
    """Frozen hashed-vocabulary embedding of a fixed prompt string."""

    def __init__(self, prompt=DEFAULT_PROMPT, width=64, seed=0, vocab_size=VOCAB_SIZE):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.prompt = prompt
        self.register_buffer("table", torch.randn(vocab_size, width, generator=gen) * 0.5)
        self.register_buffer("ids", torch.tensor([token_bucket(t, vocab_size) for t in prompt.split()]))
        if self.ids.numel() == 0:
            raise ValueError("prompt text is empty")

    def forward(self):
        return self.table[self.ids]

    def embed(self, prompt: str) -> torch.Tensor:
        return embed_prompt_text(prompt, self.table)


class LoraAdapter(nn.Module):
    """Low-rank update (alpha / r) * B @ A for a d_out x d_in weight; B starts at zero."""

    def __init__(self, d_in, d_out, rank=4, alpha=8.0):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.rank = rank
        self.scaling = alpha / rank
        self.A = nn.Parameter(torch.empty(rank, d_in).uniform_(-1 / math.sqrt(d_in), 1 / math.sqrt(d_in)))
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x):
        return self.scaling * ((x @ self.A.T) @ self.B.T)

    def delta_weight(self):
        return self.scaling * (self.B @ self.A)


def lora_param_count(rank: int, shapes: Sequence[Tuple[int, int]]) -> int:
    """Trainable entries of rank-``rank`` adapters on matrices of (d_out, d_in) shapes."""
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    return sum(rank * (d_in + d_out) for d_out, d_in in shapes)


class _Attention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.o = nn.Linear(width, width)

    def forward(self, x, lora_q=None, lora_v=None):
        b, n, w = x.shape
        q, k, v = self.q(x), self.k(x), self.v(x)
        if lora_q is not None:
            q = q + lora_q(x)
        if lora_v is not None:
            v = v + lora_v(x)
        split = lambda t: t.view(b, n, self.heads, w // self.heads).transpose(1, 2)
        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(w // self.heads)
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, w))


class _Block(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = _Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, lora_q=None, lora_v=None):
        x = x + self.attn(self.ln1(x), lora_q, lora_v)
        return x + self.mlp(self.ln2(x))


class TinyCausalTransformer(nn.Module):
    """Frozen pre-LN causal transformer; returns all final hidden states."""

    def __init__(self, width=64, layers=2, heads=4, seed=0):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList([_Block(width, heads) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(width)
        self.pos = nn.Parameter(torch.zeros(MAX_LEN, width))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "pos":
                    p.normal_(0.0, 0.1, generator=gen)
                elif p.dim() == 2:
                    p.normal_(0.0, 1.0 / math.sqrt(p.shape[1]), generator=gen)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x, lora=None):
        n = x.shape[1]
        if n == 0:
            raise ShapeError("empty input sequence")
        if n > MAX_LEN:
            raise ShapeError(f"sequence length {n} exceeds {MAX_LEN}")
        h = x + self.pos[:n]
        for i, block in enumerate(self.blocks):
            lq = lora[f"{i}_q"] if lora is not None else None
            lv = lora[f"{i}_v"] if lora is not None else None
            h = block(h, lq, lv)
        return self.ln_f(h)


def classify(h_out, head: nn.Linear):
    if not torch.isfinite(h_out).all():
        raise InputError("non-finite hidden state")
    logits = head(h_out)
    return logits, torch.sigmoid(logits)


class Reasoner(nn.Module):
    def __init__(self, num_aus, width=64, layers=2, heads=4, lora_rank=4, lora_alpha=8.0,
                 prompt=DEFAULT_PROMPT, seed=0, head_mode="llm",
                 backend: Optional[Callable[[torch.Tensor], torch.Tensor]] = None):
        super().__init__()
        if head_mode not in ("llm", "mlp"):
            raise ValueError(f"unknown head mode {head_mode!r}")
        self.head_mode = head_mode
        self.width = width
        self.text = PromptText(prompt, width, seed=seed + 1)
        self.external_backend = backend
        if backend is None and head_mode == "llm":
            self.base = TinyCausalTransformer(width, layers, heads, seed=seed)
            self.lora = nn.ModuleDict(
                {f"{i}_{m}": LoraAdapter(width, width, lora_rank, lora_alpha) for i in range(layers) for m in "qv"}
            )
        else:
            self.base = None
            self.lora = None
        if head_mode == "mlp":
            self.head = nn.Sequential(nn.Linear(2 * width, width), nn.ReLU(), nn.Linear(width, num_aus))
        else:
            self.head = nn.Linear(width, num_aus)

    def backend_forward(self, bundle: PromptBundle, with_lora=True):
        x = bundle.assembled
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] == 0:
            raise ShapeError("empty prompt sequence")
        if self.external_backend is not None:
            h_out = self.external_backend(x)
        else:
            h_out = self.base(x, self.lora if with_lora else None)[:, -1]
        return h_out[0] if squeeze else h_out

    def forward(self, t_v, tau_au):
        """Return (logits, y_hat, bundle); bundle is None in MLP-head mode."""
        if self.head_mode == "mlp":
            pooled = tau_au.mean(1) if tau_au is not None else torch.zeros_like(t_v)
            logits = self.head(torch.cat([t_v, pooled], dim=-1))
            return logits, torch.sigmoid(logits), None
        bundle = assemble_prompt(self.text(), t_v, tau_au)
        logits, y_hat = classify(self.backend_forward(bundle), self.head)
        return logits, y_hat, bundle
