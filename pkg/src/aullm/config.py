"""Flat, versioned ``key = value`` configuration files.

Example::

    version = 1
    profile = desk
    seed = 0
    trainer.epochs = 40
    trainer.graph_mode = facs
    ccr.lambda_ccr = 0.1
    synthetic.rules = AU1:AU2:0.9, AU4:AU7:0.8

Keys carry a section prefix (``trainer.``, ``ccr.``, ``reasoner.``, ``lora.``,
``graph.``, ``fusion.``, ``prompt.``, ``synthetic.``, ``eval.``). Unknown keys
and malformed values raise :class:`ConfigError`.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .data import DEFAULT_AU_NAMES, SyntheticConfig
from .errors import ConfigError
from .objective import CcrConfig
from .fusion import FUSION_MODES
from .graph import GRAPH_MODES
from .reasoner import DEFAULT_PROMPT

CONFIG_VERSION = 1
SEED_ENV = "AULLMXX_SEED"
PROFILES = ("desk", "paper")
AGGREGATIONS = ("pooled", "per_fold")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    weight_decay: float = 1e-4
    lr_visual_graph: float = 2e-4
    lr_lora: float = 1e-4
    no_r_augnn: bool = False
    graph_mode: str = "facs"
    fusion_mode: str = "full"
    head_mode: str = "llm"
    ccr_enabled: bool = True
    checkpoint_every: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("trainer.epochs and trainer.batch_size must be positive")
        if min(self.weight_decay, self.lr_visual_graph, self.lr_lora) < 0:
            raise ConfigError("learning rates and weight decay must be >= 0")
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"trainer.graph_mode must be one of {GRAPH_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"trainer.fusion_mode must be one of {FUSION_MODES}")
        if self.head_mode not in ("llm", "mlp"):
            raise ConfigError("trainer.head_mode must be llm or mlp")


@dataclass
class ModelConfig:
    backbone_widths: Tuple[int, int, int] = (16, 32, 64)
    remove_static: bool = True
    coord_scale: float = 0.05
    width: int = 64
    layers: int = 2
    heads: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    node_dim: int = 32
    gcn_layers: int = 2
    alpha_init: float = 0.7
    gamma_init: float = 0.1
    rules_file: Optional[str] = None
    prompt: str = DEFAULT_PROMPT

    def validate(self):
        if self.width % self.heads:
            raise ConfigError("reasoner.width must be divisible by reasoner.heads")
        if self.lora_rank < 1 or self.gcn_layers < 1:
            raise ConfigError("lora.rank and graph.layers must be >= 1")
        if not 0.0 < self.alpha_init < 1.0:
            raise ConfigError("graph.alpha_init must lie in (0, 1)")
        if not self.prompt.split():
            raise ConfigError("prompt.text must not be empty")


@dataclass
class EvalConfig:
    aggregation: str = "pooled"
    threshold: float = 0.5

    def validate(self):
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"eval.aggregation must be one of {AGGREGATIONS}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ccr: CcrConfig = field(default_factory=CcrConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        self.train.validate()
        self.model.validate()
        self.ccr.validate()
        self.eval.validate()
        self.synthetic.validate()
        return self

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"trainer.epochs": 5})``."""
        text = to_text(self)
        extra = "\n".join(f"{k} = {_format(v)}" for k, v in overrides.items())
        return parse_config(text + "\n" + extra)

    def fingerprint(self) -> str:
        return hashlib.sha256(to_text(self).encode("utf-8")).hexdigest()[:16]


# dotted key -> (section attribute, field name)
_KEYS = {
    "trainer.epochs": ("train", "epochs"),
    "trainer.batch_size": ("train", "batch_size"),
    "trainer.weight_decay": ("train", "weight_decay"),
    "trainer.lr_visual_graph": ("train", "lr_visual_graph"),
    "trainer.lr_lora": ("train", "lr_lora"),
    "trainer.no_r_augnn": ("train", "no_r_augnn"),
    "trainer.graph_mode": ("train", "graph_mode"),
    "trainer.fusion_mode": ("train", "fusion_mode"),
    "trainer.head_mode": ("train", "head_mode"),
    "trainer.ccr_enabled": ("train", "ccr_enabled"),
    "trainer.checkpoint_every": ("train", "checkpoint_every"),
    "backbone.widths": ("model", "backbone_widths"),
    "backbone.remove_static": ("model", "remove_static"),
    "backbone.coord_scale": ("model", "coord_scale"),
    "reasoner.width": ("model", "width"),
    "reasoner.layers": ("model", "layers"),
    "reasoner.heads": ("model", "heads"),
    "lora.rank": ("model", "lora_rank"),
    "lora.alpha": ("model", "lora_alpha"),
    "graph.node_dim": ("model", "node_dim"),
    "graph.layers": ("model", "gcn_layers"),
    "graph.alpha_init": ("model", "alpha_init"),
    "graph.rules_file": ("model", "rules_file"),
    "fusion.gamma_init": ("model", "gamma_init"),
    "prompt.text": ("model", "prompt"),
    "ccr.lambda_inv": ("ccr", "lambda_inv"),
    "ccr.lambda_delta": ("ccr", "lambda_delta"),
    "ccr.lambda_ccr": ("ccr", "lambda_ccr"),
    "ccr.target_mode": ("ccr", "target_mode"),
    "eval.aggregation": ("eval", "aggregation"),
    "eval.threshold": ("eval", "threshold"),
    "synthetic.seed": ("synthetic", "seed"),
    "synthetic.num_subjects": ("synthetic", "num_subjects"),
    "synthetic.clips_per_subject": ("synthetic", "clips_per_subject"),
    "synthetic.au_names": ("synthetic", "au_names"),
    "synthetic.T": ("synthetic", "T"),
    "synthetic.C": ("synthetic", "C"),
    "synthetic.H": ("synthetic", "H"),
    "synthetic.W": ("synthetic", "W"),
    "synthetic.bump_amplitude": ("synthetic", "bump_amplitude"),
    "synthetic.bump_sigma": ("synthetic", "bump_sigma"),
    "synthetic.base_rate": ("synthetic", "base_rate"),
    "synthetic.coupling_gain": ("synthetic", "coupling_gain"),
    "synthetic.gibbs_sweeps": ("synthetic", "gibbs_sweeps"),
    "synthetic.background": ("synthetic", "background"),
    "synthetic.identity_offset_scale": ("synthetic", "identity_offset_scale"),
    "synthetic.rules": ("synthetic", "co_occurrence_rules"),
    "synthetic.centers": ("synthetic", "au_region_centers"),
    "synthetic.domains": ("synthetic", "domain_styles"),
}

_PROFILE_DEFAULTS = {
    "desk": {"trainer.epochs": 60, "trainer.batch_size": 32, "trainer.lr_visual_graph": 2e-3,
             "trainer.lr_lora": 1e-3, "lora.rank": 4, "lora.alpha": 8.0},
    "paper": {"trainer.epochs": 350, "trainer.batch_size": 256, "trainer.lr_visual_graph": 2e-4,
              "trainer.lr_lora": 1e-4, "lora.rank": 16, "lora.alpha": 32.0},
}


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key, text, current):
    if key == "synthetic.rules":
        rules = []
        for item in filter(None, (p.strip() for p in text.split(","))):
            a, b, s = item.split(":")
            rules.append((a.strip(), b.strip(), float(s)))
        return rules
    if key == "synthetic.centers":
        centers = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            name, r, c = item.split(":")
            centers[name.strip()] = (int(r), int(c))
        return centers
    if key == "synthetic.domains":
        styles = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            name, shift, sigma = item.split(":")
            styles[name.strip()] = (float(shift), float(sigma))
        return styles
    if key in ("synthetic.au_names", "backbone.widths"):
        items = tuple(p.strip() for p in text.split(",") if p.strip())
        return tuple(int(i) for i in items) if key == "backbone.widths" else items
    if key == "graph.rules_file":
        return None if text.lower() in ("", "default", "none") else text
    if isinstance(current, bool):
        return _parse_bool(text)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ", ".join(f"{k}:{':'.join(_format(x) for x in v)}" for k, v in sorted(value.items()))
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ", ".join(":".join(_format(x) for x in item) for item in value)
        return ", ".join(_format(x) for x in value)
    if value is None:
        return "default"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> ExperimentConfig:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()  # '#' starts a comment anywhere on the line
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value

    version = entries.pop("version", None)
    if version is None:
        raise ConfigError("config is missing 'version'")
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")

    cfg = ExperimentConfig()
    cfg.profile = entries.pop("profile", "desk")
    if cfg.profile not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}")
    try:
        cfg.seed = int(entries.pop("seed", 0))
    except ValueError as exc:
        raise ConfigError(f"seed: {exc}") from None

    settings = {k: _format(v) for k, v in _PROFILE_DEFAULTS[cfg.profile].items()}
    settings.update(entries)
    for key, value in settings.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = _KEYS[key]
        target = getattr(cfg, section)
        try:
            setattr(target, name, _parse_value(key, value, getattr(target, name)))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    if tuple(cfg.synthetic.au_names) != DEFAULT_AU_NAMES and "synthetic.centers" not in settings:
        raise ConfigError("synthetic.centers is required when synthetic.au_names is changed")
    return cfg.validate()


def to_text(cfg: ExperimentConfig) -> str:
    """Canonical text form: every key, sorted, so equal configs give equal text."""
    lines = [f"version = {CONFIG_VERSION}", f"profile = {cfg.profile}", f"seed = {cfg.seed}"]
    for key in sorted(_KEYS):
        section, name = _KEYS[key]
        lines.append(f"{key} = {_format(getattr(getattr(cfg, section), name))}")
    return "\n".join(lines) + "\n"


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return apply_seed(parse_config(text), seed_override)


def apply_seed(cfg: ExperimentConfig, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Explicit override first, then the AULLMXX_SEED environment variable."""
    env_seed = os.environ.get(SEED_ENV)
    if seed_override is not None:
        cfg.seed = seed_override
    elif env_seed:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg


def default_config(**overrides) -> ExperimentConfig:
    cfg = parse_config(f"version = {CONFIG_VERSION}\n")
    return cfg.replace(**overrides) if overrides else cfg


def derive_seed(root: int, name: str) -> int:
    """Deterministic per-purpose seed split from the root seed."""
    digest = hashlib.blake2b(f"{root}:{name}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2 ** 31)
