"""Ablation variants and the variant x Macro-F1 comparison table."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ExperimentConfig
from .errors import ConfigError
from .evaluation import EvalReport, emit_report, run_crossdomain, run_loso

# axis token -> (table label, config overrides)
VARIANTS: Dict[str, Tuple[str, Dict[str, str]]] = {
    "full": ("Full Framework (AULLM++)", {}),
    "no_r_augnn": ("w/o R-AUGNN (no $\\tau_{au}$)", {"trainer.no_r_augnn": "true"}),
    "graph_mode=full": ("FACS graph → fully-connected", {"trainer.graph_mode": "full"}),
    "graph_mode=selfloop": ("FACS graph → self-loops only", {"trainer.graph_mode": "selfloop"}),
    "fusion_mode=linear_proj": ("w/o EFP (linear proj.)", {"trainer.fusion_mode": "linear_proj"}),
    "fusion_mode=mid_only": ("$F_{\\text{mid}}$ only", {"trainer.fusion_mode": "mid_only"}),
    "fusion_mode=high_only": ("$F_{\\text{high}}$ only", {"trainer.fusion_mode": "high_only"}),
    "head_mode=mlp": ("w/o LLM (MLP head)", {"trainer.head_mode": "mlp"}),
    "ccr_enabled=false": ("w/o CCR++", {"trainer.ccr_enabled": "false"}),
}

# spellings accepted on the command line besides the canonical tokens
_ALIASES = {
    "no_r_augnn=true": "no_r_augnn",
    "trainer.no_r_augnn=true": "no_r_augnn",
    "no_ccr": "ccr_enabled=false",
    "mlp_head": "head_mode=mlp",
}


def canonical_axis(token: str) -> str:
    t = token.strip().replace(" ", "")
    t = _ALIASES.get(t, t)
    if t.startswith("trainer."):
        t = t[len("trainer."):]
    if t not in VARIANTS:
        raise ConfigError(f"unknown ablation axis {token!r}; choose from {sorted(VARIANTS)}")
    return t


def variant_config(cfg: ExperimentConfig, axis: str) -> ExperimentConfig:
    return cfg.replace(**VARIANTS[canonical_axis(axis)][1])


def run_ablation(source, cfg: ExperimentConfig, axes: Sequence[str], target=None,
                 jobs=1, predictor_factory=None) -> List[Tuple[str, str, EvalReport]]:
    """One report per axis, all sharing ``cfg.seed``.

    LOSO on ``source`` by default; with ``target`` each variant is trained on
    ``source`` and scored on ``target`` instead.
    """
    axes = [canonical_axis(a) for a in axes]
    if len(set(axes)) != len(axes):
        raise ConfigError("duplicate ablation axes")
    extra = {} if predictor_factory is None else {"predictor_factory": predictor_factory}
    rows = []
    for axis in axes:
        label = VARIANTS[axis][0]
        vcfg = variant_config(cfg, axis)
        if target is None:
            report = run_loso(source, vcfg, jobs=jobs, label=label, **extra)
        else:
            report = run_crossdomain(source, target, vcfg, label=label, **extra)
        rows.append((axis, label, report))
    return rows


def ablation_table_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["axis", "variant", "macro_f1"])
    for axis, label, report in rows:
        writer.writerow([axis, label, repr(report.macro_f1)])
    return buf.getvalue()


def emit_ablation(rows, out_dir) -> Path:
    """Per-variant reports in subdirectories plus ``ablation.csv`` / ``ablation.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for axis, _, report in rows:
        emit_report(report, out_dir / axis.replace("=", "-"))
    (out_dir / "ablation.csv").write_text(ablation_table_text(rows), encoding="utf-8")
    blob = [{"axis": a, "variant": l, "macro_f1": r.macro_f1} for a, l, r in rows]
    (out_dir / "ablation.json").write_text(json.dumps(blob, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
                                           encoding="utf-8")
    return out_dir / "ablation.csv"


def full_minus(rows, axis) -> Optional[float]:
    scores = {a: r.macro_f1 for a, _, r in rows}
    if "full" not in scores or axis not in scores:
        return None
    return scores["full"] - scores[axis]
