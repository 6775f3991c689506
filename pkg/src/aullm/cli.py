"""Command-line entry point: ``aullm <verb> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Every verb writes its artifacts under ``--out`` and prints one summary line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import ablation, evaluation, gradcheck, plotting
from .config import ExperimentConfig, apply_seed, default_config, load_config, to_text
from .data import ClipDataset, export_labels_csv, generate_synthetic, load_manifest, save_dataset
from .errors import AullmError, ConfigError
from .graph import normalized_adjacency, prior_for_mode
from .trainer import build_model, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("aullm")

VERBS = ("gen-data", "train", "eval-loso", "eval-crossdomain", "ablate", "gradcheck", "graph-inspect", "report")


class UsageError(Exception):
    """Conflicting or invalid flags (exit 2)."""


class GradcheckFailed(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="aullm", description="Micro-expression AU detection pipeline.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="verb", metavar="verb", required=True)

    def add(name, help_text, data=False, out=True):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="key = value config file (desk profile defaults if omitted)")
        s.add_argument("--seed", type=int, help="root seed override (takes precedence over AULLMXX_SEED)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
        if out:
            s.add_argument("--out", required=True, help="output directory")
        if data:
            s.add_argument("--data", required=True, help="dataset directory (manifest.json + clips)")
        return s

    add("gen-data", "generate the synthetic dataset")
    add("train", "train on every sample of a dataset", data=True)
    s = add("eval-loso", "leave-one-subject-out evaluation", data=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--aggregation", choices=("pooled", "per_fold"))
    s = add("eval-crossdomain", "train on a source domain, test on a target domain")
    s.add_argument("--source", required=True)
    s.add_argument("--target", help="target dataset directory (defaults to --source)")
    s.add_argument("--source-domain")
    s.add_argument("--target-domain")
    s = add("ablate", "compare ablation variants", data=True)
    s.add_argument("--axes", default="full", help="comma list, e.g. full,no_r_augnn,ccr_enabled=false")
    s.add_argument("--target", help="score variants on this dataset instead of running LOSO")
    s.add_argument("--source-domain")
    s.add_argument("--target-domain")
    s.add_argument("--jobs", type=int, default=1)
    s = add("gradcheck", "finite-difference gradient audit", out=False)
    s.add_argument("--module", default="all", choices=("all",) + gradcheck.MODULES)
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--out", help="optional directory for gradcheck.json")
    s = add("graph-inspect", "dump the prior graph and (optionally) one clip's routing matrix")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--clip")
    s = add("report", "re-render tables and figures from report.json files", out=True)
    s.add_argument("reports", nargs="+", help="report.json paths")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.seed) if args.config else apply_seed(default_config(), args.seed)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (x.strip() for x in item.split("=", 1))
        if k in overrides and overrides[k] != v:
            raise UsageError(f"conflicting --set values for {k}")
        overrides[k] = v
    if getattr(args, "aggregation", None):
        if "eval.aggregation" in overrides and overrides["eval.aggregation"] != args.aggregation:
            raise UsageError("--aggregation conflicts with --set eval.aggregation")
        overrides["eval.aggregation"] = args.aggregation
    if "seed" in overrides and args.seed is not None:
        raise UsageError("--seed conflicts with --set seed")
    return cfg.replace(**overrides) if overrides else cfg


def _dataset(path, domain=None) -> ClipDataset:
    ds = ClipDataset.from_manifest(load_manifest(path))
    return ds.subset([domain]) if domain else ds


def _check_out_not_input(out, *inputs):
    out = Path(out).resolve()
    for path in inputs:
        if path is None:
            continue
        src = Path(path).resolve()
        if out == src or src in out.parents:
            raise UsageError(f"--out {out} must lie outside the input directory {src}")


def _write_config(cfg, out):
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "config.resolved.cfg").write_text(to_text(cfg), encoding="utf-8")


# ------------------------------------------------------------------ verbs


def cmd_gen_data(args, cfg):
    dataset = generate_synthetic(cfg.synthetic)
    path = save_dataset(dataset, args.out)
    export_labels_csv(dataset.manifest, Path(args.out) / "labels.csv")
    subjects = len({s.subject_id for s in dataset.manifest.samples})
    return f"gen-data clips={dataset.manifest.M} subjects={subjects} manifest={path}"


def cmd_train(args, cfg):
    _check_out_not_input(args.out, args.data)
    ds = _dataset(args.data)
    out = Path(args.out)
    _write_config(cfg, out)
    model = build_model(ds.au_names, cfg, in_channels=ds.frames.shape[2])
    history = fit(model, ds.frames, ds.labels, cfg, log_path=out / "train_log.csv", checkpoint_dir=out / "checkpoints")
    save_checkpoint(model, out / "model.pt", extra={"config_fingerprint": cfg.fingerprint()})
    return f"train protocol=train-all final_loss={history[-1]['l_total']:.6f} steps={len(history)}"


def _emit_with_plots(report, out):
    evaluation.emit_report(report, out)
    plotting.render_plots(report, out)


def cmd_eval_loso(args, cfg):
    _check_out_not_input(args.out, args.data)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    ds = _dataset(args.data)
    _write_config(cfg, args.out)
    try:
        report = evaluation.run_loso(ds, cfg, jobs=args.jobs)
    except evaluation.FoldFailedError as exc:
        Path(args.out, "fold_failure.json").write_text(
            json.dumps(exc.report, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")
        raise
    _emit_with_plots(report, args.out)
    return f"eval-loso protocol=loso aggregation={report.aggregation} macro_f1={report.macro_f1:.4f}"


def cmd_eval_crossdomain(args, cfg):
    target_dir = args.target or args.source
    _check_out_not_input(args.out, args.source, target_dir)
    if args.target is None and args.source_domain and args.source_domain == args.target_domain:
        raise UsageError("source and target domains are identical; pass --target to run this on purpose")
    source = _dataset(args.source, args.source_domain)
    target = _dataset(target_dir, args.target_domain)
    _write_config(cfg, args.out)
    report = evaluation.run_crossdomain(source, target, cfg)
    _emit_with_plots(report, args.out)
    d = report.domains
    return f"eval-crossdomain protocol=crossdomain {d['source']}->{d['target']} macro_f1={report.macro_f1:.4f}"


def cmd_ablate(args, cfg):
    _check_out_not_input(args.out, args.data, args.target)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if args.target_domain and not args.target:
        raise UsageError("--target-domain requires --target")
    axes = [a for a in args.axes.split(",") if a.strip()]
    axes = [ablation.canonical_axis(a) for a in axes]
    source = _dataset(args.data, args.source_domain)
    target = _dataset(args.target, args.target_domain) if args.target else None
    _write_config(cfg, args.out)
    rows = ablation.run_ablation(source, cfg, axes, target=target, jobs=args.jobs)
    ablation.emit_ablation(rows, args.out)
    for axis, _, report in rows:
        plotting.render_plots(report, Path(args.out) / axis.replace("=", "-"))
    best = max(rows, key=lambda r: r[2].macro_f1)
    protocol = "crossdomain" if target is not None else "loso"
    return f"ablate protocol={protocol} variants={len(rows)} best={best[0]} macro_f1={best[2].macro_f1:.4f}"


def cmd_gradcheck(args, cfg):
    modules = gradcheck.MODULES if args.module == "all" else (args.module,)
    results = [gradcheck.check_module(m, cfg.seed, args.samples) for m in modules]
    for r in results:
        print(f"{r.module}: checked={r.checked} max_rel_error={r.max_rel_error:.3e} worst={r.worst} "
              f"{'PASS' if r.passed else 'FAIL'}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        blob = {r.module: {"checked": r.checked, "max_rel_error": r.max_rel_error, "passed": r.passed,
                           "worst": r.worst} for r in results}
        Path(args.out, "gradcheck.json").write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n",
                                                    encoding="utf-8")
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results)
    summary = f"gradcheck modules={len(results)} max_rel_error={worst:.3e} {'PASS' if ok else 'FAIL'}"
    if not ok:
        raise GradcheckFailed(summary)
    return summary


def cmd_graph_inspect(args, cfg):
    _check_out_not_input(args.out, args.data)
    if args.clip and not args.data:
        raise UsageError("--clip requires --data")
    au_names = cfg.synthetic.au_names
    ds = None
    if args.data:
        ds = _dataset(args.data)
        au_names = ds.au_names
    model = build_model(au_names, cfg, in_channels=ds.frames.shape[2] if ds is not None else 1)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    if model.r_augnn is None:
        raise ConfigError("graph-inspect needs the relation graph (trainer.no_r_augnn = false)")
    g = model.r_augnn
    prior = prior_for_mode(g.a_prior, cfg.train.graph_mode)
    blob = {
        "au_names": list(au_names),
        "graph_mode": cfg.train.graph_mode,
        "a_prior": prior.tolist(),
        "a_prior_normalized": normalized_adjacency(prior).tolist(),
        "alpha": g.alpha.item(),
    }
    if ds is not None:
        clip_id = args.clip or ds.manifest.clip_ids[0]
        idx = ds.indices([clip_id])
        model.eval()
        with torch.no_grad():
            _, inter = model(torch.as_tensor(ds.frames[idx]))
        blob.update(clip_id=clip_id, a_dynamic=inter["a_dynamic"][0].tolist(), a_hat=inter["a_hat"][0].tolist())
    Path(args.out).mkdir(parents=True, exist_ok=True)
    Path(args.out, "graph.json").write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    edges = int((np.asarray(blob["a_prior"]) != 0).sum() // 2)
    return f"graph-inspect aus={len(au_names)} prior_edges={edges} alpha={blob['alpha']:.4f}"


def cmd_report(args, cfg):
    reports = [evaluation.load_report(p) for p in args.reports]
    out = Path(args.out)
    for i, r in enumerate(reports):
        sub = out / (f"report{i}" if len(reports) > 1 else "")
        evaluation.emit_report(r, sub)
        plotting.plot_per_au_f1(r, sub / "per_au_f1.png")
    cross = [r for r in reports if r.protocol == "crossdomain"]
    if cross:
        plotting.plot_crossdomain_heatmap(cross, out / "crossdomain_heatmap.png")
    mean = sum(r.macro_f1 for r in reports) / len(reports)
    return f"report reports={len(reports)} protocol={reports[0].protocol} mean_macro_f1={mean:.4f}"


_COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval-loso": cmd_eval_loso,
    "eval-crossdomain": cmd_eval_crossdomain, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
    "graph-inspect": cmd_graph_inspect, "report": cmd_report,
}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = _config(args)  # parse before any work starts
        summary = _COMMANDS[args.verb](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"aullm {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except GradcheckFailed as exc:
        print(f"{exc} wall={time.perf_counter() - start:.1f}s")
        return 1
    except (AullmError, OSError, ValueError, RuntimeError) as exc:
        print(f"aullm {args.verb}: failed: {exc}", file=sys.stderr)
        return 1
    print(f"{summary} wall={time.perf_counter() - start:.1f}s")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
