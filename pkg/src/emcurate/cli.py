"""Command-line surface tying the modules together.

Subcommands: generate, audit, refine, roc, run-loop, evaluate, review.
Exit codes: 0 success, 2 configuration problem, 3 I/O or file-format
problem, 4 violated invariant. All randomness flows from --seed (or the
config's seed); no wall-clock entropy is used, so identical invocations
produce byte-identical outputs. EMCURATE_OUT and EMCURATE_THREADS override
the output directory and thread count.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence


from . import volume_io
from .config import RunConfig, load_run_config
from .errors import (
    CatalogError,
    ConfigError,
    ModelError,
    ProtocolError,
    ShapeError,
    UndefinedRateError,
    VolumeFormatError,
)
from .grid import CaseRecord
from .loop import (
    EscalationQueue,
    RunRecorder,
    expectation_pass,
    interactive_review,
    run_em,
    save_decisions,
)
from .metrics import (
    SurfaceDistanceSpec,
    build_roc,
    corpus_summary,
    default_threshold_grid,
    evaluate_pair,
)
from .phantom import PhantomSource, generate_corpus
from .roc import annotation_savings, process_case, select_threshold
from .verifier import apply_update_rule, audit_case, fit_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4

_CONFIG_ERRORS = (ConfigError,)
_IO_ERRORS = (VolumeFormatError, FileNotFoundError, NotADirectoryError,
              PermissionError, IsADirectoryError, OSError)
_INVARIANT_ERRORS = (ShapeError, CatalogError, UndefinedRateError, ModelError, ProtocolError)


def _json_dump(path: Path, obj: dict) -> None:
    volume_io.write_json(path, obj)


def _resolve_out(args) -> Path:
    out = os.environ.get("EMCURATE_OUT", None)
    if getattr(args, "out", None):
        out = args.out
    if out is None:
        raise ConfigError("no output directory given (use --out or EMCURATE_OUT)")
    return Path(out)


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get("EMCURATE_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _load_config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(int(args.seed))
    return cfg


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out_dir} is not empty (use --force)")
        for p in sorted(out_dir.rglob("*"), reverse=True):
            if p.is_file():
                p.unlink()
            else:
                p.rmdir()
    out_dir.mkdir(parents=True, exist_ok=True)


def _load_corpus(path: str) -> tuple[list[CaseRecord], "object"]:
    return volume_io.read_corpus(path)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args)
    _prepare_out_dir(out_dir, args.force)
    cases, logs = generate_corpus(cfg.phantom, cfg.noise, cfg.corpus.n_cases,
                                  cfg.corpus.gold_fraction, cfg.em.seed)
    manifest = volume_io.write_corpus(out_dir, cases, cfg.catalog)
    with (out_dir / "injections.jsonl").open("w") as fh:
        for case_id in manifest["case_ids"]:
            row = {"case_id": case_id, "ops": [op.to_dict() for op in logs[case_id]]}
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    print(f"wrote {len(cases)} cases to {out_dir}")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _load_config(args)
    cases, _catalog = _load_corpus(args.corpus)
    out_dir = _resolve_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = fit_model(cases, organ_connectivity=cfg.metrics.organ_connectivity,
                      tumor_connectivity=cfg.metrics.tumor_connectivity,
                      tumor_min_component_voxels=cfg.model.tumor_min_component_voxels)
    model.save(out_dir / "model.json")
    rows = []
    changes = []
    updated = []
    for case in cases:
        outcome = audit_case(model, case, cfg.em.auto_replace_dsc, cfg.em.route_dsc)
        rows.append({
            "case_id": case.case_id,
            "structures": {str(s): {"dsc": a.dsc, "action": a.action.value}
                           for s, a in outcome.per_structure.items()},
        })
        if args.apply:
            case, log = apply_update_rule(case, outcome)
            changes.extend(log)
        updated.append(case)
    _json_dump(out_dir / "audit.json", {"cases": rows})
    if args.apply:
        volume_io.write_corpus(out_dir / "refined", updated, cfg.catalog)
        with (out_dir / "changes.jsonl").open("w") as fh:
            for entry in changes:
                fh.write(json.dumps(entry.to_dict(), sort_keys=True,
                                    separators=(",", ":")) + "\n")
    print(f"audited {len(cases)} cases -> {out_dir / 'audit.json'}")
    return EXIT_OK


def cmd_refine(args) -> int:
    """One full expectation pass (audit, auto-replace, judge, escalate)."""
    cfg = _load_config(args)
    cases, _catalog = _load_corpus(args.corpus)
    out_dir = _resolve_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = fit_model(cases, organ_connectivity=cfg.metrics.organ_connectivity,
                      tumor_connectivity=cfg.metrics.tumor_connectivity,
                      tumor_min_component_voxels=cfg.model.tumor_min_component_voxels)
    judge = cfg.build_judge()
    oracle = cfg.build_oracle()
    updated, queue, stats = expectation_pass(cases, model, judge, oracle, cfg.em,
                                             threads=_resolve_threads(args))
    volume_io.write_corpus(out_dir / "refined", updated, cfg.catalog)
    for entry in queue.entries:
        entry.materialize_overlays()
    queue.save(out_dir / "queue.json")
    with (out_dir / "changes.jsonl").open("w") as fh:
        for entry in stats.all_changes:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    _json_dump(out_dir / "refine_stats.json", {
        "structures_audited": stats.structures_audited,
        "keep": stats.n_keep, "auto_replace": stats.n_auto_replace,
        "route": stats.n_route, "escalated": stats.n_escalated,
        "tournament_decided": stats.n_tournament_decided,
        "auto_resolved": stats.n_auto_resolved, "unresolved": stats.n_unresolved,
        "escalation_fraction": stats.escalation_fraction,
        "change_fraction": stats.change_fraction,
    })
    print(f"refined corpus -> {out_dir / 'refined'}")
    return EXIT_OK


def cmd_roc(args) -> int:
    cfg = _load_config(args)
    cases, catalog = _load_corpus(args.corpus)
    out_dir = _resolve_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    tumor_labels = catalog.tumor_labels
    if not tumor_labels:
        raise ConfigError("ROC workflow requires a tumor structure in the catalog")
    tumor = tumor_labels[0]
    for case in cases:
        if case.gold is None:
            raise ConfigError(f"case {case.case_id} lacks gold labels; "
                              "the ROC workflow is a simulation against gold")
    model = fit_model(cases, organ_connectivity=cfg.metrics.organ_connectivity,
                      tumor_connectivity=cfg.metrics.tumor_connectivity,
                      tumor_min_component_voxels=cfg.model.tumor_min_component_voxels)
    probs = [model.predict_prob(c.volume, tumor) for c in cases]
    refs = [c.gold.labels == tumor for c in cases]
    curve = build_roc(probs, refs, default_threshold_grid(cfg.metrics.roc_points),
                      connectivity=cfg.metrics.tumor_connectivity,
                      fp_min_voxels=cfg.metrics.fp_min_voxels)
    with (out_dir / "roc_curve.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "sensitivity", "fp_per_scan", "specificity"])
        for p in curve.points:
            writer.writerow([f"{p.threshold:.6f}", f"{p.sensitivity:.9f}",
                             f"{p.fp_per_scan:.9f}", f"{p.specificity:.9f}"])
    policy = select_threshold(curve, args.target if args.target is not None
                              else cfg.metrics.roc_target_sensitivity)
    _json_dump(out_dir / "policy.json", policy.to_dict())
    workloads = []
    for case, prob in zip(cases, probs):
        pred = prob > policy.selected_threshold
        gold = case.gold.labels == tumor
        _cleaned, workload = process_case(case, pred, gold, cfg.cost,
                                          connectivity=cfg.metrics.tumor_connectivity)
        workloads.append(workload)
    savings = annotation_savings(workloads, cfg.cost)
    _json_dump(out_dir / "savings.json", savings.to_dict())
    print(f"threshold {policy.selected_threshold:.3f} "
          f"(sensitivity {policy.achieved_sensitivity:.3f}, "
          f"{policy.fp_per_scan:.2f} FP/scan) -> {out_dir}")
    return EXIT_OK


def cmd_run_loop(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args)
    _prepare_out_dir(out_dir, args.force)
    if args.corpus:
        cases, _catalog = _load_corpus(args.corpus)
    else:
        cases, _logs = generate_corpus(cfg.phantom, cfg.noise, cfg.corpus.n_cases,
                                       cfg.corpus.gold_fraction, cfg.em.seed)
    recorder = RunRecorder(out_dir, include_timing=args.timing)
    recorder.config_snapshot(cfg.raw)
    judge = cfg.build_judge()
    oracle = cfg.build_oracle()
    source = PhantomSource(cfg.phantom, intensity_jitter=cfg.intensity_jitter)
    corpus, model, reports = run_em(
        cases, cfg.em, judge, oracle, phantom_source=source, recorder=recorder,
        threads=_resolve_threads(args),
        organ_connectivity=cfg.metrics.organ_connectivity,
        tumor_connectivity=cfg.metrics.tumor_connectivity,
        tumor_min_component_voxels=cfg.model.tumor_min_component_voxels)
    volume_io.write_corpus(out_dir / "final_corpus", corpus, cfg.catalog)
    recorder.summary({
        "iterations": len(reports),
        "mean_dsc_vs_gold": reports[-1].mean_dsc_vs_gold if reports else None,
        "escalation_fractions": [r.escalation_fraction for r in reports],
    })
    last = f", final mean DSC vs gold {reports[-1].mean_dsc_vs_gold:.4f}" \
        if reports and reports[-1].mean_dsc_vs_gold is not None else ""
    print(f"ran {len(reports)} iterations{last} -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    cases, catalog = _load_corpus(args.corpus)
    out_dir = _resolve_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = SurfaceDistanceSpec(tolerance_mm=cfg.metrics.nsd_tolerance_mm,
                               spacing=cases[0].pseudo.spacing)
    reports = {}
    for case in cases:
        if case.gold is None:
            raise ConfigError(f"case {case.case_id} lacks gold labels")
        reports[case.case_id] = evaluate_pair(case.pseudo, case.gold, spec,
                                              with_nsd=not args.no_nsd)
    payload = {
        "cases": {
            cid: {str(s): {"dsc": sc.dsc, "nsd": sc.nsd, "pred_voxels": sc.pred_voxels,
                           "ref_voxels": sc.ref_voxels}
                  for s, sc in rep.per_structure.items()}
            for cid, rep in reports.items()
        },
        "aggregate": corpus_summary(reports, catalog),
    }
    _json_dump(out_dir / "evaluation.json", payload)
    print(f"mean DSC {payload['aggregate']['mean_dsc']:.4f} -> {out_dir / 'evaluation.json'}")
    return EXIT_OK


def cmd_review(args) -> int:
    queue = EscalationQueue.load(args.queue)
    decisions = interactive_review(queue, require_tty=not args.allow_pipe)
    save_decisions(args.decisions, decisions)
    print(f"recorded {len(decisions)} decisions -> {args.decisions}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emcurate",
                                     description="EM-style annotation refinement on phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="run config YAML (defaults to packaged config)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: all cores)")
        if needs_out:
            p.add_argument("--out", help="output directory (or EMCURATE_OUT)")

    p = sub.add_parser("generate", help="generate a phantom corpus")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite a nonempty out dir")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("audit", help="model-consistency audit of a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--apply", action="store_true",
                   help="apply zero-overlap replacements and write the refined corpus")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("refine", help="one expectation pass incl. judge and escalation")
    common(p)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("roc", help="ROC threshold selection + FP cleanup simulation")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--target", type=float, default=None, help="sensitivity target")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("run-loop", help="full EM loop")
    common(p)
    p.add_argument("--corpus", help="existing corpus dir (default: generate per config)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock timing in reports (breaks byte-reproducibility)")
    p.set_defaults(func=cmd_run_loop)

    p = sub.add_parser("evaluate", help="pseudo-vs-gold corpus metrics")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--no-nsd", action="store_true", help="skip surface-distance scores")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("review", help="interactive review of an escalation queue")
    p.add_argument("--queue", required=True)
    p.add_argument("--decisions", required=True, help="output decisions file (JSON lines)")
    p.add_argument("--allow-pipe", action="store_true",
                   help="accept scripted input instead of a terminal")
    p.set_defaults(func=cmd_review)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _INVARIANT_ERRORS as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except _IO_ERRORS as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
