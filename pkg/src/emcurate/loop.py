"""EM orchestration: audit-driven expectation passes, data-mix maximization
passes, escalation bookkeeping, convergence tracking and run persistence.

One iteration audits every (case, structure) pair against the current model,
applies zero-overlap replacements automatically, routes low-agreement
structures through the projection judge, escalates unresolvable ones to a
human oracle, then refits the model on a mix of refined, synthetic and
hard-case data with an optional gold-subset annealing pass.

Within an iteration case-level work may run on a thread pool; results are
merged in case order and all randomness is derived from (seed, iteration,
case, structure), so outputs are byte-identical regardless of thread count.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .expert import Preference, rle_decode, rle_encode, run_tournament, shape_cleanup
from .grid import BACKGROUND, CaseRecord
from .metrics import dsc
from .phantom import PhantomSource
from .verifier import (
    AuditAction,
    AuditOutcome,
    ChangeLogEntry,
    GaussianIntensityModel,
    audit_case,
    apply_update_rule,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EMConfig:
    max_iterations: int = 4
    auto_replace_dsc: float = 0.0
    route_dsc: float = 0.5
    escalation_budget_fraction: float = 0.05
    convergence_epsilon: float = 1e-4
    convergence_mode: str = "gold"  # "gold" | "changes"
    data_mix: tuple[float, float, float] = (0.7, 0.2, 0.1)  # labeled, synthetic, selective
    annealing_enabled: bool = True
    annealing_weight: float = 5.0
    low_confidence_floor: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if abs(sum(self.data_mix) - 1.0) > 1e-9 or any(f < 0 for f in self.data_mix):
            raise ConfigError("data_mix fractions must be nonnegative and sum to 1")
        if not 0.0 < self.escalation_budget_fraction < 1.0:
            raise ConfigError("escalation budget must lie in (0, 1)")
        for name in ("auto_replace_dsc", "route_dsc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.convergence_mode not in ("gold", "changes"):
            raise ConfigError("convergence_mode must be 'gold' or 'changes'")


class EscalationReason(str, Enum):
    EXPERT_TIE = "expert_tie"
    LOW_CONFIDENCE = "low_confidence"
    PROTOCOL_FAILURE = "protocol_failure"


@dataclass
class EscalationEntry:
    case_id: str
    structure: int
    reason: EscalationReason
    candidates: Optional[list[np.ndarray]] = None  # 3D masks, incumbent first
    overlays: Optional[list[np.ndarray]] = None    # 2D front-view silhouettes
    width: int = 0
    height: int = 0

    def key(self) -> tuple[str, int]:
        return (self.case_id, self.structure)

    def materialize_overlays(self) -> None:
        if self.overlays is None and self.candidates is not None:
            self.overlays = [c.any(axis=1) for c in self.candidates]
            nx, nz = self.overlays[0].shape
            self.width, self.height = nx, nz


@dataclass(frozen=True)
class ReviewDecision:
    case_id: str
    structure: int
    chosen: Optional[int]  # candidate index; None = skipped/unresolved
    source: str

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "structure": self.structure,
                "chosen": self.chosen, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewDecision":
        return cls(d["case_id"], int(d["structure"]), d["chosen"], d["source"])


@dataclass
class EscalationQueue:
    entries: list[EscalationEntry] = field(default_factory=list)
    resolved: dict[tuple[str, int], ReviewDecision] = field(default_factory=dict)

    @property
    def unresolved(self) -> list[EscalationEntry]:
        return [e for e in self.entries
                if self.resolved.get(e.key()) is None
                or self.resolved[e.key()].chosen is None]

    def save(self, path: Union[str, Path]) -> None:
        rows = []
        for e in self.entries:
            overlays = e.overlays or []
            rows.append({
                "case_id": e.case_id, "structure": e.structure, "reason": e.reason.value,
                "width": e.width, "height": e.height,
                "overlays": [rle_encode(o) for o in overlays],
            })
        payload = {"schema_version": SCHEMA_VERSION, "entries": rows}
        Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EscalationQueue":
        payload = json.loads(Path(path).read_text())
        queue = cls()
        for row in payload["entries"]:
            overlays = [rle_decode(o, row["width"], row["height"]) for o in row["overlays"]]
            queue.entries.append(EscalationEntry(
                case_id=row["case_id"], structure=int(row["structure"]),
                reason=EscalationReason(row["reason"]), overlays=overlays,
                width=int(row["width"]), height=int(row["height"])))
        return queue


class HumanOracle(Protocol):
    def review(self, case: CaseRecord, structure: int,
               candidates: Sequence[np.ndarray], context: str) -> Optional[int]: ...


def _context_rng(seed: int, context: str) -> np.random.Generator:
    digest = hashlib.sha256(context.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


class SimulatedExpert:
    """Stand-in reviewer: picks the gold-closest candidate with probability
    `accuracy`, otherwise one of the others; deterministic given the seed."""

    def __init__(self, accuracy: float = 0.9, seed: int = 0):
        if not 0.0 <= accuracy <= 1.0:
            raise ConfigError("accuracy must lie in [0, 1]")
        self.accuracy = accuracy
        self.seed = seed

    def review(self, case: CaseRecord, structure: int,
               candidates: Sequence[np.ndarray], context: str) -> Optional[int]:
        if case.gold is None:
            return None
        gold_mask = case.gold.labels == structure
        scores = [dsc(c, gold_mask) for c in candidates]
        best = int(np.argmax(scores))
        rng = _context_rng(self.seed, context)
        if rng.random() < self.accuracy or len(candidates) == 1:
            return best
        others = [i for i in range(len(candidates)) if i != best]
        return others[int(rng.integers(0, len(others)))]


class TieKeeperOracle:
    """Always keeps the incumbent; never consults gold (no-gold deployments)."""

    def review(self, case: CaseRecord, structure: int,
               candidates: Sequence[np.ndarray], context: str) -> Optional[int]:
        return 0


class InteractiveCliOracle:
    """Inline terminal review during a run: renders the candidates' front
    views and prompts 1/2/skip. Skipping leaves the entry unresolved."""

    def __init__(self, input_fn: Optional[Callable[[str], str]] = None,
                 print_fn: Callable[[str], None] = print):
        self.input_fn = input_fn
        self.print_fn = print_fn

    def review(self, case: CaseRecord, structure: int,
               candidates: Sequence[np.ndarray], context: str) -> Optional[int]:
        ask = self.input_fn if self.input_fn is not None else input
        self.print_fn(f"review {context}: case {case.case_id}, structure {structure}")
        for i, mask in enumerate(candidates):
            self.print_fn(f"--- candidate {i + 1} ---")
            self.print_fn(render_overlay_ascii(mask.any(axis=1)))
        while True:
            answer = ask("choose 1/2/skip> ").strip().lower()
            if answer in ("1", "2"):
                return int(answer) - 1
            if answer in ("s", "skip", ""):
                return None
            self.print_fn("please answer 1, 2 or skip")


@dataclass
class ExpectationStats:
    structures_audited: int = 0
    n_keep: int = 0
    n_auto_replace: int = 0
    n_route: int = 0
    n_tournament_decided: int = 0
    n_escalated: int = 0
    n_auto_resolved: int = 0
    n_unresolved: int = 0
    changed_structures: int = 0
    per_case_audit_dsc: dict[str, float] = field(default_factory=dict)
    all_changes: list[ChangeLogEntry] = field(default_factory=list)

    @property
    def escalation_fraction(self) -> float:
        if self.structures_audited == 0:
            return 0.0
        return self.n_escalated / self.structures_audited

    @property
    def change_fraction(self) -> float:
        if self.structures_audited == 0:
            return 0.0
        return self.changed_structures / self.structures_audited


@dataclass
class IterationReport:
    iteration: int
    counts: dict[str, int]
    escalation_fraction: float
    budget_breached: bool
    change_fraction: float
    model_snapshot_id: str
    mean_dsc_vs_gold: Optional[float] = None
    per_structure_dsc_vs_gold: Optional[dict[int, dict[str, float]]] = None
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "iteration": self.iteration,
            "counts": self.counts,
            "escalation_fraction": self.escalation_fraction,
            "budget_breached": self.budget_breached,
            "change_fraction": self.change_fraction,
            "model_snapshot_id": self.model_snapshot_id,
            "mean_dsc_vs_gold": self.mean_dsc_vs_gold,
            "per_structure_dsc_vs_gold":
                None if self.per_structure_dsc_vs_gold is None else
                {str(k): v for k, v in self.per_structure_dsc_vs_gold.items()},
        }
        if include_timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d


def ordered_parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    """Apply fn to items, preserving input order regardless of thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class _CaseResult:
    case: CaseRecord
    changes: list[ChangeLogEntry]
    escalations: list[EscalationEntry]
    outcome: AuditOutcome
    n_keep: int = 0
    n_auto: int = 0
    n_route: int = 0
    n_decided: int = 0
    n_auto_resolved: int = 0
    n_changed: int = 0  # structures whose voxels actually changed


def _write_structure_mask(labels: np.ndarray, structure: int, mask: np.ndarray,
                          tumor_labels: set[int]) -> int:
    """Replace one structure's voxels by `mask` under the label-precedence
    rule; returns the number of conflicting voxels encountered."""
    labels[labels == structure] = BACKGROUND
    if structure in tumor_labels or not tumor_labels:
        blocked = np.zeros_like(mask)
    else:
        blocked = np.isin(labels, list(tumor_labels))
    occupied = labels != BACKGROUND
    conflicts = int(np.count_nonzero(mask & (occupied | blocked)))
    labels[mask & ~blocked] = structure
    return conflicts


def _expectation_case(case: CaseRecord, model, judge, cfg: EMConfig) -> _CaseResult:
    outcome = audit_case(model, case, cfg.auto_replace_dsc, cfg.route_dsc)
    updated, changes = apply_update_rule(case, outcome)
    routed = sorted(outcome.actions(AuditAction.ROUTE_TO_EXPERT))
    n_auto = len(outcome.actions(AuditAction.AUTO_REPLACE))
    result = _CaseResult(
        case=updated, changes=list(changes), escalations=[], outcome=outcome,
        n_keep=len(outcome.actions(AuditAction.KEEP)),
        n_auto=n_auto, n_route=len(routed),
        n_changed=n_auto)  # a zero-overlap replacement always changes voxels
    if not routed:
        return result

    catalog = updated.pseudo.catalog
    tumor_labels = set(catalog.tumor_labels)
    incumbent = shape_cleanup(updated.pseudo)
    challenger = outcome.prediction
    tournament, _selected = run_tournament(updated, [incumbent, challenger], judge,
                                           structures=routed)
    verdicts = tournament.final_round.verdicts
    labels = updated.pseudo.labels.copy()
    for s in routed:
        verdict = verdicts[s]
        incumbent_mask = incumbent.labels == s
        challenger_mask = challenger.labels == s
        if verdict.preference is Preference.TIE and \
                np.array_equal(incumbent_mask, challenger_mask):
            before = int(np.count_nonzero(labels == s))
            changed = not np.array_equal(labels == s, incumbent_mask)
            _write_structure_mask(labels, s, incumbent_mask, tumor_labels)
            result.n_auto_resolved += 1
            result.changes.append(ChangeLogEntry(
                case.case_id, s, "expert_auto_resolved", before,
                int(np.count_nonzero(labels == s))))
            result.n_changed += int(changed)
            continue
        # verdicts with both scores under the floor are uninformative, tie
        # or not: neither candidate resembles the expected anatomy
        low_confidence = (verdict.scored
                          and max(verdict.score_first, verdict.score_second)
                          < cfg.low_confidence_floor)
        if low_confidence or verdict.preference is Preference.TIE:
            if low_confidence:
                reason = EscalationReason.LOW_CONFIDENCE
            elif verdict.protocol_issue:
                reason = EscalationReason.PROTOCOL_FAILURE
            else:
                reason = EscalationReason.EXPERT_TIE
            result.escalations.append(EscalationEntry(
                case_id=case.case_id, structure=s, reason=reason,
                candidates=[incumbent_mask, challenger_mask]))
            continue
        chosen = challenger_mask if verdict.preference is Preference.FIRST else incumbent_mask
        action = "expert_replace" if verdict.preference is Preference.FIRST else "expert_keep"
        before = int(np.count_nonzero(labels == s))
        changed = not np.array_equal(labels == s, chosen)
        conflicts = _write_structure_mask(labels, s, chosen, tumor_labels)
        result.n_decided += 1
        result.n_changed += int(changed)
        result.changes.append(ChangeLogEntry(
            case.case_id, s, action, before, int(np.count_nonzero(labels == s)),
            conflicts=conflicts))
    result.case = updated.with_pseudo(updated.pseudo.with_labels(labels))
    return result


def expectation_pass(corpus: Sequence[CaseRecord], model, judge, oracle: HumanOracle,
                     cfg: EMConfig, iteration: int = 1, threads: int = 1
                     ) -> tuple[list[CaseRecord], EscalationQueue, ExpectationStats]:
    """One full audit/repair sweep over the corpus.

    Per case: audit against the model, apply zero-overlap replacements, route
    low-agreement structures through the judge, and escalate per-structure
    ties to the oracle. Escalations are resolved serially in case order so
    results do not depend on the thread count.
    """
    results = ordered_parallel_map(
        lambda case: _expectation_case(case, model, judge, cfg), list(corpus), threads)

    stats = ExpectationStats()
    queue = EscalationQueue()
    updated_corpus: list[CaseRecord] = []
    for result in results:
        stats.structures_audited += len(result.outcome.per_structure)
        stats.n_keep += result.n_keep
        stats.n_auto_replace += result.n_auto
        stats.n_route += result.n_route
        stats.n_tournament_decided += result.n_decided
        stats.n_auto_resolved += result.n_auto_resolved
        stats.per_case_audit_dsc[result.case.case_id] = result.outcome.mean_dsc

        case = result.case
        tumor_labels = set(case.pseudo.catalog.tumor_labels)
        for entry in result.escalations:
            stats.n_escalated += 1
            queue.entries.append(entry)
            context = f"{iteration}:{entry.case_id}:{entry.structure}"
            try:
                chosen = oracle.review(case, entry.structure, entry.candidates, context)
            except Exception:
                chosen = None
            if chosen is None:
                stats.n_unresolved += 1
                queue.resolved[entry.key()] = ReviewDecision(
                    entry.case_id, entry.structure, None, type(oracle).__name__)
                continue
            queue.resolved[entry.key()] = ReviewDecision(
                entry.case_id, entry.structure, int(chosen), type(oracle).__name__)
            labels = case.pseudo.labels.copy()
            before = int(np.count_nonzero(labels == entry.structure))
            changed = not np.array_equal(labels == entry.structure,
                                         entry.candidates[int(chosen)])
            _write_structure_mask(labels, entry.structure,
                                  entry.candidates[int(chosen)], tumor_labels)
            case = case.with_pseudo(case.pseudo.with_labels(labels))
            result.n_changed += int(changed)
            result.changes.append(ChangeLogEntry(
                entry.case_id, entry.structure, f"escalated_{int(chosen)}",
                before, int(np.count_nonzero(labels == entry.structure))))
        stats.changed_structures += result.n_changed
        stats.all_changes.extend(result.changes)
        updated_corpus.append(case)

    return updated_corpus, queue, stats


def maximization_pass(corpus: Sequence[CaseRecord], cfg: EMConfig,
                      loss_proxy: Optional[dict[str, float]] = None,
                      phantom_source: Optional[PhantomSource] = None,
                      iteration: int = 1,
                      organ_connectivity: int = 26,
                      tumor_connectivity: int = 6,
                      tumor_min_component_voxels: int = 20) -> GaussianIntensityModel:
    """Refit the model on the data mix, with optional gold-subset annealing.

    The training multiset is: a deterministic sample of round(labeled*N)
    refined cases, round(synthetic*N) freshly generated clean phantoms, and
    ceil(selective*N) extra copies of the case with the worst audit agreement
    (loss proxy 1 - mean audit DSC). Annealing appends each is_gold case with
    elevated weight.
    """
    if len(corpus) == 0:
        raise ConfigError("maximization requires a nonempty corpus")
    n = len(corpus)
    f_lab, f_syn, f_sel = cfg.data_mix
    n_lab = round(f_lab * n)
    n_syn = round(f_syn * n)
    n_sel = math.ceil(f_sel * n) if f_sel > 0 else 0

    train: list[CaseRecord] = []
    weights: list[float] = []

    if n_lab >= n:
        chosen = list(range(n))
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, iteration, 1]))
        chosen = sorted(rng.choice(n, size=n_lab, replace=False).tolist())
    for i in chosen:
        train.append(corpus[i])
        weights.append(1.0)

    if n_syn > 0:
        if phantom_source is None:
            raise ConfigError("synthetic fraction > 0 requires a phantom source")
        for j in range(n_syn):
            ss = np.random.SeedSequence([cfg.seed, iteration, 2, j])
            train.append(phantom_source.sample(ss, case_id=f"synth_{iteration:02d}_{j:04d}"))
            weights.append(1.0)

    if n_sel > 0 and loss_proxy:
        worst_id = max(sorted(loss_proxy), key=lambda cid: 1.0 - loss_proxy[cid])
        worst = next(c for c in corpus if c.case_id == worst_id)
        for _ in range(n_sel):
            train.append(worst)
            weights.append(1.0)

    if cfg.annealing_enabled:
        gold_cases = [c for c in corpus if c.meta.is_gold]
        if not gold_cases:
            import logging
            logging.getLogger(__name__).warning(
                "annealing enabled but corpus has no gold cases; skipping")
        else:
            for c in gold_cases:
                train.append(c)
                weights.append(cfg.annealing_weight)

    model = GaussianIntensityModel(corpus[0].pseudo.catalog,
                                   organ_connectivity, tumor_connectivity,
                                   tumor_min_component_voxels)
    model.fit(train, weights)
    return model


def _gold_metrics(corpus: Sequence[CaseRecord]) -> tuple[Optional[float], Optional[dict]]:
    cases = [c for c in corpus if c.gold is not None]
    if not cases:
        return None, None
    catalog = cases[0].pseudo.catalog
    per_structure: dict[int, dict[str, float]] = {}
    all_scores = []
    for s in catalog.labels:
        scores = [dsc(c.pseudo.labels == s, c.gold.labels == s) for c in cases]
        all_scores.extend(scores)
        per_structure[s] = {"mean": float(np.mean(scores)), "median": float(np.median(scores))}
    return float(np.mean(all_scores)), per_structure


class RunRecorder:
    """Persists a run directory: config snapshot, per-iteration reports,
    model snapshots, change logs and escalation resolutions. Timing is kept
    out of the artifacts by default so identical runs are byte-identical."""

    def __init__(self, out_dir: Union[str, Path], include_timing: bool = False):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.include_timing = include_timing

    def _dump(self, name: str, obj) -> None:
        path = self.out_dir / name
        path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")

    def config_snapshot(self, config: dict) -> None:
        self._dump("config_snapshot.json", {"schema_version": SCHEMA_VERSION, **config})

    def model_snapshot(self, iteration: int, model: GaussianIntensityModel) -> str:
        snapshot = model.to_dict()
        blob = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
        snapshot_id = hashlib.sha256(blob.encode()).hexdigest()[:12]
        self._dump(f"model_{iteration:03d}.json", snapshot)
        return snapshot_id

    def iteration_report(self, report: IterationReport) -> None:
        self._dump(f"iteration_{report.iteration:03d}.json",
                   report.to_dict(self.include_timing))

    def changes(self, iteration: int, entries: Sequence[ChangeLogEntry]) -> None:
        path = self.out_dir / f"changes_{iteration:03d}.jsonl"
        with path.open("w") as fh:
            for e in entries:
                fh.write(json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")

    def resolutions(self, iteration: int, queue: EscalationQueue) -> None:
        path = self.out_dir / "resolutions.jsonl"
        with path.open("a") as fh:
            for entry in queue.entries:
                decision = queue.resolved.get(entry.key())
                row = {"iteration": iteration, "reason": entry.reason.value}
                row.update(decision.to_dict() if decision else
                           {"case_id": entry.case_id, "structure": entry.structure,
                            "chosen": None, "source": None})
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    def summary(self, obj: dict) -> None:
        self._dump("summary.json", {"schema_version": SCHEMA_VERSION, **obj})


def run_em(corpus: Sequence[CaseRecord], cfg: EMConfig, judge, oracle: HumanOracle,
           phantom_source: Optional[PhantomSource] = None,
           recorder: Optional[RunRecorder] = None, threads: int = 1,
           organ_connectivity: int = 26, tumor_connectivity: int = 6,
           tumor_min_component_voxels: int = 20
           ) -> tuple[list[CaseRecord], GaussianIntensityModel, list[IterationReport]]:
    """Alternate expectation and maximization passes until convergence.

    Stops at max_iterations or when the convergence metric (mean DSC vs gold,
    or the fraction of changed structures in no-gold mode) improves by less
    than convergence_epsilon. Deterministic given corpus, config and seed.
    """
    corpus = list(corpus)
    model = GaussianIntensityModel(corpus[0].pseudo.catalog,
                                   organ_connectivity, tumor_connectivity,
                                   tumor_min_component_voxels)
    model.fit(corpus)
    reports: list[IterationReport] = []
    if recorder is not None:
        recorder.model_snapshot(0, model)
    if cfg.max_iterations == 0:
        return corpus, model, reports

    prev_metric, _ = _gold_metrics(corpus) if cfg.convergence_mode == "gold" else (None, None)
    for iteration in range(1, cfg.max_iterations + 1):
        started = time.perf_counter()
        corpus, queue, stats = expectation_pass(corpus, model, judge, oracle, cfg,
                                                iteration=iteration, threads=threads)
        model = maximization_pass(corpus, cfg, stats.per_case_audit_dsc, phantom_source,
                                  iteration=iteration,
                                  organ_connectivity=organ_connectivity,
                                  tumor_connectivity=tumor_connectivity,
                                  tumor_min_component_voxels=tumor_min_component_voxels)
        snapshot_id = recorder.model_snapshot(iteration, model) if recorder else ""
        mean_gold, per_structure = (None, None)
        if cfg.convergence_mode == "gold" or any(c.gold is not None for c in corpus):
            mean_gold, per_structure = _gold_metrics(corpus)
        report = IterationReport(
            iteration=iteration,
            counts={"keep": stats.n_keep, "auto_replace": stats.n_auto_replace,
                    "route": stats.n_route, "escalate": stats.n_escalated,
                    "tournament_decided": stats.n_tournament_decided,
                    "auto_resolved": stats.n_auto_resolved,
                    "unresolved": stats.n_unresolved,
                    "structures_audited": stats.structures_audited},
            escalation_fraction=stats.escalation_fraction,
            budget_breached=stats.escalation_fraction > cfg.escalation_budget_fraction,
            change_fraction=stats.change_fraction,
            model_snapshot_id=snapshot_id,
            mean_dsc_vs_gold=mean_gold,
            per_structure_dsc_vs_gold=per_structure,
            wall_clock_s=time.perf_counter() - started,
        )
        reports.append(report)
        if recorder is not None:
            recorder.iteration_report(report)
            recorder.changes(iteration, stats.all_changes)
            recorder.resolutions(iteration, queue)

        if cfg.convergence_mode == "gold" and mean_gold is not None:
            if prev_metric is not None and mean_gold - prev_metric < cfg.convergence_epsilon:
                break
            prev_metric = mean_gold
        elif cfg.convergence_mode == "changes":
            if stats.change_fraction < cfg.convergence_epsilon:
                break
    return corpus, model, reports


# ---------------------------------------------------------------------------
# interactive review


def render_overlay_ascii(overlay: np.ndarray, on: str = "#", off: str = ".") -> str:
    """ASCII front view: x across, z up (superior row first)."""
    nx, nz = overlay.shape
    rows = []
    for z in range(nz - 1, -1, -1):
        rows.append("".join(on if overlay[x, z] else off for x in range(nx)))
    return "\n".join(rows)


def interactive_review(queue: EscalationQueue,
                       input_fn: Optional[Callable[[str], str]] = None,
                       print_fn: Callable[[str], None] = print,
                       require_tty: bool = False) -> list[ReviewDecision]:
    """Prompt 1/2/skip for each escalated entry; skipped entries stay unresolved."""
    if not queue.entries:
        raise ShapeError("escalation queue is empty")
    if require_tty:
        import sys
        if not sys.stdin.isatty():
            raise ConfigError("interactive review needs a terminal; "
                              "use the simulated expert oracle in batch runs")
    if input_fn is None:
        input_fn = input  # late binding so test harnesses can patch builtins
    decisions: list[ReviewDecision] = []
    for entry in queue.entries:
        overlays = entry.overlays
        if overlays is None and entry.candidates is not None:
            overlays = [c.any(axis=1) for c in entry.candidates]
        print_fn(f"case {entry.case_id}  structure {entry.structure}  "
                 f"[{entry.reason.value}]")
        for i, overlay in enumerate(overlays or []):
            print_fn(f"--- candidate {i + 1} ---")
            print_fn(render_overlay_ascii(overlay))
        while True:
            answer = input_fn("choose 1/2/skip> ").strip().lower()
            if answer in ("1", "2"):
                decision = ReviewDecision(entry.case_id, entry.structure,
                                          int(answer) - 1, "interactive")
                break
            if answer in ("s", "skip", ""):
                decision = ReviewDecision(entry.case_id, entry.structure, None, "interactive")
                break
            print_fn("please answer 1, 2 or skip")
        decisions.append(decision)
        queue.resolved[entry.key()] = decision
    return decisions


def save_decisions(path: Union[str, Path], decisions: Sequence[ReviewDecision]) -> None:
    with Path(path).open("w") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def load_decisions(path: Union[str, Path]) -> list[ReviewDecision]:
    decisions = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                decisions.append(ReviewDecision.from_dict(json.loads(line)))
    return decisions
