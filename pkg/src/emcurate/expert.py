"""Projection-based annotation judging.

Candidate annotations are compared structure by structure on 2D front-view
projections, scored against anatomical priors (expected centroid region,
component count, vertical extent and elongation of the overlay silhouette).
A rule-based judge ships with the package; an external judge process can be
plugged in over a line-delimited JSON protocol and falls back to the
rule-based judge when the protocol misbehaves.
"""

from __future__ import annotations

import json
import logging
import subprocess
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ProtocolError, ShapeError
from .grid import (
    BACKGROUND,
    CaseRecord,
    LabelMap,
    Projection2D,
    StructureKind,
    VoxelGrid,
    front_view_projection,
    largest_component,
)

log = logging.getLogger(__name__)

TIE_EPSILON = 0.02
FACE = ndimage.generate_binary_structure(3, 1)


class Preference(str, Enum):
    FIRST = "first"
    SECOND = "second"
    TIE = "tie"

    def swapped(self) -> "Preference":
        if self is Preference.FIRST:
            return Preference.SECOND
        if self is Preference.SECOND:
            return Preference.FIRST
        return self


@dataclass(frozen=True)
class AnatomicalPrior:
    """Expected silhouette of one structure in the front-view projection.

    Geometric quantities are normalized to [0,1] over the projection plane;
    elongation is the height/width ratio of the overlay bounding box in mm.
    """

    label: int
    name: str
    prompt: str
    centroid_box: tuple[tuple[float, float], tuple[float, float]]  # (x range, z range)
    components: tuple[int, int]
    vertical_extent: tuple[float, float]
    elongation: tuple[float, float]
    weights: dict[str, float] = field(default_factory=dict)
    centroid_falloff: float = 0.15

    def __post_init__(self):
        for lo, hi in (*self.centroid_box, self.vertical_extent):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ConfigError(f"prior '{self.name}': normalized ranges must be ordered in [0,1]")
        if self.components[0] < 0 or self.components[1] < self.components[0]:
            raise ConfigError(f"prior '{self.name}': bad component range")
        if self.elongation[0] <= 0 or self.elongation[1] < self.elongation[0]:
            raise ConfigError(f"prior '{self.name}': bad elongation range")

    def weight(self, criterion: str) -> float:
        return float(self.weights.get(criterion, 1.0))


@dataclass(frozen=True)
class JudgeVerdict:
    preference: Preference
    score_first: float
    score_second: float
    rationale: dict[str, tuple[float, float]] = field(default_factory=dict)
    protocol_issue: bool = False  # tie produced by a judge timeout, not by scores
    scored: bool = True           # False when the judge reports no numeric scores


@dataclass(frozen=True)
class PairTally:
    """Per-structure verdicts of one champion-vs-challenger comparison;
    score_1 counts structures won by the challenger, score_2 by the champion."""

    champion: int
    challenger: int
    verdicts: dict[int, JudgeVerdict]
    score_1: int
    score_2: int

    @property
    def per_structure_votes(self) -> dict[int, Preference]:
        return {s: v.preference for s, v in self.verdicts.items()}


@dataclass(frozen=True)
class TournamentResult:
    winner: int
    rounds: tuple[PairTally, ...]

    @property
    def final_round(self) -> PairTally:
        return self.rounds[-1]

    @property
    def score_1(self) -> int:
        return self.final_round.score_1

    @property
    def score_2(self) -> int:
        return self.final_round.score_2

    @property
    def per_structure_votes(self) -> dict[int, Preference]:
        return self.final_round.per_structure_votes


def _interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 1.0


def _range_score(value: float, lo: float, hi: float) -> float:
    """1 inside [lo, hi], linear falloff with the relative distance outside."""
    if lo <= value <= hi:
        return 1.0
    gap = (lo - value) / lo if value < lo else (value - hi) / hi
    return max(0.0, 1.0 - gap)


def overlay_features(proj: Projection2D) -> Optional[dict]:
    overlay = proj.overlay
    if not overlay.any():
        return None
    nx, nz = overlay.shape
    ix, iz = np.nonzero(overlay)
    centroid = (float((ix + 0.5).mean() / nx), float((iz + 0.5).mean() / nz))
    comp, n_comp = ndimage.label(overlay, structure=np.ones((3, 3), dtype=bool))
    z_lo, z_hi = int(iz.min()), int(iz.max())
    x_lo, x_hi = int(ix.min()), int(ix.max())
    height_mm = (z_hi - z_lo + 1) * proj.spacing[1]
    width_mm = (x_hi - x_lo + 1) * proj.spacing[0]
    return {
        "centroid": centroid,
        "components": int(n_comp),
        "extent": (z_lo / nz, (z_hi + 1) / nz),
        "elongation": height_mm / width_mm,
    }


def score_overlay(prior: AnatomicalPrior, proj: Projection2D) -> float:
    """Weighted product of the per-criterion scores; an empty overlay scores 0."""
    feats = overlay_features(proj)
    if feats is None:
        return 0.0
    scores = criterion_scores(prior, feats)
    total = 1.0
    for criterion, s in scores.items():
        total *= s ** prior.weight(criterion)
    return float(total)


def criterion_scores(prior: AnatomicalPrior, feats: dict) -> dict[str, float]:
    (cx_lo, cx_hi), (cz_lo, cz_hi) = prior.centroid_box
    cx, cz = feats["centroid"]
    dx = max(cx_lo - cx, 0.0, cx - cx_hi)
    dz = max(cz_lo - cz, 0.0, cz - cz_hi)
    dist = float(np.hypot(dx, dz))
    s_centroid = max(0.0, 1.0 - dist / prior.centroid_falloff)

    n = feats["components"]
    lo, hi = prior.components
    s_comp = 1.0 if lo <= n <= hi else 1.0 / (1.0 + (lo - n if n < lo else n - hi))

    s_extent = _interval_iou(feats["extent"], prior.vertical_extent)
    s_elong = _range_score(feats["elongation"], *prior.elongation)
    return {"centroid": s_centroid, "components": s_comp,
            "extent": s_extent, "elongation": s_elong}


def judge_pair(volume: VoxelGrid, mask_a: np.ndarray, mask_b: np.ndarray,
               prior: AnatomicalPrior, tie_epsilon: float = TIE_EPSILON) -> JudgeVerdict:
    """Score two candidate masks against a prior; a score gap below
    tie_epsilon is a tie (absorbs projection quantization noise)."""
    proj_a = front_view_projection(volume, mask_a)
    proj_b = front_view_projection(volume, mask_b)
    score_a = score_overlay(prior, proj_a)
    score_b = score_overlay(prior, proj_b)
    if abs(score_a - score_b) < tie_epsilon:
        pref = Preference.TIE
    else:
        pref = Preference.FIRST if score_a > score_b else Preference.SECOND
    feats_a = overlay_features(proj_a)
    feats_b = overlay_features(proj_b)
    rationale = {}
    if feats_a is not None and feats_b is not None:
        sa = criterion_scores(prior, feats_a)
        sb = criterion_scores(prior, feats_b)
        rationale = {k: (sa[k], sb[k]) for k in sa}
    return JudgeVerdict(preference=pref, score_first=score_a, score_second=score_b,
                        rationale=rationale)


class RuleBasedJudge:
    """Deterministic judge comparing overlays against the prior table."""

    def __init__(self, priors: dict[int, AnatomicalPrior], tie_epsilon: float = TIE_EPSILON):
        self.priors = priors
        self.tie_epsilon = tie_epsilon

    def compare(self, case_id: str, structure: int, volume: VoxelGrid,
                mask_a: np.ndarray, mask_b: np.ndarray) -> JudgeVerdict:
        prior = self.priors.get(structure)
        if prior is None:
            raise ConfigError(f"no anatomical prior for structure {structure}")
        return judge_pair(volume, mask_a, mask_b, prior, self.tie_epsilon)


def shape_cleanup(label_map: LabelMap, organ_connectivity: int = 26,
                  tumor_connectivity: int = 6) -> LabelMap:
    """Largest-component retention plus one-voxel morphological closing per
    structure (closing only claims background voxels)."""
    labels = label_map.labels.copy()
    catalog = label_map.catalog
    for entry in catalog.entries:
        s = entry.label
        mask = labels == s
        if not mask.any():
            continue
        conn = tumor_connectivity if entry.kind is StructureKind.TUMOR else organ_connectivity
        kept = largest_component(mask, conn)
        labels[mask & ~kept] = BACKGROUND
        closed = ndimage.binary_closing(kept, structure=FACE)
        labels[closed & (labels == BACKGROUND)] = s
    return label_map.with_labels(labels)


def run_tournament(case: CaseRecord, candidates: Sequence[LabelMap], judge,
                   structures: Optional[Sequence[int]] = None
                   ) -> tuple[TournamentResult, LabelMap]:
    """Sequential pairwise elimination among candidate label maps.

    The current champion (initially candidates[0], the incumbent) meets each
    following candidate; per structure the judge votes, votes are tallied,
    and the challenger takes over only when its tally strictly exceeds the
    champion's - ties keep the incumbent. The selected map is always one of
    the inputs.
    """
    if len(candidates) < 2:
        raise ShapeError("tournament requires at least two candidates")
    if structures is None:
        structures = candidates[0].catalog.labels
    champion = 0
    rounds: list[PairTally] = []
    for challenger in range(1, len(candidates)):
        verdicts: dict[int, JudgeVerdict] = {}
        score_challenger = 0
        score_champion = 0
        for s in structures:
            verdict = judge.compare(case.case_id, s, case.volume,
                                    candidates[challenger].labels == s,
                                    candidates[champion].labels == s)
            verdicts[s] = verdict
            if verdict.preference is Preference.FIRST:
                score_challenger += 1
            elif verdict.preference is Preference.SECOND:
                score_champion += 1
        rounds.append(PairTally(champion=champion, challenger=challenger,
                                verdicts=verdicts,
                                score_1=score_challenger, score_2=score_champion))
        if score_challenger > score_champion:
            champion = challenger
    result = TournamentResult(winner=champion, rounds=tuple(rounds))
    return result, candidates[champion]


# ---------------------------------------------------------------------------
# external judge protocol


def rle_encode(overlay: np.ndarray) -> str:
    """Run-length encode a boolean overlay, row-major (z rows, x fastest),
    as space-separated value:count tokens, e.g. '0:5 1:3 0:8'."""
    flat = np.asarray(overlay, dtype=np.uint8).T.ravel()
    if flat.size == 0:
        return ""
    change = np.nonzero(np.diff(flat))[0]
    starts = np.concatenate([[0], change + 1])
    ends = np.concatenate([change + 1, [flat.size]])
    return " ".join(f"{int(flat[s])}:{int(e - s)}" for s, e in zip(starts, ends))


def rle_decode(encoded: str, width: int, height: int) -> np.ndarray:
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    for token in encoded.split():
        value, count = token.split(":")
        n = int(count)
        if int(value):
            flat[pos:pos + n] = True
        pos += n
    if pos != width * height:
        raise ProtocolError(f"RLE covers {pos} pixels, expected {width * height}")
    return flat.reshape(height, width).T


@dataclass(frozen=True)
class JudgePairRequest:
    id: str
    structure: str
    prompt: str
    overlay_a_rle: str
    overlay_b_rle: str
    width: int
    height: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, separators=(",", ":"))


class ExternalJudge:
    """Adapter for an external judge over newline-delimited JSON on the
    child process' standard streams.

    Requests carry the structure name, its prompt text and both overlays
    run-length encoded; the response echoes the request id with a preference
    of "first", "second" or "tie". A timeout yields a tie with a warning;
    a malformed response raises ProtocolError so the caller can fall back
    to the rule-based judge.
    """

    def __init__(self, command: Sequence[str], priors: dict[int, AnatomicalPrior],
                 timeout_s: float = 10.0):
        self.command = list(command)
        self.priors = priors
        self.timeout_s = timeout_s
        self._proc: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()
        self._counter = 0

    def _ensure_proc(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        return self._proc

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        self._proc = None

    def _read_line(self, proc: subprocess.Popen) -> Optional[str]:
        box: list[Optional[str]] = [None]

        def reader():
            box[0] = proc.stdout.readline()

        t = threading.Thread(target=reader, daemon=True)
        t.start()
        t.join(self.timeout_s)
        if t.is_alive():
            return None
        return box[0]

    def compare(self, case_id: str, structure: int, volume: VoxelGrid,
                mask_a: np.ndarray, mask_b: np.ndarray) -> JudgeVerdict:
        prior = self.priors.get(structure)
        if prior is None:
            raise ConfigError(f"no anatomical prior for structure {structure}")
        proj_a = front_view_projection(volume, mask_a)
        proj_b = front_view_projection(volume, mask_b)
        nx, nz = proj_a.overlay.shape
        with self._lock:
            self._counter += 1
            request = JudgePairRequest(
                id=f"{case_id}/{structure}/{self._counter}",
                structure=prior.name, prompt=prior.prompt,
                overlay_a_rle=rle_encode(proj_a.overlay),
                overlay_b_rle=rle_encode(proj_b.overlay),
                width=nx, height=nz)
            proc = self._ensure_proc()
            try:
                proc.stdin.write(request.to_json() + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolError(f"judge process unavailable: {exc}") from exc
            line = self._read_line(proc)
        if line is None:
            log.warning("external judge timed out on %s; treating as tie", request.id)
            return JudgeVerdict(preference=Preference.TIE, score_first=0.0, score_second=0.0,
                                protocol_issue=True, scored=False)
        try:
            payload = json.loads(line)
            if payload.get("id") != request.id:
                raise ValueError(f"response id {payload.get('id')!r} != {request.id!r}")
            pref = Preference(payload["preference"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed judge response {line!r}: {exc}") from exc
        return JudgeVerdict(preference=pref, score_first=0.0, score_second=0.0,
                            scored=False)


class FallbackJudge:
    """External judge with automatic fallback to the rule-based judge on
    protocol errors (the failure is logged and counted)."""

    def __init__(self, primary: ExternalJudge, fallback: RuleBasedJudge):
        self.primary = primary
        self.fallback = fallback
        self.protocol_failures = 0

    def compare(self, case_id: str, structure: int, volume: VoxelGrid,
                mask_a: np.ndarray, mask_b: np.ndarray) -> JudgeVerdict:
        try:
            return self.primary.compare(case_id, structure, volume, mask_a, mask_b)
        except ProtocolError as exc:
            self.protocol_failures += 1
            log.warning("external judge failed (%s); falling back to rule-based judge", exc)
            return self.fallback.compare(case_id, structure, volume, mask_a, mask_b)
