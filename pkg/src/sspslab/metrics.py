"""Verification and clustering metrics.

EER follows the NIST-style sweep: false-acceptance and false-rejection
rates are evaluated at every distinct score (a trial is accepted when its
score is >= the threshold) and the crossing is located by linear
interpolation between the two adjacent operating points, so golden values
are stable. minDCF is the minimum normalized detection cost over the same
sweep including the accept-all and reject-all endpoints, which bounds the
normalized cost by 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import pairwise_cosine_normalized
from .ssps import AuditRow
from .synthdata import UtteranceRecord


@dataclass(frozen=True)
class ScoredTrial:
    score: float
    is_target: bool


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if self.p_target <= 0.0 or self.p_target >= 1.0:
            raise ValueError("p_target must lie in (0, 1)")
        if self.c_miss <= 0.0 or self.c_fa <= 0.0:
            raise ValueError("costs must be positive")


def _split_scores(trials) -> tuple[np.ndarray, np.ndarray]:
    tar = np.array([t.score for t in trials if t.is_target], dtype=np.float64)
    non = np.array([t.score for t in trials if not t.is_target], dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return tar, non


def _roc_points(tar: np.ndarray, non: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, FRR) at thresholds -inf, each distinct score, +inf."""
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    thresholds = np.unique(np.concatenate([tar_sorted, non_sorted]))
    far = [1.0]
    frr = [0.0]
    for t in thresholds:
        far.append((non_sorted.size - np.searchsorted(non_sorted, t, side="left")) / non_sorted.size)
        frr.append(np.searchsorted(tar_sorted, t, side="left") / tar_sorted.size)
    far.append(0.0)
    frr.append(1.0)
    return np.array(far), np.array(frr)


def eer(trials) -> float:
    """Equal error rate via linear interpolation at the FAR/FRR crossing."""
    tar, non = _split_scores(trials)
    far, frr = _roc_points(tar, non)
    diff = frr - far
    j = int(np.flatnonzero(diff > 0.0)[0]) - 1  # diff starts at -1 and ends at +1
    if diff[j] == 0.0:
        return float(far[j])
    lam = (far[j] - frr[j]) / ((frr[j + 1] - frr[j]) - (far[j + 1] - far[j]))
    return float(far[j] + lam * (far[j + 1] - far[j]))


def min_dcf(trials, params: DcfParams = DcfParams()) -> float:
    """Minimum detection cost, normalized by the best uninformative system."""
    tar, non = _split_scores(trials)
    far, frr = _roc_points(tar, non)
    cost = params.c_miss * params.p_target * frr + params.c_fa * (1.0 - params.p_target) * far
    norm = min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))
    return float(cost.min() / norm)


def score_trials(representations: np.ndarray, trials) -> list[ScoredTrial]:
    """Cosine-score a trial list against l2-normalized representations."""
    reps = np.asarray(representations, dtype=np.float64)
    reps = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    out = []
    for t in trials:
        score = float(np.clip(reps[t.enroll_index] @ reps[t.test_index], -1.0, 1.0))
        out.append(ScoredTrial(score=score, is_target=t.is_target))
    return out


def pseudo_positive_accuracy(
    audit_rows: list[AuditRow],
    records: list[UtteranceRecord],
) -> tuple[float, float]:
    """Fractions of non-fallback decisions matching the anchor's speaker / recording."""
    same_spk = 0
    same_rec = 0
    n = 0
    for row in audit_rows:
        if row.fallback:
            continue
        anchor = records[row.anchor]
        pos = records[row.pos_index]
        same_spk += int(pos.speaker_id == anchor.speaker_id)
        same_rec += int(pos.recording_id == anchor.recording_id)
        n += 1
    if n == 0:
        raise ValueError("no non-fallback sampling decisions to score")
    return same_spk / n, same_rec / n


def _entropy(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(u, v) -> float:
    """Normalized mutual information, 2 I(U;V) / (H(U) + H(V)), natural logs."""
    ua = np.asarray(u)
    va = np.asarray(v)
    if ua.shape != va.shape or ua.ndim != 1:
        raise ValueError("assignments must be 1-D arrays of equal length")
    _, ui = np.unique(ua, return_inverse=True)
    _, vi = np.unique(va, return_inverse=True)
    n_u = int(ui.max()) + 1
    n_v = int(vi.max()) + 1
    table = np.zeros((n_u, n_v))
    np.add.at(table, (ui, vi), 1.0)
    n = table.sum()
    h_u = _entropy(table.sum(axis=1))
    h_v = _entropy(table.sum(axis=0))
    if h_u + h_v == 0.0:
        return 0.0
    p_uv = table / n
    outer = (table.sum(axis=1) / n)[:, None] * (table.sum(axis=0) / n)[None, :]
    mask = p_uv > 0
    mi = float((p_uv[mask] * np.log(p_uv[mask] / outer[mask])).sum())
    return 2.0 * mi / (h_u + h_v)


def nmi_ratio(cluster_assignments, speaker_labels_, recording_labels_) -> float:
    """NMI(clusters, speakers) / NMI(clusters, recordings); > 1 means the
    clustering tracks speakers more than recording sources."""
    denom = nmi(cluster_assignments, recording_labels_)
    if denom == 0.0:
        raise ValueError("recording NMI is zero; the ratio is undefined")
    return nmi(cluster_assignments, speaker_labels_) / denom


def cluster_purity(assignments, labels) -> float:
    """Fraction of points whose cluster's majority label matches their own."""
    assign = np.asarray(assignments)
    labs = np.asarray(labels)
    if assign.shape != labs.shape:
        raise ValueError("assignments and labels must align")
    total = 0
    for k in np.unique(assign):
        _, counts = np.unique(labs[assign == k], return_counts=True)
        total += int(counts.max())
    return total / assign.size


def intra_speaker_similarity(representations, speaker_labels_) -> dict[int, float]:
    """Per speaker, the median cosine over all same-speaker pairs.

    Speakers with fewer than two utterances are skipped.
    """
    reps = np.asarray(representations, dtype=np.float64)
    reps = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    labels = np.asarray(speaker_labels_)
    medians: dict[int, float] = {}
    for spk in np.unique(labels):
        rows = reps[labels == spk]
        if rows.shape[0] < 2:
            continue
        sims = pairwise_cosine_normalized(rows, rows)
        iu = np.triu_indices(rows.shape[0], k=1)
        medians[int(spk)] = float(np.median(sims[iu]))
    return medians


def save_scored_trials(trials, scored: list[ScoredTrial], path) -> None:
    """Trial-score file: `label enroll_index test_index score`."""
    if len(trials) != len(scored):
        raise ValueError("trial list and score list must align")
    with open(path, "w", encoding="ascii") as fh:
        for t, s in zip(trials, scored):
            fh.write(f"{int(t.is_target)} {t.enroll_index} {t.test_index} {s.score!r}\n")


def load_scored_trials(path) -> list[ScoredTrial]:
    out = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            out.append(ScoredTrial(score=float(parts[3]), is_target=bool(int(parts[0]))))
    return out
