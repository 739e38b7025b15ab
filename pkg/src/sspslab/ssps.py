"""Bootstrapped positive sampling: memory queues, samplers, fallback logic.

Two queues drive the sampler. The reference queue holds one unit-norm
representation per training index (computed from clean views) and is what
neighbor search and epoch clustering read. The positive queue maps training
indices to recently produced positive embeddings; a lookup miss is an
observable event that triggers fallback to default same-utterance sampling.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterState, attach_sampling_sets, kmeans
from .core import ZeroNormError, topk_desc
from .synthdata import UtteranceRecord


class Strategy(enum.Enum):
    SSL_DEFAULT = "ssl_default"
    SSPS_NN = "ssps_nn"
    SSPS_CLUSTER = "ssps_cluster"
    SSPS_CLUSTER_CENTROID = "ssps_cluster_centroid"
    SUPERVISED_ORACLE = "supervised_oracle"


class Provenance(enum.Enum):
    DEFAULT = "default"
    QUEUE = "queue"
    CENTROID = "centroid"


@dataclass(frozen=True)
class SamplerConfig:
    strategy: Strategy = Strategy.SSL_DEFAULT
    M: int = 1
    K: int = 0  # 0 = derive from the dataset (2 x number of recordings)
    activation_epoch: int = 30
    pos_queue_capacity: int | None = None  # None = one slot per training index

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if self.strategy is Strategy.SSPS_NN and self.M < 1:
            raise ValueError("nearest-neighbor sampling needs M >= 1")
        if self.activation_epoch < 0:
            raise ValueError("activation_epoch must be >= 0")
        if self.pos_queue_capacity is not None and self.pos_queue_capacity < 1:
            raise ValueError("pos_queue_capacity must be >= 1")


@dataclass(frozen=True)
class SampleDecision:
    """Outcome for one anchor: either a queue/centroid embedding or fallback."""

    pos_index: int | None
    pseudo_positive: np.ndarray | None
    provenance: Provenance

    def __post_init__(self):
        if (self.pos_index is None) != (self.provenance is Provenance.DEFAULT):
            raise ValueError("pos_index is empty exactly when falling back to default")

    @property
    def use_default(self) -> bool:
        return self.provenance is Provenance.DEFAULT


USE_DEFAULT = SampleDecision(pos_index=None, pseudo_positive=None, provenance=Provenance.DEFAULT)


class RefQueue:
    """Index-addressed store of unit-norm reference representations."""

    def __init__(self, n_total: int, dim: int):
        self.rows = np.zeros((n_total, dim))
        self.filled = np.zeros(n_total, dtype=bool)

    @property
    def capacity(self) -> int:
        return self.rows.shape[0]

    @property
    def n_filled(self) -> int:
        return int(self.filled.sum())

    def insert(self, indices: np.ndarray, reps: np.ndarray) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.min(initial=0) < 0 or (idx.size and idx.max() >= self.capacity):
            raise IndexError("training index out of range for the reference queue")
        reps = np.asarray(reps, dtype=np.float64)
        norms = np.linalg.norm(reps, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ZeroNormError("reference representation has zero norm")
        self.rows[idx] = reps / norms
        self.filled[idx] = True


class PosQueue:
    """Training-index keyed embedding store with FIFO eviction.

    Re-inserting an index refreshes both its stored value and its position in
    the eviction order.
    """

    def __init__(self, capacity: int, n_total: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.n_total = n_total
        self._entries: OrderedDict[int, np.ndarray] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, index: int) -> bool:
        return int(index) in self._entries

    def insert(self, index: int, embedding: np.ndarray) -> None:
        index = int(index)
        if index < 0 or index >= self.n_total:
            raise IndexError("training index out of range for the positive queue")
        if index in self._entries:
            del self._entries[index]
        self._entries[index] = np.array(embedding, dtype=np.float64, copy=True)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def insert_batch(self, indices, embeddings) -> None:
        for i, emb in zip(indices, embeddings):
            self.insert(i, emb)

    def get(self, index: int) -> np.ndarray | None:
        return self._entries.get(int(index))

    def live_indices(self) -> list[int]:
        return list(self._entries)


def update_queues(
    batch_indices,
    ref_reps: np.ndarray,
    pos_embs: np.ndarray,
    ref_queue: RefQueue,
    pos_queue: PosQueue,
) -> None:
    """Insert this iteration's reference reps and positive embeddings."""
    ref_queue.insert(batch_indices, ref_reps)
    pos_queue.insert_batch(batch_indices, pos_embs)


def ssps_nn_select(i: int, ref_queue: RefQueue, M: int, rng: np.random.Generator) -> int:
    """Uniform draw among the M most similar reference entries, never i itself."""
    if M < 1:
        raise ValueError("M must be >= 1")
    filled_idx = np.flatnonzero(ref_queue.filled)
    if not ref_queue.filled[i]:
        raise ValueError(f"reference for anchor {i} is not in the queue yet")
    if filled_idx.size - 1 < M:
        raise ValueError(f"need at least {M} other filled entries, have {filled_idx.size - 1}")
    sims = ref_queue.rows[filled_idx] @ ref_queue.rows[i]
    local_exclude = int(np.searchsorted(filled_idx, i))
    top = topk_desc(sims, M, exclude=local_exclude)
    return int(filled_idx[top[rng.integers(M)]])


def ssps_cluster_epoch_init(
    ref_queue: RefQueue,
    K: int,
    M: int,
    rng: np.random.Generator,
    n_iters: int = 10,
) -> ClusterState:
    """Cluster the reference queue and precompute neighbor and member sets."""
    if ref_queue.n_filled < ref_queue.capacity:
        raise ValueError("reference queue must be fully populated before clustering")
    state = kmeans(ref_queue.rows, K, n_iters, rng)
    return attach_sampling_sets(state, M)


def ssps_cluster_select(
    i: int,
    state: ClusterState,
    M: int,
    rng: np.random.Generator,
) -> tuple[int | None, int]:
    """Pick a pseudo-positive index via cluster membership.

    M == 0 draws from the anchor's own cluster (excluding the anchor); M > 0
    first draws one of the M nearest other clusters, then a member of it.
    Returns (pos_index or None, sampling cluster id); None means the
    candidate set was empty and the caller must fall back.
    """
    own = int(state.assignments[i])
    if M == 0:
        sampling_cluster = own
        members = state.member_sets[own]
        members = members[members != i]
    else:
        neighbors = state.neighbor_sets[own]
        sampling_cluster = int(neighbors[rng.integers(len(neighbors))])
        members = state.member_sets[sampling_cluster]
    if members.size == 0:
        return None, sampling_cluster
    return int(members[rng.integers(members.size)]), sampling_cluster


def resolve_pseudo_positive(
    pos_index: int | None,
    pos_queue: PosQueue,
    centroid_variant: bool = False,
    state: ClusterState | None = None,
    sampling_cluster: int | None = None,
) -> SampleDecision:
    """Map a sampled index to an embedding, or to the use-default marker.

    The centroid variant returns the sampling cluster's centroid without
    consulting the positive queue at all (no miss is possible).
    """
    if pos_index is None:
        return USE_DEFAULT
    if centroid_variant:
        if state is None or sampling_cluster is None:
            raise ValueError("centroid variant needs the cluster state and sampling cluster")
        return SampleDecision(
            pos_index=int(pos_index),
            pseudo_positive=state.centroids[sampling_cluster].copy(),
            provenance=Provenance.CENTROID,
        )
    stored = pos_queue.get(pos_index)
    if stored is None:
        return USE_DEFAULT
    return SampleDecision(
        pos_index=int(pos_index),
        pseudo_positive=stored,
        provenance=Provenance.QUEUE,
    )


class SupervisedOracle:
    """Label-based sampler: same speaker, different recording, uniform."""

    def __init__(self, records: list[UtteranceRecord]):
        by_speaker: dict[int, list[UtteranceRecord]] = {}
        for rec in records:
            by_speaker.setdefault(rec.speaker_id, []).append(rec)
        self._candidates: list[np.ndarray] = [None] * len(records)
        for rec in records:
            others = [
                r.index
                for r in by_speaker[rec.speaker_id]
                if r.recording_id != rec.recording_id
            ]
            if not others:
                raise ValueError(
                    f"speaker {rec.speaker_id} has a single recording: "
                    "oracle sampling needs cross-recording candidates"
                )
            self._candidates[rec.index] = np.array(sorted(others), dtype=np.int64)

    def select(self, i: int, rng: np.random.Generator) -> int:
        cands = self._candidates[i]
        return int(cands[rng.integers(cands.size)])


def supervised_oracle_select(
    i: int,
    records: list[UtteranceRecord],
    rng: np.random.Generator,
) -> int:
    """One-shot oracle draw (builds the candidate table; loops use SupervisedOracle)."""
    return SupervisedOracle(records).select(i, rng)


@dataclass(frozen=True)
class AuditRow:
    """One sampling decision, as written to the audit log."""

    epoch: int
    anchor: int
    pos_index: int  # -1 on fallback
    same_speaker: int
    same_recording: int
    fallback: int

    def format(self) -> str:
        return (
            f"{self.epoch} {self.anchor} {self.pos_index} "
            f"{self.same_speaker} {self.same_recording} {self.fallback}"
        )


def make_audit_row(
    epoch: int,
    anchor: int,
    decision: SampleDecision,
    records: list[UtteranceRecord],
) -> AuditRow:
    if decision.use_default:
        return AuditRow(epoch, anchor, -1, 0, 0, 1)
    pos = records[decision.pos_index]
    anc = records[anchor]
    return AuditRow(
        epoch=epoch,
        anchor=anchor,
        pos_index=decision.pos_index,
        same_speaker=int(pos.speaker_id == anc.speaker_id),
        same_recording=int(pos.recording_id == anc.recording_id),
        fallback=0,
    )


def parse_audit_line(line: str) -> AuditRow:
    parts = line.split()
    return AuditRow(*(int(p) for p in parts))
