"""Synthetic speaker / recording / utterance hierarchy and trial lists.

The generator realizes a three-tier latent structure: every utterance is a
unit speaker direction, plus a scaled unit recording offset, plus per
utterance Gaussian noise. With the default sigmas the cosine ordering

    same recording  >  same speaker, different recording  >  different speaker

holds with wide margins, which is exactly the geometry the bootstrapped
positive sampler exploits. Recording offsets play the role of channel
conditions; augmentation is additive isotropic noise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import as_vector


class ViewKind(enum.Enum):
    ANCHOR = "anchor"
    POSITIVE = "positive"
    REFERENCE = "reference"
    GLOBAL = "global"
    LOCAL = "local"


@dataclass(frozen=True)
class GenConfig:
    """Dataset shape and noise scales.

    ``sigma_augment`` is the train-time view noise; global views use half of
    it (the lower-noise analogue of longer audio segments).
    """

    n_speakers: int = 32
    recs_per_speaker: int = 4
    utts_per_recording: int = 8
    dim_input: int = 12
    sigma_recording: float = 0.5
    sigma_utterance: float = 0.1
    sigma_augment: float = 0.2
    seed: int = 1234

    def __post_init__(self):
        for name in ("n_speakers", "recs_per_speaker", "utts_per_recording", "dim_input"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("sigma_recording", "sigma_utterance", "sigma_augment"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0")

    @property
    def n_recordings(self) -> int:
        return self.n_speakers * self.recs_per_speaker

    @property
    def n_utterances(self) -> int:
        return self.n_recordings * self.utts_per_recording


@dataclass(frozen=True)
class UtteranceRecord:
    """One training sample: ids plus its clean base feature vector."""

    index: int
    speaker_id: int
    recording_id: int
    base: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class View:
    source_index: int
    features: np.ndarray = field(repr=False)
    kind: ViewKind = ViewKind.ANCHOR


@dataclass(frozen=True)
class TrialPair:
    enroll_index: int
    test_index: int
    is_target: bool

    def __post_init__(self):
        if self.enroll_index == self.test_index:
            raise ValueError("a trial must compare two distinct utterances")


def generate_dataset(cfg: GenConfig) -> list[UtteranceRecord]:
    """Draw the full hierarchy; bitwise deterministic for a given seed.

    base = unit(speaker) + sigma_recording * unit(recording) + sigma_utterance * eps,
    with eps a raw standard normal draw per utterance.
    """
    rng = np.random.default_rng(cfg.seed)
    records: list[UtteranceRecord] = []
    index = 0
    recording_id = 0
    for speaker_id in range(cfg.n_speakers):
        s = rng.standard_normal(cfg.dim_input)
        s /= np.linalg.norm(s)
        for _ in range(cfg.recs_per_speaker):
            r = rng.standard_normal(cfg.dim_input)
            r /= np.linalg.norm(r)
            offset = s + cfg.sigma_recording * r
            for _ in range(cfg.utts_per_recording):
                eps = rng.standard_normal(cfg.dim_input)
                base = offset + cfg.sigma_utterance * eps
                records.append(
                    UtteranceRecord(
                        index=index,
                        speaker_id=speaker_id,
                        recording_id=recording_id,
                        base=base,
                    )
                )
                index += 1
            recording_id += 1
    return records


def base_features(records: list[UtteranceRecord]) -> np.ndarray:
    """Stack base vectors into an (N, D) matrix, ordered by index."""
    return np.stack([rec.base for rec in sorted(records, key=lambda r: r.index)])


def speaker_labels(records: list[UtteranceRecord]) -> np.ndarray:
    return np.array([rec.speaker_id for rec in sorted(records, key=lambda r: r.index)])


def recording_labels(records: list[UtteranceRecord]) -> np.ndarray:
    return np.array([rec.recording_id for rec in sorted(records, key=lambda r: r.index)])


def view_noise_scale(kind: ViewKind, sigma_augment: float) -> float:
    if kind is ViewKind.REFERENCE:
        return 0.0
    if kind is ViewKind.GLOBAL:
        return sigma_augment / 2.0
    return sigma_augment


def make_view(
    rec: UtteranceRecord,
    kind: ViewKind,
    sigma_augment: float,
    rng: np.random.Generator,
) -> View:
    """One augmented (or clean, for reference) view of an utterance.

    Reference views never consume randomness, so queue bookkeeping does not
    perturb the augmentation stream.
    """
    if sigma_augment < 0.0:
        raise ValueError("sigma_augment must be >= 0")
    scale = view_noise_scale(kind, sigma_augment)
    if scale == 0.0:
        features = rec.base.copy()
    else:
        features = rec.base + scale * rng.standard_normal(rec.base.shape[0])
    return View(source_index=rec.index, features=features, kind=kind)


def augment_batch(base_rows: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorized view noise; row-major draws match per-record make_view calls."""
    if scale == 0.0:
        return base_rows.copy()
    return base_rows + scale * rng.standard_normal(base_rows.shape)


def make_trials(
    records: list[UtteranceRecord],
    n_target: int,
    n_nontarget: int,
    rng: np.random.Generator,
) -> list[TrialPair]:
    """Sample a balanced trial list.

    Targets are same-speaker pairs forced across recordings (the hard
    condition the sampler is meant to help with); nontargets are
    cross-speaker. Pairs are unique as unordered index pairs.
    """
    if n_target < 1 or n_nontarget < 1:
        raise ValueError("need at least one target and one nontarget trial")
    by_speaker: dict[int, dict[int, list[int]]] = {}
    for rec in records:
        by_speaker.setdefault(rec.speaker_id, {}).setdefault(rec.recording_id, []).append(rec.index)
    eligible = [spk for spk, recs in by_speaker.items() if len(recs) >= 2]
    if not eligible:
        raise ValueError(
            "cannot build cross-recording target trials: every speaker has a single recording"
        )
    speakers = sorted(by_speaker)
    if len(speakers) < 2:
        raise ValueError("cannot build nontarget trials with a single speaker")

    seen: set[tuple[int, int]] = set()
    trials: list[TrialPair] = []

    def try_add(a: int, b: int, is_target: bool) -> bool:
        key = (a, b) if a < b else (b, a)
        if key in seen:
            return False
        seen.add(key)
        trials.append(TrialPair(enroll_index=a, test_index=b, is_target=is_target))
        return True

    max_attempts = 200 * (n_target + n_nontarget)
    attempts = 0
    added = 0
    while added < n_target:
        if attempts > max_attempts:
            raise ValueError("could not sample enough unique target trials")
        attempts += 1
        spk = eligible[rng.integers(len(eligible))]
        rec_ids = sorted(by_speaker[spk])
        i, j = rng.choice(len(rec_ids), size=2, replace=False)
        utts_a = by_speaker[spk][rec_ids[i]]
        utts_b = by_speaker[spk][rec_ids[j]]
        a = utts_a[rng.integers(len(utts_a))]
        b = utts_b[rng.integers(len(utts_b))]
        if try_add(a, b, True):
            added += 1

    added = 0
    while added < n_nontarget:
        if attempts > max_attempts:
            raise ValueError("could not sample enough unique nontarget trials")
        attempts += 1
        si, sj = rng.choice(len(speakers), size=2, replace=False)
        recs_a = by_speaker[speakers[si]]
        recs_b = by_speaker[speakers[sj]]
        rid_a = sorted(recs_a)[rng.integers(len(recs_a))]
        rid_b = sorted(recs_b)[rng.integers(len(recs_b))]
        a = recs_a[rid_a][rng.integers(len(recs_a[rid_a]))]
        b = recs_b[rid_b][rng.integers(len(recs_b[rid_b]))]
        if try_add(a, b, False):
            added += 1

    return trials


# ---------------------------------------------------------------------------
# Plain-text interchange formats
# ---------------------------------------------------------------------------

def save_dataset(records: list[UtteranceRecord], path) -> None:
    """One row per utterance: `index speaker_id recording_id v0 ... v{D-1}`."""
    with open(path, "w", encoding="ascii") as fh:
        for rec in sorted(records, key=lambda r: r.index):
            values = " ".join(f"{v:.17g}" for v in rec.base)
            fh.write(f"{rec.index} {rec.speaker_id} {rec.recording_id} {values}\n")


def load_dataset(path) -> list[UtteranceRecord]:
    records = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            records.append(
                UtteranceRecord(
                    index=int(parts[0]),
                    speaker_id=int(parts[1]),
                    recording_id=int(parts[2]),
                    base=as_vector([float(x) for x in parts[3:]]),
                )
            )
    return records


def save_trials(trials: list[TrialPair], path) -> None:
    """One row per pair: `label enroll_index test_index`, label 1 = same speaker."""
    with open(path, "w", encoding="ascii") as fh:
        for t in trials:
            fh.write(f"{int(t.is_target)} {t.enroll_index} {t.test_index}\n")


def load_trials(path) -> list[TrialPair]:
    trials = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            trials.append(
                TrialPair(
                    enroll_index=int(parts[1]),
                    test_index=int(parts[2]),
                    is_target=bool(int(parts[0])),
                )
            )
    return trials
