"""Training orchestration: epochs, substitution, schedules, evaluation.

One experiment is two phases over a single loop: standard self-supervised
training until the sampler's activation epoch, then the same loop with
pseudo-positive substitution switched on (cluster-based strategies re-run
clustering at every epoch boundary of the second phase). Queues update at
every iteration from epoch 0, strictly after the optimizer step, so a loss
never reads a queue entry written in its own iteration.

Every stochastic choice draws from a named child stream of the run seed, so
a (config, seed) pair fully determines every logged number, and the sampler
streams are untouched when sampling is off (which is what makes the
ssl_default trajectory bitwise identical to a build without the sampling
machinery).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as lossmod
from . import metrics as metricsmod
from .core import ConfigError, TrainingDivergedError, make_rng
from .model import (
    MlpSpec,
    ModelParams,
    add_grads,
    average_checkpoints,
    backward,
    ema_update,
    forward,
    init_model,
    save_checkpoint,
    zero_grads_like,
)
from .ssps import (
    AuditRow,
    PosQueue,
    Provenance,
    RefQueue,
    SampleDecision,
    SamplerConfig,
    Strategy,
    SupervisedOracle,
    make_audit_row,
    resolve_pseudo_positive,
    ssps_cluster_epoch_init,
    ssps_cluster_select,
    ssps_nn_select,
    update_queues,
)
from .synthdata import (
    GenConfig,
    TrialPair,
    UtteranceRecord,
    augment_batch,
    base_features,
    recording_labels,
    speaker_labels,
)

FRAMEWORKS = ("simclr", "moco", "swav", "vicreg", "dino")
_ASYMMETRIC = ("moco", "dino")
NO_DECISIONS = -1.0  # accuracy sentinel for epochs without sampling decisions


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; empty dims derive desk-scale defaults."""

    encoder_layer_dims: tuple[int, ...] = ()
    projector_layer_dims: tuple[int, ...] = ()
    head_dim: int = 256
    standardize_projector: bool = True
    input_standardize: bool = False


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale training schedule; paper-scale values noted in comments."""

    framework: str = "simclr"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    epochs: int = 50
    batch_size: int = 64  # paper: 256
    lr: float = 0.05  # paper: 0.001 with Adam
    optimizer: str = "sgd"  # adam available
    lr_decay: str = "step"  # reduce 5% every 5 epochs; dino uses cosine
    lr_step_factor: float = 0.95
    lr_step_every: int = 5
    lr_restart_at_activation: bool = False
    seed: int = 0
    augmentation_enabled: bool = True
    # None follows augmentation_enabled; True/False overrides it from the
    # sampler activation epoch onward (the continuation phase of a run)
    augment_after_activation: bool | None = None
    checkpoint_avg: int = 10
    eval_clusters: int = 0  # 0 = number of speakers
    eval_cluster_iters: int = 10
    # contrastive
    tau: float = 0.03
    moco_queue_size: int = 1024  # paper: 65536
    ema_m: float = 0.99  # paper: 0.999
    # clustering loss
    swav_tau: float = 0.1
    n_prototypes: int = 64  # paper: 3000
    sinkhorn_iters: int = 3
    swav_queue_len: int = 256  # paper: 3840
    swav_queue_start_epoch: int = 5  # paper: 15
    # information maximization
    vicreg_lambda: float = 1.0
    vicreg_mu: float = 1.0
    vicreg_nu: float = 0.04
    # self-distillation
    dino_tau_s: float = 0.1
    dino_tau_t: float = 0.04
    dino_center_decay: float = 0.9
    dino_ema_start: float = 0.996
    dino_ema_end: float = 1.0
    dino_global_views: int = 2
    dino_local_views: int = 4
    grad_clip: float = 0.0  # 0 = off; dino default 3.0

    @property
    def warmup_epochs_before_ssps(self) -> int:
        return self.sampler.activation_epoch


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    mean_loss: float
    eer: float
    min_dcf: float
    speaker_acc: float
    recording_acc: float
    fallback_rate: float
    nmi_ratio: float

    def __post_init__(self):
        for name in ("mean_loss", "eer", "min_dcf", "speaker_acc",
                     "recording_acc", "fallback_rate", "nmi_ratio"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"EpochReport field {name} is not finite")


REPORT_HEADER = "epoch,mean_loss,eer,min_dcf,speaker_acc,recording_acc,fallback_rate,nmi_ratio"


def format_report_row(r: EpochReport) -> str:
    return ",".join([
        str(r.epoch), repr(r.mean_loss), repr(r.eer), repr(r.min_dcf),
        repr(r.speaker_acc), repr(r.recording_acc), repr(r.fallback_rate),
        repr(r.nmi_ratio),
    ])


def parse_report_csv(path) -> list[EpochReport]:
    reports = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != REPORT_HEADER:
            raise ValueError(f"unexpected report header: {header!r}")
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            reports.append(EpochReport(int(parts[0]), *(float(p) for p in parts[1:])))
    return reports


def default_model_config(framework: str, dim_input: int, cfg: ModelConfig) -> ModelConfig:
    """Fill derived architecture dims for a framework."""
    enc = cfg.encoder_layer_dims or (dim_input, 64, 64, 32)
    if enc[0] != dim_input:
        raise ConfigError(
            f"encoder input dim {enc[0]} does not match dataset dim {dim_input}"
        )
    if framework in ("simclr", "moco"):
        proj = ()  # projector discarded for contrastive frameworks
    else:
        proj = cfg.projector_layer_dims or (enc[-1], 64, 16)
    return replace(cfg, encoder_layer_dims=tuple(enc), projector_layer_dims=tuple(proj))


def build_model(framework: str, model_cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    enc_spec = MlpSpec(layer_dims=model_cfg.encoder_layer_dims)
    proj_spec = None
    head_spec = None
    if model_cfg.projector_layer_dims:
        proj_spec = MlpSpec(
            layer_dims=model_cfg.projector_layer_dims,
            standardize_hidden=model_cfg.standardize_projector,
            normalize_output=(framework == "dino"),
        )
    if framework == "dino":
        head_spec = MlpSpec(layer_dims=(model_cfg.projector_layer_dims[-1], model_cfg.head_dim))
    return init_model(enc_spec, proj_spec, rng, head_spec=head_spec)


def _standardize_inputs(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return (x - mu) / (sd + 1e-8)


def encode_representations(params: ModelParams, features: np.ndarray,
                           input_standardize: bool = False) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if input_standardize:
        x = _standardize_inputs(x)
    y, _ = params.encoder.forward(x)
    return y


def evaluate(params: ModelParams, trials: list[TrialPair],
             records: list[UtteranceRecord],
             input_standardize: bool = False) -> tuple[float, float]:
    """EER and minDCF of cosine-scored clean-view representations."""
    reps = encode_representations(params, base_features(records), input_standardize)
    scored = metricsmod.score_trials(reps, trials)
    return metricsmod.eer(scored), metricsmod.min_dcf(scored)


class _Optimizer:
    """SGD or Adam over the flat (name -> array) parameter view."""

    def __init__(self, kind: str, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, named_params: list[tuple[str, np.ndarray, np.ndarray]], lr: float) -> None:
        if self.kind == "sgd":
            for _, param, grad in named_params:
                param -= lr * grad
            return
        self.t += 1
        for name, param, grad in named_params:
            m = self._m.setdefault(name, np.zeros_like(param))
            v = self._v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Trainer:
    """Owns the model, queues and schedules for one experiment."""

    def __init__(
        self,
        cfg: TrainConfig,
        records: list[UtteranceRecord],
        trials: list[TrialPair],
        gen_cfg: GenConfig,
        model_cfg: ModelConfig | None = None,
        ssps_enabled: bool = True,
    ):
        if cfg.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {cfg.framework!r}")
        self.cfg = cfg
        self.records = sorted(records, key=lambda r: r.index)
        self.trials = trials
        self.gen_cfg = gen_cfg
        self.n = len(self.records)
        if cfg.batch_size > self.n:
            raise ConfigError("batch size exceeds the dataset size")
        if cfg.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        sampler = cfg.sampler
        if sampler.strategy is not Strategy.SSL_DEFAULT:
            if sampler.activation_epoch > cfg.epochs:
                raise ConfigError("activation_epoch must not exceed epochs")
            if sampler.activation_epoch < 1:
                raise ConfigError("sampling needs at least one warm-up epoch to fill the queues")
        self.sampler_k = sampler.K if sampler.K > 0 else 2 * gen_cfg.n_recordings
        cluster_strategies = (Strategy.SSPS_CLUSTER, Strategy.SSPS_CLUSTER_CENTROID)
        if sampler.strategy in cluster_strategies and self.sampler_k > self.n:
            raise ConfigError("sampler K exceeds the number of training samples")

        model_cfg = model_cfg or ModelConfig()
        self.model_cfg = default_model_config(cfg.framework, gen_cfg.dim_input, model_cfg)
        init_rng = make_rng(cfg.seed, 0)
        self.params = build_model(cfg.framework, self.model_cfg, init_rng)
        self.d_repr = self.params.encoder.spec.dim_out
        if self.params.head is not None:
            self.d_emb = self.params.head.spec.dim_out
        elif self.params.projector is not None:
            self.d_emb = self.params.projector.spec.dim_out
        else:
            self.d_emb = self.d_repr

        if sampler.strategy is Strategy.SSPS_CLUSTER_CENTROID and self.d_emb != self.d_repr:
            raise ConfigError(
                "centroid pseudo-positives live in representation space; "
                "use a projector-free framework (simclr or moco)"
            )
        if sampler.strategy is Strategy.SSPS_CLUSTER and sampler.M >= max(self.sampler_k, 1):
            raise ConfigError("neighboring-cluster sampling needs M < K")

        self.asymmetric = cfg.framework in _ASYMMETRIC
        self.teacher = self.params.copy() if self.asymmetric else None

        self.prototypes = None
        self._swav_queue: dict[str, list[np.ndarray]] = {"anchor": [], "positive": []}
        if cfg.framework == "swav":
            self.prototypes = lossmod.Prototypes.init(cfg.n_prototypes, self.d_emb, init_rng)
        self.dino_center = None
        if cfg.framework == "dino":
            self.dino_center = lossmod.DinoCenter(
                c=np.zeros(self.d_emb), decay=cfg.dino_center_decay
            )
        self._moco_negatives: list[np.ndarray] = []

        self.ssps_enabled = ssps_enabled
        self.ref_queue = None
        self.pos_queue = None
        if ssps_enabled:
            self.ref_queue = RefQueue(self.n, self.d_repr)
            capacity = sampler.pos_queue_capacity or self.n
            self.pos_queue = PosQueue(capacity, self.n)
        self.oracle = None
        if sampler.strategy is Strategy.SUPERVISED_ORACLE:
            try:
                self.oracle = SupervisedOracle(self.records)
            except ValueError as exc:  # single-recording speakers: a config problem
                raise ConfigError(str(exc)) from exc

        self.cluster_state = None
        self.base = base_features(self.records)
        self.spk_labels = speaker_labels(self.records)
        self.rec_labels = recording_labels(self.records)

        self._shuffle_rng = make_rng(cfg.seed, 1)
        self._data_rng = make_rng(cfg.seed, 2)
        self._sampler_rng = make_rng(cfg.seed, 3)
        self._optimizer = _Optimizer(cfg.optimizer)
        self._step = 0
        self.total_steps = max(1, cfg.epochs * (self.n // cfg.batch_size))
        self.audit_rows: list[AuditRow] = []
        self.checkpoints: list[ModelParams] = []

        self.grad_clip = cfg.grad_clip
        if cfg.framework == "dino" and cfg.grad_clip == 0.0:
            self.grad_clip = 3.0

    # -- schedules ---------------------------------------------------------

    def lr_at(self, epoch: int) -> float:
        cfg = self.cfg
        if cfg.lr_restart_at_activation and epoch >= cfg.sampler.activation_epoch:
            epoch = epoch - cfg.sampler.activation_epoch
        if cfg.lr_decay == "cosine":
            frac = epoch / max(1, cfg.epochs)
            floor = 0.01 * cfg.lr
            return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
        if cfg.lr_decay == "step":
            return cfg.lr * cfg.lr_step_factor ** (epoch // cfg.lr_step_every)
        raise ConfigError(f"unknown lr_decay {cfg.lr_decay!r}")

    def ema_at(self) -> float:
        cfg = self.cfg
        if cfg.framework != "dino":
            return cfg.ema_m
        frac = min(1.0, self._step / self.total_steps)
        span = cfg.dino_ema_end - cfg.dino_ema_start
        return cfg.dino_ema_end - span * 0.5 * (1.0 + math.cos(math.pi * frac))

    def sampling_active(self, epoch: int) -> bool:
        return (
            self.ssps_enabled
            and self.cfg.sampler.strategy is not Strategy.SSL_DEFAULT
            and epoch >= self.cfg.sampler.activation_epoch
        )

    # -- views -------------------------------------------------------------

    def _net_input(self, x: np.ndarray) -> np.ndarray:
        if self.model_cfg.input_standardize:
            return _standardize_inputs(x)
        return x

    def _augment_on(self, epoch: int) -> bool:
        override = self.cfg.augment_after_activation
        if override is not None and epoch >= self.cfg.sampler.activation_epoch:
            return override
        return self.cfg.augmentation_enabled

    def _view(self, rows: np.ndarray, scale_factor: float, epoch: int) -> np.ndarray:
        sigma = self.gen_cfg.sigma_augment if self._augment_on(epoch) else 0.0
        return augment_batch(rows, sigma * scale_factor, self._data_rng)

    # -- sampling ----------------------------------------------------------

    def _select(self, i: int) -> SampleDecision:
        sampler = self.cfg.sampler
        rng = self._sampler_rng
        if sampler.strategy is Strategy.SSPS_NN:
            pos = ssps_nn_select(i, self.ref_queue, sampler.M, rng)
            return resolve_pseudo_positive(pos, self.pos_queue)
        if sampler.strategy in (Strategy.SSPS_CLUSTER, Strategy.SSPS_CLUSTER_CENTROID):
            pos, cluster = ssps_cluster_select(i, self.cluster_state, sampler.M, rng)
            return resolve_pseudo_positive(
                pos,
                self.pos_queue,
                centroid_variant=sampler.strategy is Strategy.SSPS_CLUSTER_CENTROID,
                state=self.cluster_state,
                sampling_cluster=cluster,
            )
        if sampler.strategy is Strategy.SUPERVISED_ORACLE:
            pos = self.oracle.select(i, rng)
            return resolve_pseudo_positive(pos, self.pos_queue)
        raise ConfigError(f"strategy {sampler.strategy} does not sample")

    def _substitute(self, epoch: int, bidx: np.ndarray, z_pos: np.ndarray):
        """Swap positive rows for queue entries; returns (rows, live mask, audit)."""
        live = np.ones(len(bidx), dtype=bool)
        if not self.sampling_active(epoch):
            return z_pos, live, []
        z_used = z_pos.copy()
        audit = []
        for row, i in enumerate(bidx):
            decision = self._select(int(i))
            audit.append(make_audit_row(epoch, int(i), decision, self.records))
            if not decision.use_default:
                z_used[row] = decision.pseudo_positive
                live[row] = False
        return z_used, live, audit

    # -- gradient plumbing -------------------------------------------------

    def _named_grads(self, grads: dict) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for mod_name, mlp in self.params.modules():
            mod_grads = grads.get(mod_name)
            if mod_grads is None:
                continue
            for l, (dw, db) in enumerate(mod_grads):
                out.append((f"{mod_name}.{l}.W", mlp.weights[l], dw))
                out.append((f"{mod_name}.{l}.b", mlp.biases[l], db))
        return out

    def _clip(self, named: list[tuple[str, np.ndarray, np.ndarray]]) -> None:
        if not self.grad_clip:
            return
        total = math.sqrt(sum(float((g * g).sum()) for _, _, g in named))
        if total > self.grad_clip:
            scale = self.grad_clip / total
            for _, _, g in named:
                g *= scale

    # -- iterations --------------------------------------------------------

    def _diverged(self, epoch: int, what: str) -> TrainingDivergedError:
        return TrainingDivergedError(
            f"non-finite {what} at epoch {epoch}, step {self._step} "
            f"({self.cfg.framework}, lr={self.lr_at(epoch)})"
        )

    def _check_finite(self, arr: np.ndarray, epoch: int, what: str) -> np.ndarray:
        if not np.all(np.isfinite(arr)):
            raise self._diverged(epoch, what)
        return arr

    def train_iteration(self, epoch: int, bidx: np.ndarray) -> tuple[float, list[AuditRow]]:
        if self.cfg.framework == "dino":
            value, audit = self._iteration_dino(epoch, bidx)
        else:
            value, audit = self._iteration_pairwise(epoch, bidx)
        if not np.isfinite(value):
            raise self._diverged(epoch, f"loss {value}")
        self._step += 1
        self.audit_rows.extend(audit)
        return value, audit

    def _iteration_pairwise(self, epoch: int, bidx: np.ndarray):
        cfg = self.cfg
        rows = self.base[bidx]
        x_anchor = self._net_input(self._view(rows, 1.0, epoch))
        x_pos = self._net_input(self._view(rows, 1.0, epoch))
        x_ref = self._net_input(rows)

        _, z_anchor, cache_a = forward(self.params, x_anchor)
        self._check_finite(z_anchor, epoch, "anchor embeddings")
        if self.asymmetric:
            _, z_pos, _ = forward(self.teacher, x_pos)
            cache_p = None
        else:
            _, z_pos, cache_p = forward(self.params, x_pos)
        y_ref, _ = self.params.encoder.forward(x_ref)

        z_used, live, audit = self._substitute(epoch, bidx, z_pos)

        proto_grad = None
        if cfg.framework == "simclr":
            value, g_z, g_pos = lossmod.simclr_loss(z_anchor, z_used, cfg.tau, symmetric=True)
        elif cfg.framework == "moco":
            negatives = (
                np.concatenate(self._moco_negatives, axis=0)
                if self._moco_negatives
                else np.zeros((0, self.d_emb))
            )
            value, g_z, g_pos = lossmod.moco_loss(z_anchor, z_used, negatives, cfg.tau)
            g_pos = None  # keys are stop-gradient
        elif cfg.framework == "vicreg":
            value, g_z, g_pos = lossmod.vicreg_loss(
                z_anchor, z_used, cfg.vicreg_lambda, cfg.vicreg_mu, cfg.vicreg_nu
            )
        elif cfg.framework == "swav":
            value, g_z, g_pos, proto_grad = self._swav_terms(epoch, z_anchor, z_used)
        else:  # pragma: no cover
            raise ConfigError(f"unhandled framework {cfg.framework}")

        grads = zero_grads_like(self.params)
        part, _ = backward(self.params, cache_a, g_z)
        add_grads(grads, part)
        if cache_p is not None and g_pos is not None:
            g_pos = g_pos.copy()
            g_pos[~live] = 0.0  # substituted rows came from the queue, not the net
            part, _ = backward(self.params, cache_p, g_pos)
            add_grads(grads, part)

        named = self._named_grads(grads)
        self._clip(named)
        self._optimizer.step(named, self.lr_at(epoch))

        if self.prototypes is not None and proto_grad is not None:
            if epoch >= 1:  # prototypes frozen during the first epoch
                self.prototypes.frozen = False
                self.prototypes.vectors -= self.lr_at(epoch) * proto_grad
                self.prototypes.renormalize()

        if self.asymmetric:
            ema_update(self.teacher, self.params, self.ema_at())

        if cfg.framework == "moco":
            self._moco_negatives.append(z_pos.copy())
            total = sum(q.shape[0] for q in self._moco_negatives)
            while total > cfg.moco_queue_size and self._moco_negatives:
                total -= self._moco_negatives[0].shape[0]
                self._moco_negatives.pop(0)
        if cfg.framework == "swav" and epoch >= cfg.swav_queue_start_epoch:
            self._push_swav(z_anchor, z_used)

        if self.ssps_enabled:
            update_queues(bidx, y_ref, z_pos, self.ref_queue, self.pos_queue)
        return value, audit

    def _swav_codes(self, branch: str, z_batch: np.ndarray) -> np.ndarray:
        """Balanced codes over queue + batch; returns row-stochastic batch rows."""
        parts = list(self._swav_queue[branch]) + [z_batch]
        stacked = np.concatenate(parts, axis=0)
        unit = stacked / np.linalg.norm(stacked, axis=1, keepdims=True)
        proto = self.prototypes.vectors
        scores = unit @ (proto / np.linalg.norm(proto, axis=1, keepdims=True)).T
        plan = lossmod.sinkhorn_codes(scores, self.cfg.sinkhorn_iters)
        b_eff = stacked.shape[0]
        return plan[-z_batch.shape[0]:] * b_eff

    def _swav_terms(self, epoch: int, z_anchor: np.ndarray, z_pos: np.ndarray):
        codes_anchor = self._swav_codes("anchor", z_anchor)
        codes_pos = self._swav_codes("positive", z_pos)
        v1, g_pos, gp1 = lossmod.swav_loss(z_pos, codes_anchor, self.prototypes, self.cfg.swav_tau)
        v2, g_z, gp2 = lossmod.swav_loss(z_anchor, codes_pos, self.prototypes, self.cfg.swav_tau)
        return 0.5 * (v1 + v2), 0.5 * g_z, 0.5 * g_pos, 0.5 * (gp1 + gp2)

    def _push_swav(self, z_anchor: np.ndarray, z_pos: np.ndarray) -> None:
        for branch, batch in (("anchor", z_anchor), ("positive", z_pos)):
            queue = self._swav_queue[branch]
            queue.append(batch.copy())
            total = sum(q.shape[0] for q in queue)
            while total > self.cfg.swav_queue_len and queue:
                total -= queue[0].shape[0]
                queue.pop(0)

    def _iteration_dino(self, epoch: int, bidx: np.ndarray):
        cfg = self.cfg
        rows = self.base[bidx]
        b = len(bidx)
        global_views = [self._net_input(self._view(rows, 0.5, epoch)) for _ in range(cfg.dino_global_views)]
        local_views = [self._net_input(self._view(rows, 1.0, epoch)) for _ in range(cfg.dino_local_views)]
        student_inputs = global_views + local_views

        student_logits = np.zeros((b, len(student_inputs), self.d_emb))
        caches = []
        for s, x in enumerate(student_inputs):
            _, z, cache = forward(self.params, x)
            self._check_finite(z, epoch, "student view logits")
            student_logits[:, s, :] = z
            caches.append(cache)
        teacher_logits = np.zeros((b, cfg.dino_global_views, self.d_emb))
        for t, x in enumerate(global_views):
            _, z, _ = forward(self.teacher, x)
            teacher_logits[:, t, :] = z

        teacher_used = teacher_logits
        audit = []
        if self.sampling_active(epoch):
            teacher_used = teacher_logits.copy()
            for row, i in enumerate(bidx):
                decision = self._select(int(i))
                audit.append(make_audit_row(epoch, int(i), decision, self.records))
                if not decision.use_default:
                    stored = decision.pseudo_positive
                    if decision.provenance is Provenance.QUEUE:
                        teacher_used[row] = stored.reshape(cfg.dino_global_views, self.d_emb)
                    else:
                        teacher_used[row] = np.broadcast_to(stored, (cfg.dino_global_views, self.d_emb))

        value, g_student = lossmod.dino_loss(
            student_logits, teacher_used, self.dino_center.c, cfg.dino_tau_s, cfg.dino_tau_t
        )

        grads = zero_grads_like(self.params)
        for s, cache in enumerate(caches):
            part, _ = backward(self.params, cache, g_student[:, s, :])
            add_grads(grads, part)
        if epoch == 0 and grads.get("head") is not None:
            grads["head"] = [(np.zeros_like(dw), np.zeros_like(db)) for dw, db in grads["head"]]
        named = self._named_grads(grads)
        self._clip(named)
        self._optimizer.step(named, self.lr_at(epoch))
        ema_update(self.teacher, self.params, self.ema_at())
        self.dino_center.update(teacher_logits)

        if self.ssps_enabled:
            y_ref = encode_representations(
                self.params, self.base[bidx], self.model_cfg.input_standardize
            )
            pair_embs = teacher_logits.reshape(b, -1)  # both global views per index
            update_queues(bidx, y_ref, pair_embs, self.ref_queue, self.pos_queue)
        return value, audit

    # -- epochs ------------------------------------------------------------

    def run_epoch(self, epoch: int) -> EpochReport:
        cfg = self.cfg
        strategy = cfg.sampler.strategy
        if self.sampling_active(epoch) and strategy in (
            Strategy.SSPS_CLUSTER,
            Strategy.SSPS_CLUSTER_CENTROID,
        ):
            self.cluster_state = ssps_cluster_epoch_init(
                self.ref_queue, self.sampler_k, cfg.sampler.M, make_rng(cfg.seed, 5, epoch)
            )
        order = self._shuffle_rng.permutation(self.n)
        n_batches = self.n // cfg.batch_size
        if n_batches == 0:
            raise ConfigError("batch size larger than the dataset")
        total = 0.0
        epoch_audit: list[AuditRow] = []
        for b in range(n_batches):
            bidx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            value, audit = self.train_iteration(epoch, bidx)
            total += value
            epoch_audit.extend(audit)
        mean_loss = total / n_batches

        eer_value, dcf_value = evaluate(
            self.params, self.trials, self.records, self.model_cfg.input_standardize
        )
        ratio = self._eval_nmi_ratio(epoch)

        spk_acc, rec_acc = NO_DECISIONS, NO_DECISIONS
        fallback_rate = 0.0
        if epoch_audit:
            fallback_rate = sum(r.fallback for r in epoch_audit) / len(epoch_audit)
            if any(not r.fallback for r in epoch_audit):
                spk_acc, rec_acc = metricsmod.pseudo_positive_accuracy(epoch_audit, self.records)

        return EpochReport(
            epoch=epoch,
            mean_loss=mean_loss,
            eer=eer_value,
            min_dcf=dcf_value,
            speaker_acc=spk_acc,
            recording_acc=rec_acc,
            fallback_rate=fallback_rate,
            nmi_ratio=ratio,
        )

    def _eval_nmi_ratio(self, epoch: int) -> float:
        from .clustering import kmeans

        k_eval = self.cfg.eval_clusters or self.gen_cfg.n_speakers
        reps = encode_representations(
            self.params, self.base, self.model_cfg.input_standardize
        )
        reps = reps / np.linalg.norm(reps, axis=1, keepdims=True)
        state = kmeans(reps, k_eval, self.cfg.eval_cluster_iters, make_rng(self.cfg.seed, 4, epoch))
        return metricsmod.nmi_ratio(state.assignments, self.spk_labels, self.rec_labels)


def run_experiment(
    cfg: TrainConfig,
    records: list[UtteranceRecord],
    trials: list[TrialPair],
    gen_cfg: GenConfig,
    model_cfg: ModelConfig | None = None,
    out_dir: str | None = None,
    ssps_enabled: bool = True,
):
    """Full two-phase run; returns (reports, final averaged params, summary).

    The final checkpoint is the elementwise mean of the last
    ``checkpoint_avg`` per-epoch snapshots (the initial weights when no
    epoch ran). With an output directory, writes report.csv, audit.log,
    per-epoch checkpoints, final.bin, scores-final.txt and summary.json.
    """
    trainer = Trainer(cfg, records, trials, gen_cfg, model_cfg, ssps_enabled=ssps_enabled)
    reports: list[EpochReport] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(cfg.epochs):
        reports.append(trainer.run_epoch(epoch))
        snapshot = trainer.params.copy()
        trainer.checkpoints.append(snapshot)
        if len(trainer.checkpoints) > max(1, cfg.checkpoint_avg):
            trainer.checkpoints.pop(0)
        if out_dir:
            save_checkpoint(snapshot, os.path.join(out_dir, f"checkpoint-{epoch:04d}.bin"))

    final = average_checkpoints(trainer.checkpoints) if trainer.checkpoints else trainer.params.copy()
    final_eer, final_dcf = evaluate(final, trials, trainer.records, trainer.model_cfg.input_standardize)
    warmup_end = cfg.sampler.activation_epoch - 1
    summary = {
        "framework": cfg.framework,
        "strategy": cfg.sampler.strategy.value,
        "epochs": cfg.epochs,
        "final_eer": final_eer,
        "final_min_dcf": final_dcf,
        "warmup_end_eer": reports[warmup_end].eer if 0 <= warmup_end < len(reports) else None,
        "checkpoint_avg": min(cfg.checkpoint_avg, max(1, len(reports))),
    }

    if out_dir:
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="ascii") as fh:
            fh.write(REPORT_HEADER + "\n")
            for r in reports:
                fh.write(format_report_row(r) + "\n")
        with open(os.path.join(out_dir, "audit.log"), "w", encoding="ascii") as fh:
            for row in trainer.audit_rows:
                fh.write(row.format() + "\n")
        save_checkpoint(final, os.path.join(out_dir, "final.bin"))
        reps = encode_representations(final, trainer.base, trainer.model_cfg.input_standardize)
        scored = metricsmod.score_trials(reps, trials)
        metricsmod.save_scored_trials(trials, scored, os.path.join(out_dir, "scores-final.txt"))
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="ascii") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1)
            fh.write("\n")

    return reports, final, summary
