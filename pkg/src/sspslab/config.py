"""Experiment configuration: defaults plus INI-style config files.

A config file has five sections, [data], [model], [framework], [sampler]
and [schedule]; every key is named after the corresponding field of the
config dataclasses. Unknown keys are rejected so typos fail loudly
(exit code 2 at the CLI).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

from .core import ConfigError, make_rng
from .ssps import Strategy
from .synthdata import GenConfig, generate_dataset, make_trials
from .trainer import ModelConfig, TrainConfig

STRATEGY_ALIASES = {
    "ssl": Strategy.SSL_DEFAULT,
    "nn": Strategy.SSPS_NN,
    "cluster": Strategy.SSPS_CLUSTER,
    "cluster-centroid": Strategy.SSPS_CLUSTER_CENTROID,
    "oracle": Strategy.SUPERVISED_ORACLE,
}

TRIAL_STREAM = 9  # child seed stream for trial sampling


@dataclass(frozen=True)
class ExperimentConfig:
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_target_trials: int = 600
    n_nontarget_trials: int = 600


def parse_strategy(text: str) -> Strategy:
    name = text.strip().lower()
    if name in STRATEGY_ALIASES:
        return STRATEGY_ALIASES[name]
    try:
        return Strategy(name)
    except ValueError:
        raise ConfigError(
            f"unknown sampler strategy {text!r}; expected one of "
            f"{sorted(STRATEGY_ALIASES)} or the full names"
        ) from None


def _dims(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(p) for p in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad dims list {text!r}") from None


class _Section:
    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.present = parser.has_section(name)
        self._section = parser[name] if self.present else {}
        self._seen: set[str] = set()

    def get(self, key: str, kind=str):
        if not self.present or key not in self._section:
            return None
        self._seen.add(key)
        raw = self._section[key]
        try:
            if kind is bool:
                lowered = raw.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return kind(raw)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a valid {kind.__name__}") from None

    def check_consumed(self) -> None:
        if not self.present:
            return
        extra = set(self._section) - self._seen
        if extra:
            raise ConfigError(f"unknown keys in [{self.name}]: {sorted(extra)}")


def _apply(obj, section: _Section, fields: dict):
    updates = {}
    for key, kind in fields.items():
        value = section.get(key, kind)
        if value is not None:
            updates[key] = value
    return replace(obj, **updates) if updates else obj


def load_config(path: str | None = None) -> ExperimentConfig:
    """Defaults, overlaid with the config file when one is given."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    known = {"data", "model", "framework", "sampler", "schedule"}
    extra_sections = set(parser.sections()) - known
    if extra_sections:
        raise ConfigError(f"unknown config sections: {sorted(extra_sections)}")

    data_sec = _Section(parser, "data")
    data = _apply(cfg.data, data_sec, {
        "n_speakers": int, "recs_per_speaker": int, "utts_per_recording": int,
        "dim_input": int, "sigma_recording": float, "sigma_utterance": float,
        "sigma_augment": float, "seed": int,
    })
    n_target = data_sec.get("n_target_trials", int) or cfg.n_target_trials
    n_nontarget = data_sec.get("n_nontarget_trials", int) or cfg.n_nontarget_trials
    data_sec.check_consumed()

    model_sec = _Section(parser, "model")
    model = _apply(cfg.model, model_sec, {
        "head_dim": int, "standardize_projector": bool, "input_standardize": bool,
    })
    for key in ("encoder_layer_dims", "projector_layer_dims"):
        raw = model_sec.get(key, str)
        if raw is not None:
            model = replace(model, **{key: _dims(raw)})
    model_sec.check_consumed()

    fw_sec = _Section(parser, "framework")
    train = cfg.train
    name = fw_sec.get("name", str)
    if name is not None:
        train = replace(train, framework=name.strip().lower())
    train = _apply(train, fw_sec, {
        "tau": float, "moco_queue_size": int, "ema_m": float,
        "swav_tau": float, "n_prototypes": int, "sinkhorn_iters": int,
        "swav_queue_len": int, "swav_queue_start_epoch": int,
        "vicreg_lambda": float, "vicreg_mu": float, "vicreg_nu": float,
        "dino_tau_s": float, "dino_tau_t": float, "dino_center_decay": float,
        "dino_ema_start": float, "dino_ema_end": float,
        "dino_global_views": int, "dino_local_views": int, "grad_clip": float,
    })
    fw_sec.check_consumed()

    sampler_sec = _Section(parser, "sampler")
    sampler = train.sampler
    strategy_text = sampler_sec.get("strategy", str)
    updates = {}
    if strategy_text is not None:
        updates["strategy"] = parse_strategy(strategy_text)
    for key, kind in (("m", int), ("k", int), ("activation_epoch", int),
                      ("pos_queue_capacity", int)):
        value = sampler_sec.get(key, kind)
        if value is not None:
            updates[key.upper() if key in ("m", "k") else key] = value
    if updates:
        sampler = replace(sampler, **updates)
    sampler_sec.check_consumed()

    sched_sec = _Section(parser, "schedule")
    train = _apply(train, sched_sec, {
        "epochs": int, "batch_size": int, "lr": float, "optimizer": str,
        "lr_decay": str, "lr_step_factor": float, "lr_step_every": int,
        "lr_restart_at_activation": bool, "seed": int,
        "augmentation_enabled": bool, "augment_after_activation": bool,
        "checkpoint_avg": int,
        "eval_clusters": int, "eval_cluster_iters": int,
    })
    warmup = sched_sec.get("warmup_epochs_before_ssps", int)
    if warmup is not None:
        if "activation_epoch" in updates and updates["activation_epoch"] != warmup:
            raise ConfigError(
                "warmup_epochs_before_ssps and activation_epoch disagree; set one"
            )
        sampler = replace(sampler, activation_epoch=warmup)
    sched_sec.check_consumed()

    train = replace(train, sampler=sampler)
    return ExperimentConfig(
        data=data, model=model, train=train,
        n_target_trials=n_target, n_nontarget_trials=n_nontarget,
    )


def build_dataset(exp: ExperimentConfig):
    """Materialize the records and trial list an experiment config describes."""
    records = generate_dataset(exp.data)
    trials = make_trials(
        records, exp.n_target_trials, exp.n_nontarget_trials,
        make_rng(exp.data.seed, TRIAL_STREAM),
    )
    return records, trials


DEFAULT_CONFIG_TEXT = """\
# sspslab experiment configuration (all keys optional; these are the defaults)

[data]
n_speakers = 32
recs_per_speaker = 4
utts_per_recording = 8
dim_input = 12
sigma_recording = 0.5
sigma_utterance = 0.1
sigma_augment = 0.2
seed = 1234
n_target_trials = 600
n_nontarget_trials = 600

[model]
# empty dims derive desk-scale defaults: encoder dim_input,64,64,32
encoder_layer_dims =
projector_layer_dims =
head_dim = 256
standardize_projector = true
input_standardize = false

[framework]
name = simclr
tau = 0.03

[sampler]
strategy = ssl_default
k = 0            # 0 derives 2 x number of recordings
m = 1
activation_epoch = 30
# pos_queue_capacity defaults to the dataset size

[schedule]
epochs = 50
batch_size = 64
lr = 0.05
optimizer = sgd
lr_decay = step
seed = 0
augmentation_enabled = true
checkpoint_avg = 10
"""
