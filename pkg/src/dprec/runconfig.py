"""Run configuration files: a flat, sectioned, diffable text format.

Sections: [federation], [mechanism], [rec], [accountant], [data],
[output]. Every key is validated against the schema below (unknown keys
are rejected) and every default is recorded there too, so a parsed
config fully captures a run: same file, same results.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields
from typing import Any

from .codec import RecConfig
from .errors import InvalidConfigError
from .federation import MECHANISMS, SAMPLING_MODES, FederationConfig
from .params import (
    GroupPartition,
    LocalDataset,
    ModelSpec,
    dirichlet_partition,
    load_dataset_csv,
    load_dataset_npz,
    synthetic_classification,
)


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"  # synthetic | csv | npz
    n_examples: int = 4000
    feature_dim: int = 20
    num_classes: int = 10
    class_sep: float = 3.0
    concentration: float = 1.0
    test_examples: int = 2000
    seed: int = 1
    task_seed: int = 1
    path: str = ""
    test_path: str = ""
    model: str = "logreg"  # logreg | mlp
    hidden_dim: int = 16


@dataclass(frozen=True)
class MechanismSection:
    kind: str = "none"
    noise_mult: float = 0.0
    clip: float = 0.0


@dataclass(frozen=True)
class RecSection:
    sigma: float = 0.01
    clip_mult: float = 0.5
    bits: int = 7
    grouping: str = "per-tensor"  # per-tensor | whole-model


@dataclass(frozen=True)
class AccountantSection:
    delta: float = 0.0  # 0 means "auto": 1 / n_clients^1.1


@dataclass(frozen=True)
class FederationSection:
    n_clients: int = 10
    per_round: int = 2
    rounds: int = 10
    sampling: str = "with-replacement"
    epochs: int = 1
    batch_size: int = 20
    learning_rate: float = 0.05
    eval_every: int = 1
    master_seed: int = 0


@dataclass(frozen=True)
class OutputSection:
    name: str = "run"


@dataclass(frozen=True)
class RunConfig:
    federation: FederationSection = FederationSection()
    mechanism: MechanismSection = MechanismSection()
    rec: RecSection = RecSection()
    accountant: AccountantSection = AccountantSection()
    data: DataSection = DataSection()
    output: OutputSection = OutputSection()


_SECTIONS: dict[str, type] = {
    "federation": FederationSection,
    "mechanism": MechanismSection,
    "rec": RecSection,
    "accountant": AccountantSection,
    "data": DataSection,
    "output": OutputSection,
}

_CHOICES: dict[tuple[str, str], tuple[str, ...]] = {
    ("federation", "sampling"): SAMPLING_MODES,
    ("mechanism", "kind"): MECHANISMS,
    ("rec", "grouping"): ("per-tensor", "whole-model"),
    ("data", "kind"): ("synthetic", "csv", "npz"),
    ("data", "model"): ("logreg", "mlp"),
}


def _parse_value(section: str, key: str, raw: str, target_type: type) -> Any:
    raw = raw.strip()
    if target_type in (int, float):
        try:
            return target_type(raw)
        except ValueError as exc:
            raise InvalidConfigError(f"[{section}] {key}: {exc}") from exc
    allowed = _CHOICES.get((section, key))
    if allowed and raw not in allowed:
        raise InvalidConfigError(
            f"[{section}] {key} must be one of {', '.join(allowed)}; got {raw!r}"
        )
    return raw


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfigError(f"config syntax error: {exc}") from exc
    built: dict[str, Any] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise InvalidConfigError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        known = {f.name: f.type for f in fields(cls)}
        types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise InvalidConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(section, key, raw, types[key])
        built[section] = cls(**values)
    return RunConfig(**built)


def parse_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse(serialize(x)) == x."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        rendered = {}
        for f in fields(cls):
            value = getattr(obj, f.name)
            rendered[f.name] = repr(value) if isinstance(value, float) else str(value)
        parser[section] = rendered
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_as_dict(cfg: RunConfig) -> dict[str, dict[str, Any]]:
    return {
        section: {f.name: getattr(getattr(cfg, section), f.name) for f in fields(cls)}
        for section, cls in _SECTIONS.items()
    }


def build_datasets(
    data: DataSection, n_clients: int
) -> tuple[LocalDataset, list[LocalDataset], LocalDataset]:
    """Materialize the train set, its client shards, and the test set."""
    if data.kind == "synthetic":
        train = synthetic_classification(
            data.n_examples,
            data.feature_dim,
            data.num_classes,
            seed=data.seed,
            class_sep=data.class_sep,
            task_seed=data.task_seed,
        )
        test = synthetic_classification(
            data.test_examples,
            data.feature_dim,
            data.num_classes,
            seed=data.seed + 1,
            class_sep=data.class_sep,
            task_seed=data.task_seed,
        )
    else:
        loader = load_dataset_csv if data.kind == "csv" else load_dataset_npz
        if not data.path or not data.test_path:
            raise InvalidConfigError("[data] path and test_path required for file datasets")
        train = loader(data.path, num_classes=data.num_classes)
        test = loader(data.test_path, num_classes=train.num_classes)
    shards = dirichlet_partition(train, n_clients, data.concentration, seed=data.seed + 2)
    return train, shards, test


def build_run(cfg: RunConfig) -> tuple[FederationConfig, ModelSpec, list[LocalDataset], LocalDataset]:
    """Turn a parsed config into the objects run_experiment consumes."""
    fed_s = cfg.federation
    train, shards, test = build_datasets(cfg.data, fed_s.n_clients)
    spec = ModelSpec(
        cfg.data.model,
        train.feature_dim,
        train.num_classes,
        cfg.data.hidden_dim if cfg.data.model == "mlp" else 0,
    )
    rec_cfg = None
    if cfg.mechanism.kind in ("dp-rec", "dp-rec-nocomp"):
        partition = (
            spec.partition()
            if cfg.rec.grouping == "per-tensor"
            else GroupPartition.single(spec.partition().total_length)
        )
        rec_cfg = RecConfig(cfg.rec.sigma, cfg.rec.clip_mult, cfg.rec.bits, partition)
    fed_cfg = FederationConfig(
        n_clients=fed_s.n_clients,
        per_round=fed_s.per_round,
        rounds=fed_s.rounds,
        sampling=fed_s.sampling,
        epochs=fed_s.epochs,
        batch_size=fed_s.batch_size,
        learning_rate=fed_s.learning_rate,
        mechanism=cfg.mechanism.kind,
        rec=rec_cfg,
        noise_mult=cfg.mechanism.noise_mult,
        clip_norm=cfg.mechanism.clip,
        delta=cfg.accountant.delta if cfg.accountant.delta > 0 else None,
        eval_every=fed_s.eval_every,
        master_seed=fed_s.master_seed,
    )
    return fed_cfg, spec, shards, test
