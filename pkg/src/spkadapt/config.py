"""INI run configuration: sectioned defaults, file overrides, flag overrides
and a resolved echo that reproduces a run on its own.

Sections: ``[model]`` (ModelConfig), ``[train]`` (TrainConfig minus pruning),
``[prune]`` (the schedule knobs), ``[data]`` (SynthConfig), ``[eval]``,
``[experiment]`` and ``[run]`` (per-command paths and switches).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Iterable

from .experiments import ExperimentConfig, UsageError
from .speaker_memory import ConfigurationError
from .synthdata import SynthConfig
from .training import TrainConfig
from .transformer import ModelConfig

# [prune] key -> TrainConfig field
PRUNE_KEYS = {
    "mode": "prune_mode",
    "target_sparsity": "target_sparsity",
    "interval": "prune_interval",
    "warmup_frac": "prune_warmup_frac",
    "ramp_frac": "prune_ramp_frac",
}
EVAL_KEYS = {"beam_width": "eval_beam"}
EXPERIMENT_KEYS = (
    "seeds", "base_epochs", "adapt_epochs", "onetime_adapt_epochs", "target_sparsity",
    "sparsities", "modes", "adapt_sizes", "arms", "plot_data",
)
SECTIONS = ("model", "train", "prune", "data", "eval", "experiment", "run")


def _coerce(raw: str, like: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            return configparser.RawConfigParser.BOOLEAN_STATES[raw.lower()]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(like[0]) if like else str
            return tuple(kind(s) for s in items)
    except (KeyError, ValueError):
        raise UsageError(f"cannot parse {key} = {raw!r} as {type(like).__name__}") from None
    return raw


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    run: dict[str, str] = field(default_factory=dict)

    def set(self, section: str, key: str, raw: str) -> None:
        """Apply one textual override, validating section and key."""
        if section == "run":
            self.run[key] = raw.strip()
            return
        if section == "model":
            self.model = self._replace(self.model, key, key, raw, section)
        elif section == "train":
            if key in PRUNE_KEYS.values() or key in EVAL_KEYS.values():
                raise UsageError(f"[train] {key} belongs in [prune] or [eval]")
            self.train = self._replace(self.train, key, key, raw, section)
        elif section == "prune":
            self.train = self._replace(self.train, key, PRUNE_KEYS.get(key), raw, section)
        elif section == "eval":
            self.train = self._replace(self.train, key, EVAL_KEYS.get(key), raw, section)
        elif section == "data":
            self.data = self._replace(self.data, key, key, raw, section)
        elif section == "experiment":
            target = key if key in EXPERIMENT_KEYS else None
            self.experiment = self._replace(self.experiment, key, target, raw, section)
        else:
            raise UsageError(f"unknown config section [{section}]; valid: {', '.join(SECTIONS)}")

    @staticmethod
    def _replace(obj, key: str, attr: str | None, raw: str, section: str):
        names = {f.name for f in fields(obj)}
        if attr is None or attr not in names:
            raise UsageError(f"unknown key {key!r} in [{section}]")
        return replace(obj, **{attr: _coerce(raw, getattr(obj, attr), f"[{section}] {key}")})

    def set_seed(self, seed: int) -> None:
        """The single seed feeds data generation and training sub-streams."""
        self.data = replace(self.data, seed=seed)
        self.train = replace(self.train, seed=seed)

    def experiment_config(self) -> ExperimentConfig:
        return replace(self.experiment, model=self.model, train=self.train, data=self.data)

    def sections(self) -> dict[str, dict[str, str]]:
        out: dict[str, dict[str, str]] = {}
        out["model"] = {f.name: _fmt(getattr(self.model, f.name)) for f in fields(self.model)}
        skip = set(PRUNE_KEYS.values()) | set(EVAL_KEYS.values())
        out["train"] = {
            f.name: _fmt(getattr(self.train, f.name)) for f in fields(self.train) if f.name not in skip
        }
        out["prune"] = {k: _fmt(getattr(self.train, a)) for k, a in PRUNE_KEYS.items()}
        out["data"] = {f.name: _fmt(getattr(self.data, f.name)) for f in fields(self.data)}
        out["eval"] = {k: _fmt(getattr(self.train, a)) for k, a in EVAL_KEYS.items()}
        out["experiment"] = {k: _fmt(getattr(self.experiment, k)) for k in EXPERIMENT_KEYS}
        out["run"] = dict(sorted(self.run.items()))
        return out


def load_config(path: str | os.PathLike | None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then ``path`` (if any), then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
    for item in overrides:
        head, sep, raw = item.partition("=")
        section, dot, key = head.partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} must look like section.key=value")
        cfg.set(section.strip(), key.strip(), raw)
    return cfg


def write_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in cfg.sections().items():
        parser[name] = values
    with open(path, "w") as fh:
        parser.write(fh)


def validate(cfg: RunConfig) -> None:
    """Cross-field checks that the dataclasses cannot see on their own."""
    cfg.data.validate()
    if cfg.model.vocab_size != cfg.data.vocab_size or cfg.model.d_feat != cfg.data.d_feat:
        raise ConfigurationError(
            f"model (vocab_size={cfg.model.vocab_size}, d_feat={cfg.model.d_feat}) does not match "
            f"data (vocab_size={cfg.data.vocab_size}, d_feat={cfg.data.d_feat})"
        )
