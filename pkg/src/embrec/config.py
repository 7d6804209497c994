"""key=value config files for the CLI.

One setting per line, ``#`` starts a comment. Keys are field names of the
config dataclasses, optionally qualified by section (``corpus.n_users``,
``hyper.tau``, ``train.skip_window_seconds``, ``pipeline.N``,
``experiment.missing_windows``). An unqualified key sets every section that
has a field of that name.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .nn import HyperParams
from .pipeline import PipelineConfig
from .synth import CorpusConfig
from .training import TrainConfig


@dataclass
class ExperimentConfig:
    """Knobs for the evaluate / ablation reports."""

    missing_windows: tuple = (0, 5, 10, 30, 60)     # minutes removed at prediction time
    skip_minutes: tuple = (0, 10, 30)               # training skips compared by the ablation
    eval_users: int | None = None                   # cap on test impressions, None for all


@dataclass
class Settings:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    SECTIONS = ("corpus", "hyper", "train", "pipeline", "experiment")

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, hyperparams=self.hyper)

    def apply_seed(self, seed: int) -> None:
        self.corpus.rng_seed = seed
        self.hyper.rng_seed = seed
        self.pipeline.index_seed = seed

    def validate(self) -> None:
        self.corpus.validate()
        self.hyper.validate()
        self.train_config().validate()
        self.pipeline.validate()


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    out = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}", f"expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}", "empty key")
        out.append((key, value))
    return out


def _coerce(key: str, value: str, current, annotation: str):
    try:
        if isinstance(current, bool) or annotation == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if value.lower() == "none" and "None" in annotation:
            return None
        if isinstance(current, tuple) or annotation.startswith("tuple"):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            return tuple(float(p) if "." in p else int(p) for p in parts)
        if isinstance(current, int) or annotation.startswith("int"):
            return int(value)
        if isinstance(current, float) or annotation.startswith("float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r}") from None


def _set(obj, key: str, name: str, value: str) -> None:
    f = {f.name: f for f in dataclasses.fields(obj)}[name]
    setattr(obj, name, _coerce(key, value, getattr(obj, name), str(f.type)))


def apply(settings: Settings, pairs) -> Settings:
    for key, value in pairs:
        if "." in key:
            section, name = key.split(".", 1)
            if section not in Settings.SECTIONS:
                raise ConfigError(key, f"unknown section {section!r}")
            target = getattr(settings, section)
            if name not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigError(key, "unknown setting")
            _set(target, key, name, value)
            continue
        hits = 0
        for section in Settings.SECTIONS:
            target = getattr(settings, section)
            if key in {f.name for f in dataclasses.fields(target)} and key != "hyperparams":
                _set(target, key, key, value)
                hits += 1
        if not hits:
            raise ConfigError(key, "unknown setting")
    return settings


def load_settings(path=None, seed: int | None = None, overrides=()) -> Settings:
    settings = Settings()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {p}: {exc.strerror}") from None
        apply(settings, parse_lines(text, str(p)))
    apply(settings, overrides)
    if seed is not None:
        settings.apply_seed(seed)
    settings.validate()
    return settings
