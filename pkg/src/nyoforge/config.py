"""Run configuration loaded from TOML.

Schema (relative paths resolve against the config file's directory)::

    [[datasets]]            # one table per source
    name = "web"
    path = "data/web"
    weight = 0.75
    glob = "*.jsonl"        # optional

    [tokenizer]
    path = "tok.txt"        # load if present, else train and save here
    vocab_size = 512        # training target
    max_documents = 20000   # training sample cap, 0 = all

    [model]
    preset = "desk"         # optional; other keys override its fields
    d_model = 64
    init_std = 0.02
    [model.loss]
    mode = "maxz"

    [optim]                 # OptimConfig fields
    max_lr = 3e-4

    [runtime]
    seed = 0
    world_size = 1
    rank = 0
    num_workers = 1
    batch_size = 8
    checkpoint_dir = "ckpt"
    checkpoint_every = 100
    log_path = "ckpt/metrics.jsonl"
    shuffle_buffer = 0
    threaded = false
    queue_depth = 16
    exhaustion = "renormalize"   # or "stop"

    [sft]                   # optional
    lr = 2e-5
    epochs = 1
    batch_size = 4
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .corpus import DatasetSpec
from .errors import BadConfig, ConfigError
from .model import PRESETS, LossConfig, ModelConfig
from .trainer import OptimConfig

SECTIONS = {"datasets", "tokenizer", "model", "optim", "runtime", "sft"}


@dataclass(frozen=True)
class TokenizerSection:
    path: Path | None = None
    vocab_size: int = 512
    max_documents: int = 0


@dataclass(frozen=True)
class RuntimeSection:
    seed: int = 0
    world_size: int = 1
    rank: int = 0
    num_workers: int = 1
    batch_size: int = 8
    checkpoint_dir: Path = Path("checkpoints")
    checkpoint_every: int = 100
    log_path: Path | None = None
    shuffle_buffer: int = 0
    threaded: bool = False
    queue_depth: int = 16
    exhaustion: str = "renormalize"


@dataclass(frozen=True)
class SftSection:
    lr: float = 2e-5
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    datasets: tuple[DatasetSpec, ...]
    tokenizer: TokenizerSection
    model: ModelConfig
    optim: OptimConfig
    runtime: RuntimeSection
    sft: SftSection = field(default_factory=SftSection)
    init_std: float = 0.02
    source: Path | None = None

    @property
    def weights(self) -> dict[str, float]:
        return {d.name: d.weight for d in self.datasets}

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, runtime=dataclasses.replace(self.runtime, seed=seed))

    def validate(self) -> list[str]:
        """Problems that only show up against the filesystem; empty when runnable."""
        problems = []
        for d in self.datasets:
            if not d.root.is_dir():
                problems.append(f"dataset {d.name}: directory {d.root} does not exist")
            elif not d.matched_files():
                problems.append(f"dataset {d.name}: no files match {d.file_glob!r} under {d.root}")
        tok = self.tokenizer
        if tok.path is not None and not tok.path.exists() and not self.datasets:
            problems.append(f"tokenizer {tok.path} does not exist and there is no corpus to train it on")
        if tok.vocab_size != self.model.vocab_size and (tok.path is None or not tok.path.exists()):
            problems.append(f"tokenizer.vocab_size {tok.vocab_size} != model.vocab_size {self.model.vocab_size}")
        return problems


def _fields(cls, table: dict, section: str, skip=()) -> dict:
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    return dict(table)


def _path(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def parse_config(data: dict, base: Path = Path(".")) -> RunConfig:
    unknown = set(data) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    try:
        datasets = []
        for i, d in enumerate(data.get("datasets", [])):
            extra = set(d) - {"name", "path", "weight", "glob"}
            if extra:
                raise ConfigError(f"[[datasets]] #{i}: unknown keys {sorted(extra)}")
            if "name" not in d or "path" not in d:
                raise ConfigError(f"[[datasets]] #{i}: name and path are required")
            datasets.append(
                DatasetSpec(d["name"], _path(base, d["path"]), float(d.get("weight", 1.0)), d.get("glob", "*.jsonl"))
            )
        if len({d.name for d in datasets}) != len(datasets):
            raise ConfigError("dataset names must be unique")

        tok = _fields(TokenizerSection, data.get("tokenizer", {}), "tokenizer")
        if "path" in tok:
            tok["path"] = _path(base, tok["path"])
        tokenizer = TokenizerSection(**tok)

        model_tab = dict(data.get("model", {}))
        preset = model_tab.pop("preset", None)
        init_std = float(model_tab.pop("init_std", 0.02))
        loss_tab = model_tab.pop("loss", {})
        _fields(LossConfig, loss_tab, "model.loss")
        _fields(ModelConfig, model_tab, "model", skip={"loss"})
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown model preset {preset!r}; known: {sorted(PRESETS)}")
            model = dataclasses.replace(PRESETS[preset], **model_tab)
        else:
            model = ModelConfig(**model_tab)
        model = dataclasses.replace(model, loss=dataclasses.replace(model.loss, **loss_tab))

        optim = OptimConfig(**_fields(OptimConfig, data.get("optim", {}), "optim"))

        rt = _fields(RuntimeSection, data.get("runtime", {}), "runtime")
        if "checkpoint_dir" in rt:
            rt["checkpoint_dir"] = _path(base, rt["checkpoint_dir"])
        else:
            rt["checkpoint_dir"] = base / "checkpoints"
        if rt.get("log_path") is not None:
            rt["log_path"] = _path(base, rt["log_path"])
        runtime = RuntimeSection(**rt)
        sft = SftSection(**_fields(SftSection, data.get("sft", {}), "sft"))
    except (TypeError, ValueError, BadConfig) as exc:
        raise ConfigError(str(exc)) from exc

    if runtime.world_size < 1 or not 0 <= runtime.rank < runtime.world_size:
        raise ConfigError("runtime: need world_size >= 1 and 0 <= rank < world_size")
    if runtime.batch_size < 1 or runtime.num_workers < 1 or runtime.checkpoint_every < 1:
        raise ConfigError("runtime: batch_size, num_workers and checkpoint_every must be positive")
    if runtime.exhaustion not in ("renormalize", "stop"):
        raise ConfigError(f"runtime.exhaustion must be 'renormalize' or 'stop', got {runtime.exhaustion!r}")
    if sft.batch_size < 1:
        raise ConfigError("sft: batch_size must be positive")
    return RunConfig(tuple(datasets), tokenizer, model, optim, runtime, sft, init_std)


def load_config(path: str | PathLike) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = parse_config(data, path.resolve().parent)
    return dataclasses.replace(cfg, source=path)
