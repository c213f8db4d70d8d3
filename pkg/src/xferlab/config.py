"""Experiment configuration files.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comment lines.  Lists are comma separated.  Every section and key
is checked against the schema below and anything unknown is rejected.

Sections::

    [run]        seed, source, target, workers
    [model]      ModelConfig fields except seed (derived from the run seed)
    [pretrain]   families, classes, k, texture, color, noise, n_per_domain,
                 epochs, learning_rate, batch_size, weight_decay
    [finetune]   epochs, learning_rate, batch_size, weight_decay, grad_clip_norm
    [explain]    source_method (exact|kernel), source_count, target_count,
                 P, baseline
    [transfer]   alpha_grid, lambda2_grid, lambda1, min_accuracy
    [eval]       infidelity_draws, drop_prob
    [compare]    budgets, images
    [domain.X]   DomainSpec fields for domain X plus n_train, n_test
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

from .data import DomainSpec
from .model import ConfigurationError, ModelConfig
from .seeding import derive_seed
from .storage import parse_sidecar

_int, _float, _str = int, float, str


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _strs(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "run": {"seed": _int, "source": _str, "target": _str, "workers": _int},
    "model": {"image_size": _int, "patch_size": _int, "channels": _int, "embed_dim": _int,
              "num_layers": _int, "num_heads": _int, "mlp_ratio": _int, "ln_eps": _float},
    "pretrain": {"families": _strs, "classes": _ints, "k": _int, "texture": _str,
                 "color": _floats, "noise": _float, "n_per_domain": _int, "epochs": _int,
                 "learning_rate": _float, "batch_size": _int, "weight_decay": _float},
    "finetune": {"epochs": _int, "learning_rate": _float, "batch_size": _int,
                 "weight_decay": _float, "grad_clip_norm": _float},
    "explain": {"source_method": _str, "source_count": _int, "target_count": _int,
                "P": _int, "baseline": _str},
    "transfer": {"alpha_grid": _floats, "lambda2_grid": _floats, "lambda1": _float,
                 "min_accuracy": _float},
    "eval": {"infidelity_draws": _int, "drop_prob": _float},
    "compare": {"budgets": _ints, "images": _int},
}
DOMAIN_KEYS: dict[str, Callable[[str], object]] = {
    "family": _str, "classes": _ints, "k": _int, "texture": _str, "color": _floats,
    "noise": _float, "seed": _int, "n_train": _int, "n_test": _int,
}


@dataclass(frozen=True)
class DomainEntry:
    spec: DomainSpec
    n_train: int = 128
    n_test: int = 48


@dataclass(frozen=True)
class PretrainSettings:
    families: tuple[str, ...] = ("strokes", "blobs")
    classes: tuple[int, ...] = tuple(range(8))
    k: int = 3
    texture: str = "grain"
    color: tuple[float, ...] = (0.9, 0.9, 0.9)
    noise: float = 0.05
    n_per_domain: int = 128
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.01


@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 30
    learning_rate: float = 3e-4
    batch_size: int = 32
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0


@dataclass(frozen=True)
class ExplainSettings:
    source_method: str = "kernel"
    source_count: int = 128
    target_count: int = 48
    P: int = 500
    baseline: str = "mean"


@dataclass(frozen=True)
class TransferSettings:
    alpha_grid: tuple[float, ...] = (0.3, 0.5, 0.7)
    lambda2_grid: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(13))
    lambda1: float = 1.0
    min_accuracy: float = 0.9


@dataclass(frozen=True)
class EvalSettings:
    infidelity_draws: int = 32
    drop_prob: float = 0.25


@dataclass(frozen=True)
class CompareSettings:
    budgets: tuple[int, ...] = (10, 25, 50, 100, 200)
    images: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    domains: Mapping[str, DomainEntry]
    source: str
    target: str
    seed: int = 1
    workers: int = 1
    pretrain: PretrainSettings = PretrainSettings()
    finetune: FinetuneSettings = FinetuneSettings()
    explain: ExplainSettings = ExplainSettings()
    transfer: TransferSettings = TransferSettings()
    eval: EvalSettings = EvalSettings()
    compare: CompareSettings = CompareSettings()
    text: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        for role in (self.source, self.target):
            if role not in self.domains:
                raise ConfigurationError(f"[run] names domain {role!r} with no [domain.{role}] section")
        t = self.transfer
        if not t.alpha_grid or not t.lambda2_grid:
            raise ConfigurationError("alpha_grid and lambda2_grid must be nonempty")
        if any(not 0.0 < a < 1.0 for a in t.alpha_grid):
            raise ConfigurationError(f"alpha grid must lie in (0, 1): {t.alpha_grid}")
        if self.explain.source_method not in ("exact", "kernel"):
            raise ConfigurationError(f"source_method must be exact or kernel, "
                                     f"got {self.explain.source_method!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        fams = {e.spec.family for e in self.domains.values()}
        missing = fams - set(self.pretrain.families)
        if missing:
            raise ConfigurationError(f"pretraining mixture lacks families {sorted(missing)}")

    def with_pair(self, source: str, target: str) -> "ExperimentConfig":
        return replace(self, source=source, target=target)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return _build(self.text, seed_override=seed, workers_override=self.workers)

    def with_workers(self, workers: int) -> "ExperimentConfig":
        return replace(self, workers=workers)

    def pretrain_specs(self) -> list[DomainSpec]:
        p, m = self.pretrain, self.model
        return [DomainSpec(f"pretrain-{f}", f, p.classes, k=p.k, texture=p.texture,
                           color=tuple(p.color), noise=p.noise,
                           seed=derive_seed(self.seed, "pretrain-domain", f) % 2 ** 31,
                           image_size=m.image_size, patch_size=m.patch_size, channels=m.channels)
                for f in p.families]


def _convert(section: str, key: str, raw: str, table) -> object:
    if key not in table:
        raise ConfigurationError(f"unknown key {key!r} in [{section}]")
    try:
        return table[key](raw)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _section(parsed, name, table, cls):
    values = {k: _convert(name, k, v, table) for k, v in parsed.get(name, {}).items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from exc


def _build(text: str, where: str = "<config>", seed_override: int | None = None,
           workers_override: int | None = None) -> ExperimentConfig:
    try:
        parsed = parse_sidecar(text, where)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    for sec in parsed:
        if sec not in SCHEMA and not sec.startswith("domain."):
            raise ConfigurationError(f"unknown section [{sec}]")
    run = {k: _convert("run", k, v, SCHEMA["run"]) for k, v in parsed.get("run", {}).items()}
    for key in ("source", "target"):
        if key not in run:
            raise ConfigurationError(f"[run] needs {key}")
    seed = seed_override if seed_override is not None else run.get("seed", 1)
    workers = workers_override if workers_override is not None else run.get("workers", 1)
    mvals = {k: _convert("model", k, v, SCHEMA["model"]) for k, v in parsed.get("model", {}).items()}
    try:
        model = ModelConfig(**{**dict(image_size=16, patch_size=4, embed_dim=32, num_layers=2,
                                      num_heads=4, mlp_ratio=2), **mvals},
                            seed=derive_seed(seed, "model-init") % 2 ** 31)
    except TypeError as exc:
        raise ConfigurationError(f"[model]: {exc}") from exc
    domains = {}
    for sec, items in parsed.items():
        if not sec.startswith("domain."):
            continue
        name = sec[len("domain."):]
        vals = {k: _convert(sec, k, v, DOMAIN_KEYS) for k, v in items.items()}
        n_train, n_test = vals.pop("n_train", 128), vals.pop("n_test", 48)
        if "color" in vals:
            vals["color"] = tuple(vals["color"])
        vals.setdefault("seed", derive_seed(seed, "domain", name) % 2 ** 31)
        if "family" not in vals or "classes" not in vals:
            raise ConfigurationError(f"[{sec}] needs family and classes")
        try:
            spec = DomainSpec(name, image_size=model.image_size, patch_size=model.patch_size,
                              channels=model.channels, **vals)
        except TypeError as exc:
            raise ConfigurationError(f"[{sec}]: {exc}") from exc
        domains[name] = DomainEntry(spec, n_train, n_test)
    return ExperimentConfig(
        model=model, domains=domains, source=run["source"], target=run["target"],
        seed=seed, workers=workers,
        pretrain=_section(parsed, "pretrain", SCHEMA["pretrain"], PretrainSettings),
        finetune=_section(parsed, "finetune", SCHEMA["finetune"], FinetuneSettings),
        explain=_section(parsed, "explain", SCHEMA["explain"], ExplainSettings),
        transfer=_section(parsed, "transfer", SCHEMA["transfer"], TransferSettings),
        eval=_section(parsed, "eval", SCHEMA["eval"], EvalSettings),
        compare=_section(parsed, "compare", SCHEMA["compare"], CompareSettings),
        text=text)


def parse_config(text: str, where: str = "<config>") -> ExperimentConfig:
    return _build(text, where)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
