"""Scenario configuration: YAML in, validated pydantic models out."""
from __future__ import annotations

import json
import logging
from importlib import resources
from pathlib import Path
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .consensus import ConsensusMode
from .core import BEHAVIORS

log = logging.getLogger(__name__)

BUILTIN_SCORES = "builtin:volunteer-scores"


class ConfigError(ValueError):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProfileSpec(_Model):
    name: str | None = None
    quality_mean: float = Field(ge=0.0, le=100.0)
    quality_stddev: float = Field(default=4.0, ge=0.0)
    trust: float | None = Field(default=None, gt=0.0, lt=1.0)
    byzantine: list[str] = Field(default_factory=list)
    latency: float | None = Field(default=None, gt=0.0)

    @field_validator("byzantine")
    @classmethod
    def _known(cls, v):
        for b in v:
            if b not in BEHAVIORS or b == "none":
                raise ValueError(f"unknown byzantine behavior {b!r}")
        return v


class ByzantineSpec(_Model):
    count: int = Field(default=0, ge=0)
    behaviors: list[str] = Field(default_factory=lambda: ["bad-vote", "invalid-proof",
                                                          "fake-response", "silent"])
    placement: Literal["lowest-trust", "ids"] = "lowest-trust"
    ids: list[int] = Field(default_factory=list)
    activation: Union[Literal["trust"], float] = "trust"

    @field_validator("behaviors")
    @classmethod
    def _known(cls, v):
        for b in v:
            if b not in BEHAVIORS or b == "none":
                raise ValueError(f"unknown byzantine behavior {b!r}")
        return v

    @field_validator("activation")
    @classmethod
    def _prob(cls, v):
        if not isinstance(v, str) and not 0.0 <= v <= 1.0:
            raise ValueError("activation probability must lie in [0, 1]")
        return v


class NodesSpec(_Model):
    count: int | None = Field(default=None, ge=1)
    scores_file: str | None = BUILTIN_SCORES
    quality_stddev: float | None = Field(default=None, ge=0.0)
    profiles: list[ProfileSpec] | None = None
    byzantine: ByzantineSpec = Field(default_factory=ByzantineSpec)
    latency_spread: float = Field(default=1.0, ge=0.0)
    unsafe: bool = False


class TrustSpec(_Model):
    mean: float = Field(default=0.1, gt=0.0, lt=1.0)
    variance: float = Field(default=0.6, gt=0.0)


class ConsensusSpec(_Model):
    mode: ConsensusMode = ConsensusMode.WBFT
    modes: list[ConsensusMode] | None = None
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    beta: float = Field(default=0.5, ge=0.0, le=1.0)
    retry_base_ticks: int | None = Field(default=None, ge=0)
    retry_max: int = Field(default=16, ge=0)
    pipeline: bool = True
    recalibrate: bool = True
    penalty: float = Field(default=0.5, gt=0.0, le=1.0)
    reward: float = Field(default=1.02, ge=1.0)
    smoothing: float = Field(default=0.2, ge=0.0, le=1.0)
    abc_k: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _alpha_beta(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ValueError(f"alpha+beta≠1 (alpha={self.alpha}, beta={self.beta})")
        return self

    def mode_list(self) -> list[ConsensusMode]:
        return list(self.modes) if self.modes else [self.mode]


class HscSpec(_Model):
    omega: float = Field(default=0.5, gt=0.0, lt=1.0)
    gamma: float = Field(default=1.0, ge=0.0)
    lambda_penalty: float | None = Field(default=None, ge=0.0)
    k_max: int = Field(default=5, ge=1)
    n_init: int = Field(default=4, ge=1)
    k: int | None = Field(default=None, ge=1)
    latency_noise: float = Field(default=0.05, ge=0.0)


class ChannelSpec(_Model):
    bandwidth: float = Field(default=15_000.0, gt=0.0)
    capacity: float = Field(default=15_000.0, gt=0.0)
    rate: float = Field(default=10_000.0, gt=0.0)
    subcarriers: int = Field(default=1, ge=1)
    slot: float | None = Field(default=None, gt=0.0)
    target_pl: float | None = Field(default=0.9, gt=0.0, lt=1.0)
    link_success: float | None = Field(default=None, gt=0.0, le=1.0)
    grid: list[float] | None = None
    tick_seconds: float = Field(default=1e-4, gt=0.0)
    jitter_ticks: int = Field(default=0, ge=0)

    @field_validator("grid")
    @classmethod
    def _grid(cls, v):
        if v is not None and any(not 0.0 < p < 1.0 for p in v):
            raise ValueError("P_l grid values must lie in (0, 1)")
        return v


class WorkloadSpec(_Model):
    requests: int = Field(default=100, ge=0)
    entry: Union[Literal["round-robin", "random"], list[int]] = "round-robin"
    reroute: Literal["next", "random"] = "next"
    reelect: Literal["always", "on-fault"] = "always"
    header_only_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    replicate: bool = True


class ScenarioConfig(_Model):
    scenario_id: str = "scenario"
    nodes: NodesSpec = Field(default_factory=NodesSpec)
    trust: TrustSpec = Field(default_factory=TrustSpec)
    consensus: ConsensusSpec = Field(default_factory=ConsensusSpec)
    hsc: HscSpec = Field(default_factory=HscSpec)
    channel: ChannelSpec = Field(default_factory=ChannelSpec)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    seeds: list[int] = Field(default_factory=lambda: [0])

    @model_validator(mode="after")
    def _nodes(self):
        n = self.node_count()
        if n < 4:
            raise ValueError(f"node count must be at least 4 (got {n})")
        f = self.byzantine_count()
        if f > (n - 1) // 3 and not self.nodes.unsafe:
            raise ValueError(f"{f} Byzantine nodes exceed floor((n-1)/3) = {(n - 1) // 3}; "
                             "set nodes.unsafe to override")
        if self.hsc.k_max > n:
            raise ValueError(f"hsc.k_max={self.hsc.k_max} exceeds node count {n}")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        return self

    def node_count(self) -> int:
        if self.nodes.profiles:
            return len(self.nodes.profiles)
        if self.nodes.count:
            return self.nodes.count
        if self.nodes.scores_file:
            return len(load_scores(self.nodes.scores_file).nodes)
        return 0

    def byzantine_count(self) -> int:
        if self.nodes.profiles:
            return sum(1 for p in self.nodes.profiles if p.byzantine)
        b = self.nodes.byzantine
        return len(b.ids) if b.placement == "ids" else b.count


def load_scores(path: str):
    from .weights import ScoreMatrix
    if path == BUILTIN_SCORES:
        ref = resources.files("wbft") / "data" / "volunteer_scores.csv"
        with resources.as_file(ref) as p:
            return ScoreMatrix.from_csv(p)
    return ScoreMatrix.from_csv(path)


def _log_defaults(model: BaseModel, prefix: str = "") -> list[str]:
    applied = []
    for name, info in type(model).model_fields.items():
        value = getattr(model, name)
        path = f"{prefix}{name}"
        if name not in model.model_fields_set:
            applied.append(path)
            log.info("default %s = %r", path, value if not isinstance(value, BaseModel) else "{}")
        if isinstance(value, BaseModel):
            applied += _log_defaults(value, path + ".")
    return applied


def parse_config(data: dict, source: str = "<config>") -> ScenarioConfig:
    try:
        cfg = ScenarioConfig.model_validate(data or {})
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(x) for x in first["loc"]) or "<root>"
        raise ConfigError(f"{source}: invalid field {loc}: {first['msg']}") from None
    _log_defaults(cfg)
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    """Parse YAML, apply and log defaults, validate."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: parse error at {where}: "
                          f"{getattr(exc, 'problem', exc)}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data or {}, str(path))


def config_schema() -> str:
    return json.dumps(ScenarioConfig.model_json_schema(), indent=2, sort_keys=True)


def reference_config_path() -> Path:
    return Path(str(resources.files("wbft") / "data" / "reference.yaml"))
