"""Flat ``key = value`` configuration files mapped onto the component configs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from steprag.integrate import CompressionConfig, LatencyModel
from steprag.harness import PipelineConfig
from steprag.policy import DEFAULT_HIDDEN, DEFAULT_TAU, MAX_RETRIEVALS, TrainConfig
from steprag.rsus import RsusConfig

# key -> (type, default)
KEYS: dict[str, tuple[type, object]] = {
    "rsus.alpha": (float, 0.40),
    "rsus.beta": (float, 0.35),
    "rsus.gamma": (float, 0.25),
    "rsus.k_consistency": (int, 3),
    "rsus.entropy_window": (int, 100),
    "policy.tau": (float, DEFAULT_TAU),
    "policy.hidden": (int, DEFAULT_HIDDEN),
    "policy.learn_tau": (bool, False),
    "policy.max_retrievals": (int, MAX_RETRIEVALS),
    "train.lambda1_start": (float, 0.5),
    "train.lambda1_end": (float, 0.1),
    "train.lambda2": (float, 0.05),
    "train.lr": (float, 1e-4),
    "train.batch": (int, 64),
    "train.steps": (int, 5000),
    "train.seed": (int, 0),
    "integrate.tau_rel": (float, 0.45),
    "integrate.cache_capacity": (int, 32),
    "latency.retrieval_ms": (float, 171.0),
    "latency.per_token_ms": (float, 1.47),
    "latency.prefix_reuse_discount": (float, 2.1),
    "latency.restart_ms": (float, 420.0),
    "cost.output_price_per_million": (float, 2.19),
    "retrieval.k": (int, 5),
    "env.seed": (int, 0),
    "env.entities": (int, 200),
    "env.relations": (int, 3),
    "env.questions": (int, 300),
    "env.hops": (str, "mixed"),
    "env.gap_rate": (float, 0.5),
    "env.single_gap": (bool, False),
}


def _coerce(key: str, raw: str):
    kind = KEYS[key][0]
    if kind is bool:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


@dataclass
class Settings:
    values: dict[str, object] = field(default_factory=lambda: {k: d for k, (_, d) in KEYS.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def rsus(self) -> RsusConfig:
        v = self.values
        return RsusConfig(v["rsus.alpha"], v["rsus.beta"], v["rsus.gamma"], v["rsus.k_consistency"],
                          v["rsus.entropy_window"])

    def latency(self) -> LatencyModel:
        v = self.values
        return LatencyModel(v["latency.retrieval_ms"], v["latency.per_token_ms"],
                            v["latency.prefix_reuse_discount"], v["latency.restart_ms"],
                            v["cost.output_price_per_million"])

    def pipeline(self) -> PipelineConfig:
        v = self.values
        return PipelineConfig(k=v["retrieval.k"], compression=CompressionConfig(v["integrate.tau_rel"]),
                              latency=self.latency(), rsus=self.rsus(),
                              cache_capacity=v["integrate.cache_capacity"],
                              max_retrievals=v["policy.max_retrievals"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.lambda1_start"], v["train.lambda1_end"], v["train.lambda2"],
                           v["train.lr"], v["train.batch"], v["train.steps"], v["train.seed"])


def parse_config(text: str, source: str = "<config>") -> Settings:
    """Parse ``key = value`` lines; ``#`` starts a comment and unknown keys are errors."""
    settings = Settings()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        settings.values[key] = _coerce(key, raw)
    return settings


def load_config(path: str | Path | None) -> Settings:
    if path is None:
        return Settings()
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
