"""Experiment configuration: one JSON document, every default spelled out."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from ..lab.config import AttackConfig, Method

PIPELINES = ("GWAD", "GWADPlus")
SEED_KEYS = ("data", "victim", "victim_b", "train_traces", "eval_traces",
             "detector", "injection", "checkpoints", "benign")


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "pipeline": "GWAD",
    "seed": 0,
    "seeds": {},                       # per-stage overrides; missing keys derive from seed
    "data": {"n_per_class": 200, "d": 3072, "n_classes": 10, "test_frac": 0.5},
    "victim": {"hidden": 64, "epochs": 20, "lr": 0.05, "momentum": 0.9, "batch_size": 64,
               "weights": None},
    "attacks": [m.value for m in Method],
    "attack": {"query_budget": 2500, "rho_max": 0.1},
    "train_traces_per_attack": 10,
    "eval_traces_per_attack": 4,
    "window": 256,
    "checkpoints": {"mode": "random", "train_per_trace": 150, "eval_per_trace": 500,
                    "stride": 64},
    "detector": {"epochs": 100, "batch_size": 128, "learning_rate": 0.01, "momentum": 0.9,
                 "benign_per_dist": 375, "benign_streams": 1500,
                 "augment_r_b": [0.5, 1.0], "weights": None},
    "r_b": 0.0,
    "alpha_max": None,
    "r_mu": None,
    "screener": {"theta": 0.30, "depth": 100, "canny_sigma": 1.0,
                 "canny_low": 0.1, "canny_high": 0.3},
    "benign_eval": {"streams": 1000},
    "sweep": {"r_b_values": [0.0, 0.5, 1.0, 1.5, 2.5], "attack": "SignOpt"},
    "ablation": {"sizes": [16, 32, 64, 128, 256]},
    "output": {"dir": "out", "format": "json"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k not in ("seeds", "attack"):
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


class ExperimentConfig:
    """Validated experiment settings; ``raw`` is the fully merged document."""

    def __init__(self, raw: dict | None = None, base_dir: Path | None = None):
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        self.raw = _merge(DEFAULTS, raw)
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self._validate()

    # -- access -------------------------------------------------------------
    def __getitem__(self, key):
        return self.raw[key]

    @property
    def pipeline(self) -> str:
        return self.raw["pipeline"]

    @property
    def window(self) -> int:
        return int(self.raw["window"])

    @property
    def methods(self) -> list[Method]:
        return [Method(m) for m in self.raw["attacks"]]

    def seed(self, stage: str) -> int:
        if stage not in SEED_KEYS:
            raise KeyError(stage)
        s = self.raw["seeds"].get(stage)
        if s is None:
            # stage seeds are derived from the global seed and stage name
            digest = hashlib.sha256(f"{self.raw['seed']}:{stage}".encode()).digest()
            s = int.from_bytes(digest[:8], "little")
        return int(s)

    def all_seeds(self) -> dict[str, int]:
        return {k: self.seed(k) for k in SEED_KEYS}

    def attack_config(self, **over) -> AttackConfig:
        kw = dict(self.raw["attack"])
        if self.raw["alpha_max"] is not None:
            kw["alpha_max"] = self.raw["alpha_max"]
        if self.raw["r_mu"] is not None:
            kw["r_mu"] = self.raw["r_mu"]
        kw.update(over)
        try:
            return AttackConfig.from_dict(kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"attack config: {e}") from e

    def resolve(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, **over) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in over.items():
            if isinstance(v, dict) and isinstance(raw.get(k), dict):
                raw[k].update(v)
            else:
                raw[k] = v
        return ExperimentConfig(raw, self.base_dir)

    def experiment(self) -> dict:
        """The settings that determine results (everything but output locations)."""
        return {k: v for k, v in self.raw.items() if k != "output"}

    def canonical_json(self) -> str:
        return json.dumps(self.experiment(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    # -- validation ---------------------------------------------------------
    def _validate(self) -> None:
        r = self.raw
        if r["pipeline"] not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        if not isinstance(r["seed"], int) or isinstance(r["seed"], bool) or r["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        for k, v in r["seeds"].items():
            if k not in SEED_KEYS:
                raise ConfigError(f"unknown seed stage {k!r}")
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"seed {k!r} must be a non-negative integer")
        try:
            self.methods
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not r["attacks"]:
            raise ConfigError("need at least one attack")
        self.attack_config()
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        budget = self.attack_config().query_budget
        if self.window > budget - 2:
            raise ConfigError(f"window {self.window} cannot fill from a {budget}-query trace")
        if r["r_b"] < 0:
            raise ConfigError("r_b must be >= 0")
        cp = r["checkpoints"]
        if cp["mode"] not in ("random", "stride"):
            raise ConfigError("checkpoints.mode must be 'random' or 'stride'")
        if cp["stride"] < 1:
            raise ConfigError("checkpoints.stride must be >= 1")
        d = r["data"]
        if d["d"] < 512 or d["n_classes"] < 2 or d["n_per_class"] < 1:
            raise ConfigError("data: need d >= 512, n_classes >= 2, n_per_class >= 1")
        if not 0 < d["test_frac"] < 1:
            raise ConfigError("data.test_frac must be in (0, 1)")
        det = r["detector"]
        if det["epochs"] < 1 or det["batch_size"] < 1 or det["learning_rate"] <= 0:
            raise ConfigError("detector: bad training hyperparameters")
        sc = r["screener"]
        if not 0 < sc["theta"] < 1 or sc["depth"] < 1:
            raise ConfigError("screener: need 0 < theta < 1 and depth >= 1")
        if r["output"]["format"] not in ("csv", "json"):
            raise ConfigError("output.format must be csv or json")
        if any(w < 2 for w in r["ablation"]["sizes"]):
            raise ConfigError("ablation sizes must be >= 2")
        for key in (("victim", "weights"), ("detector", "weights")):
            p = r[key[0]][key[1]]
            if p is not None and not self.resolve(p).exists():
                raise ConfigError(f"{'.'.join(key)}: file not found: {p}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    return ExperimentConfig(raw, base_dir=path.parent)


def default_config() -> ExperimentConfig:
    return ExperimentConfig({})
