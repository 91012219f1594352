"""Backtest configuration: JSON validated against ``config_schema.json``.

Unknown keys anywhere are errors. Relative data paths resolve against the
config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .errors import ValidationError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "risk_free_rate": 0.0,
    "estimation_window": 126,
    "holding_period": 21,
    "adv_window": 21,
    "selection": {
        "factor_weights": None,
        "optimize_weights": False,
        "grid_step": 0.1,
        "in_sample_fraction": 0.5,
        "quantile": 0.2,
        "confidence_mode": "ir",
        "ir_cap": 1.0,
        "auto_views": True,
    },
    "black_litterman": {"risk_aversion": 2.5, "tau": 0.05, "long_only": False, "views": []},
    "rebalance": {
        "policy": "periodic",
        "period": 21,
        "band": 0.02,
        "risk_tolerance": 1.0,
        "cost_rate": 0.0005,
        "compare_paths": 2000,
        "compare_horizon": 21,
        "dp": {"grid": 3, "paths": 200, "discount": 0.95, "risk_aversion": 2.0,
               "convergence_tol": 1e-8, "max_iterations": 5000},
    },
    "impact": {
        "calibrate": True,
        "min_orders": 50,
        "params": {"alpha": 1.0, "beta": 0.6, "gamma": 0.3, "eta": 0.1, "delta": 0.25},
    },
    "tca": {"portfolio_value": 1.0e7, "duration_days": 0.5, "spreads": {}},
    "attribution": {"segment_map": {}, "relative_allocation": False},
    "report": {"figures": True},
}


def schema() -> dict:
    text = resources.files("quantcycle").joinpath("config_schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("spreads", "segment_map"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class BacktestConfig:
    raw: dict
    settings: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.settings["seed"])

    def path(self, key: str) -> Path | None:
        p = self.settings["data"].get(key)
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else (self.base_dir / p)

    def section(self, name: str) -> dict:
        return self.settings[name]

    def __getitem__(self, key):
        return self.settings[key]

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, seed: int | None) -> "BacktestConfig":
        if seed is None:
            return self
        settings = copy.deepcopy(self.settings)
        settings["seed"] = int(seed)
        return BacktestConfig(self.raw, settings, self.base_dir)


def parse_config(raw: dict, base_dir: Path | str = ".") -> BacktestConfig:
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"config error at {where}: {exc.message}") from None
    settings = _merge(DEFAULTS, raw)
    cfg = BacktestConfig(copy.deepcopy(raw), settings, Path(base_dir))
    for key in cfg.settings["data"]:
        p = cfg.path(key)
        if not p.exists():
            raise ValidationError(f"config error at data/{key}: file {p} does not exist")
    return cfg


def load_config(path) -> BacktestConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}", path=str(path)) from None
    return parse_config(raw, path.parent.resolve())


def stage_seed(seed: int, stage: str, *keys: int) -> int:
    """Independent, reproducible sub-stream seed for a named stage."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode()), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
