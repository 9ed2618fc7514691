"""JSON experiment configuration: schema, defaults and object construction."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .adapters import ModelDims, TensLoRAAdapter, init_adapter, parse_variant, validate_ranks
from .planner import plan_isoparameters, plan_isorank, preset_table2
from .testbed import BackboneConfig, Dataset, SyntheticTask, TrainConfig, make_task

__all__ = ["SCHEMA", "DEFAULTS", "ExperimentConfig", "load_config", "ConfigError"]


class ConfigError(ValueError):
    """Configuration failed schema or semantic validation."""


_INT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "backbone": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d": _INT, "h": _INT, "L": _INT,
                "vocab": {"type": "integer", "minimum": 2},
                "seq_len": {"type": "integer", "minimum": 2},
                "classes": {"type": "integer", "minimum": 2},
                "mlp_ratio": _INT,
                "seed": {"type": "integer"},
            },
        },
        "adapter": {
            "type": "object",
            "additionalProperties": False,
            "required": ["variant"],
            "properties": {
                "variant": {"type": "string"},
                "ranks": {"type": "object", "additionalProperties": _INT},
                "plan": {
                    "oneOf": [
                        {"type": "object", "additionalProperties": False, "required": ["isorank"],
                         "properties": {"isorank": _INT}},
                        {"type": "object", "additionalProperties": False, "required": ["isoparameters"],
                         "properties": {"isoparameters": {"enum": ["closest", "not_exceeding", "not-exceeding"]},
                                        "lora_rank": _INT}},
                        {"type": "object", "additionalProperties": False, "required": ["preset"],
                         "properties": {"preset": {"const": True}}},
                    ]
                },
                "alpha": {"type": "number"},
                "seed": {"type": "integer"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "peak_lr": {"type": "number", "exclusiveMinimum": 0},
                "min_lr": {"type": "number", "minimum": 0},
                "warmup_steps": {"type": "integer", "minimum": 0},
                "total_steps": _INT,
                "batch": _INT,
                "seed": {"type": "integer"},
                "weight_decay": {"type": "number", "minimum": 0},
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "generator": {"enum": ["majority-token", "pairwise-match"]},
                "params": {"type": "object", "additionalProperties": {"type": "integer"}},
                "seed": {"type": "integer"},
                "train_size": _INT,
                "eval_size": _INT,
            },
        },
    },
}

DEFAULTS = {
    "backbone": {"d": 32, "h": 4, "L": 3, "vocab": 32, "seq_len": 16, "classes": 2, "mlp_ratio": 4, "seed": 0},
    "adapter": {"variant": "QKV_Depth", "alpha": 4.0, "seed": 0},
    "train": {"peak_lr": 1e-3, "min_lr": 1e-6, "total_steps": 500, "batch": 64, "seed": 0, "weight_decay": 0.01},
    "task": {"generator": "majority-token", "params": {}, "seed": 1, "train_size": 2048, "eval_size": 1024},
}


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def backbone(self) -> BackboneConfig:
        b = self.raw["backbone"]
        return BackboneConfig(
            ModelDims(b["d"], b["h"], b["L"]), b["vocab"], b["seq_len"], b["mlp_ratio"], b["classes"], b["seed"]
        )

    @property
    def dims(self) -> ModelDims:
        return self.backbone.dims

    @property
    def variant(self) -> str:
        return parse_variant(self.raw["adapter"]["variant"])

    @property
    def ranks(self) -> dict:
        a = self.raw["adapter"]
        if "ranks" in a:
            return dict(a["ranks"])
        plan = a.get("plan", {"isorank": 4})
        if "isorank" in plan:
            return plan_isorank(self.variant, self.dims, plan["isorank"]).ranks
        if "isoparameters" in plan:
            return plan_isoparameters(self.variant, self.dims, plan.get("lora_rank", 4), plan["isoparameters"]).ranks
        return preset_table2(self.variant)

    @property
    def train(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            peak_lr=t["peak_lr"], min_lr=t["min_lr"], warmup_steps=t.get("warmup_steps"),
            total_steps=t["total_steps"], batch=t["batch"], seed=t["seed"], weight_decay=t["weight_decay"],
        )

    def task(self, split: str = "train") -> SyntheticTask:
        t = self.raw["task"]
        b = self.raw["backbone"]
        params = {"vocab": b["vocab"], "seq_len": b["seq_len"], **t["params"]}
        # held-out data uses a derived seed so it never coincides with training data
        seed = t["seed"] if split == "train" else t["seed"] + 1_000_003
        return SyntheticTask(t["generator"], params, seed)

    def dataset(self, split: str = "train") -> Dataset:
        size = self.raw["task"]["train_size" if split == "train" else "eval_size"]
        return make_task(self.task(split), size)

    def adapter(self) -> TensLoRAAdapter:
        a = self.raw["adapter"]
        return init_adapter(self.variant, self.dims, self.ranks, a["alpha"], a["seed"])


def _merged(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for section, values in given.items():
        out.setdefault(section, {}).update(values)
    return out


def load_config(source) -> ExperimentConfig:
    """Validate a config given as a path, JSON text or dict, and fill defaults.

    Raises :class:`ConfigError` on unknown keys, wrong types or inconsistent
    values.
    """
    if isinstance(source, dict):
        given = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            try:
                text = Path(source).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        try:
            given = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(given, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    adapter = given.get("adapter", {})
    if "ranks" in adapter and "plan" in adapter:
        raise ConfigError("adapter: give either 'ranks' or 'plan', not both")
    cfg = ExperimentConfig(_merged(DEFAULTS, given))
    try:
        cfg.backbone
        validate_ranks(cfg.variant, cfg.ranks)
        cfg.train
        cfg.task("train")
        make_task(cfg.task("train"), 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
