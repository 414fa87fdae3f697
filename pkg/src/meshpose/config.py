"""Run configuration: TOML sections validated against an embedded schema.

Unknown sections or keys are rejected; every key has a documented default.
Angles are written in degrees in config files and converted to radians at the
type boundary.  Values can be overridden by ``--set section.key=value`` flags
and by environment variables named MESHPOSE_<SECTION>__<KEY>.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python 3.10
    import tomli as _toml

from .adaptation import TrainConfig
from .datagen import GeneratorConfig, ShiftConfig
from .geometry import Camera
from .inference import InferenceConfig


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


def _typed(kind, value, where):
    try:
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "list[str]":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise TypeError
            return list(value)
        if kind == "list[int]":
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise TypeError
            return list(value)
        if kind == "list[float]":
            if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise TypeError
            return [float(v) for v in value]
    except TypeError:
        raise ConfigError(f"{where}: expected {kind}, got {value!r}") from None
    raise AssertionError(f"unknown schema kind {kind}")


# section -> key -> (type, default, documentation)
SCHEMA = {
    "run": {
        "master_seed": ("int", 0, "seed from which every phase seed is derived"),
        "threads": ("int", 1, "worker threads for parallel per-sample stages"),
        "categories": ("list[str]", ["car", "plane"], "object categories to generate/train"),
    },
    "camera": {
        "image_size": ("int", 96, "square image side in pixels"),
        "focal_length": ("float", 140.0, "pinhole focal length in pixels"),
    },
    "generator": {
        "train_per_category": ("int", 1000, "synthetic training samples per category"),
        "adapt_per_category": ("int", 150, "unlabeled shifted-domain samples per category"),
        "test_per_category": ("int", 250, "shifted-domain test samples per category"),
        "azimuth_range_deg": ("list[float]", [0.0, 360.0], "azimuth sampling range"),
        "elevation_range_deg": ("list[float]", [-10.0, 60.0], "elevation sampling range"),
        "inplane_range_deg": ("list[float]", [-5.0, 5.0], "in-plane rotation sampling range"),
        "distance_range": ("list[float]", [2.8, 5.0], "camera distance sampling range, scene units"),
        "texture_pool_size": ("int", 4, "procedural object textures per pool"),
        "background_pool_size": ("int", 20, "procedural backgrounds in the training pool"),
        "background_policy": ("str", "randomized", "randomized | category_correlated"),
    },
    "shift": {
        "recolor": ("float", 0.35, "object channel-mix strength"),
        "brightness": ("float", 0.22, "global brightness jitter range"),
        "contrast": ("float", 0.3, "global log-contrast jitter range"),
        "noise_sigma": ("float", 0.02, "additive pixel noise scale"),
        "swap_background": ("bool", True, "swap to a held-out background pool"),
        "background_offset": ("int", 1000, "first background id of the held-out pool"),
        "background_pool_size": ("int", 12, "held-out background pool size"),
    },
    "extractor": {
        "channels": ("int", 32, "feature channels c"),
        "stride": ("int", 8, "feature-grid stride in pixels"),
    },
    "mesh": {
        "grid_density": ("int", 5, "vertices per cuboid edge"),
        "momentum": ("float", 0.1, "vertex feature moving-average momentum"),
        "momentum_bg": ("float", 0.1, "background feature moving-average momentum"),
        "mesh_scale": ("float", 1.0, "cuboid size relative to the category bounding box"),
    },
    "pretrain": {
        "epochs": ("int", 8, "synthetic pretraining epochs"),
        "batch_size": ("int", 8, "gradient accumulation batch"),
        "learning_rate": ("float", 2e-3, "extractor Adam learning rate (cosine decay)"),
        "contrastive_weight": ("float", 1.0, "scale on the normalized contrastive gradient"),
    },
    "adapt": {
        "rounds": ("int", 3, "pseudo-label refresh rounds"),
        "epochs": ("int", 2, "training epochs per round"),
        "alpha": ("float", 1.0, "domain-contrastive loss weight"),
        "tau": ("float", 0.9, "pseudo-label confidence threshold"),
        "extractor_frozen": ("bool", False, "freeze extractor during adaptation"),
    },
    "fewshot": {
        "epochs": ("int", 6, "epochs for each few-shot phase"),
        "counts": ("list[int]", [0, 7, 20, 50], "annotation budgets per category"),
    },
    "inference": {
        "azimuth_starts": ("int", 12, "azimuth starts in the init grid"),
        "elevation_starts_deg": ("list[float]", [0.0, 30.0], "elevation starts"),
        "step_size": ("float", 0.05, "initial gradient step"),
        "max_iterations": ("int", 30, "max accepted steps per start"),
        "convergence_tolerance": ("float", 1e-4, "pose update norm stopping threshold"),
        "max_backtracks": ("int", 6, "line-search halvings per step"),
    },
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    # -- builders ----------------------------------------------------------
    def camera(self) -> Camera:
        size = self.get("camera", "image_size")
        return Camera.centered(self.get("camera", "focal_length"), (size, size))

    def generator_config(self, samples_per_category: int, master_seed: int | None = None, policy: str | None = None) -> GeneratorConfig:
        g = self.sections["generator"]
        rad = math.radians
        size = self.get("camera", "image_size")
        return GeneratorConfig(
            samples_per_category=samples_per_category,
            azimuth_range=(rad(g["azimuth_range_deg"][0]), rad(g["azimuth_range_deg"][1])),
            elevation_range=(rad(g["elevation_range_deg"][0]), rad(g["elevation_range_deg"][1])),
            inplane_range=(rad(g["inplane_range_deg"][0]), rad(g["inplane_range_deg"][1])),
            distance_range=tuple(g["distance_range"]),
            texture_pool_size=g["texture_pool_size"],
            background_pool_size=g["background_pool_size"],
            background_policy=policy if policy is not None else g["background_policy"],
            master_seed=self.get("run", "master_seed") if master_seed is None else master_seed,
            image_size=(size, size),
            focal_length=self.get("camera", "focal_length"),
        )

    def shift_config(self) -> ShiftConfig:
        s = self.sections["shift"]
        return ShiftConfig(
            recolor=s["recolor"],
            brightness=s["brightness"],
            contrast=s["contrast"],
            noise_sigma=s["noise_sigma"],
            swap_background=s["swap_background"],
            background_offset=s["background_offset"],
            background_pool_size=s["background_pool_size"],
        )

    def train_config(self, fewshot_count: int = 0) -> TrainConfig:
        p, a, m, e, f = (self.sections[k] for k in ("pretrain", "adapt", "mesh", "extractor", "fewshot"))
        return TrainConfig(
            epochs=p["epochs"],
            batch_size=p["batch_size"],
            learning_rate=p["learning_rate"],
            contrastive_weight=p["contrastive_weight"],
            momentum=m["momentum"],
            momentum_bg=m["momentum_bg"],
            alpha=a["alpha"],
            tau=a["tau"],
            adapt_rounds=a["rounds"],
            adapt_epochs=a["epochs"],
            fewshot_epochs=f["epochs"],
            fewshot_count=fewshot_count,
            seed=self.get("run", "master_seed"),
            extractor_frozen=a["extractor_frozen"],
            channels=e["channels"],
            stride=e["stride"],
            grid_density=m["grid_density"],
            mesh_scale=m["mesh_scale"],
        )

    def inference_config(self) -> InferenceConfig:
        i = self.sections["inference"]
        return InferenceConfig(
            azimuth_starts=i["azimuth_starts"],
            elevation_starts_deg=tuple(i["elevation_starts_deg"]),
            step_size=i["step_size"],
            max_iterations=i["max_iterations"],
            convergence_tolerance=i["convergence_tolerance"],
            distance_search_range=tuple(self.sections["generator"]["distance_range"]),
            max_backtracks=i["max_backtracks"],
        )

    def as_dict(self) -> dict:
        return {k: dict(v) for k, v in self.sections.items()}


def _parse_scalar(text: str, kind: str, where: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError
        if kind == "str":
            return text
        if kind.startswith("list["):
            inner = kind[5:-1]
            return [_parse_scalar(part.strip(), inner, where) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind}") from None
    raise AssertionError(kind)


def load_config(path=None, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    """Config = defaults, updated by the TOML file, env vars, then overrides."""
    sections = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}

    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = _toml.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from None
        for sec, keys in data.items():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}: unknown config section [{sec}]")
            if not isinstance(keys, dict):
                raise ConfigError(f"{path}: section [{sec}] must be a table")
            for key, value in keys.items():
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{path}: unknown config key '{sec}.{key}'")
                sections[sec][key] = _typed(SCHEMA[sec][key][0], value, f"{path}: {sec}.{key}")

    env = dict(os.environ) if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith("MESHPOSE_"):
            continue
        body = name[len("MESHPOSE_") :]
        if "__" not in body:
            continue
        sec, key = body.lower().split("__", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"environment override {name}: unknown config key '{sec}.{key}'")
        sections[sec][key] = _parse_scalar(raw, SCHEMA[sec][key][0], name)

    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        sec, key = dotted.split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key '{dotted}'")
        value = raw if not isinstance(raw, str) else _parse_scalar(raw, SCHEMA[sec][key][0], dotted)
        sections[sec][key] = _typed(SCHEMA[sec][key][0], value, dotted)

    _validate(sections)
    return RunConfig(sections=sections)


def _validate(sections: dict) -> None:
    if sections["adapt"]["tau"] < 0 or sections["adapt"]["tau"] > 1:
        raise ConfigError(f"adapt.tau must be in [0, 1], got {sections['adapt']['tau']}")
    if sections["adapt"]["alpha"] < 0:
        raise ConfigError("adapt.alpha must be >= 0")
    if sections["generator"]["background_policy"] not in ("randomized", "category_correlated"):
        raise ConfigError(f"generator.background_policy must be randomized|category_correlated")
    if sections["camera"]["image_size"] < 16:
        raise ConfigError("camera.image_size must be >= 16")
    if sections["extractor"]["stride"] not in (1, 2, 4, 8):
        raise ConfigError("extractor.stride must be one of 1, 2, 4, 8")
    for name in ("train_per_category", "adapt_per_category", "test_per_category"):
        if sections["generator"][name] < 0:
            raise ConfigError(f"generator.{name} must be >= 0")


def schema_help() -> str:
    """Human-readable documentation of every config key and default."""
    lines = ["configuration keys (TOML sections; env override MESHPOSE_<SECTION>__<KEY>):"]
    for sec, keys in SCHEMA.items():
        lines.append(f"  [{sec}]")
        for key, (kind, default, doc) in keys.items():
            lines.append(f"    {key} ({kind}, default {default!r}): {doc}")
    return "\n".join(lines)


def write_default_config(path) -> None:
    """Emit a fully commented config file with all defaults."""
    out = ["# meshpose run configuration (all values shown are the defaults)"]
    for sec, keys in SCHEMA.items():
        out.append(f"\n[{sec}]")
        for key, (kind, default, doc) in keys.items():
            if isinstance(default, bool):
                value = "true" if default else "false"
            elif isinstance(default, str):
                value = f'"{default}"'
            elif isinstance(default, list):
                value = "[" + ", ".join(f'"{v}"' if isinstance(v, str) else str(v) for v in default) + "]"
            else:
                value = str(default)
            out.append(f"{key} = {value}  # {doc}")
    Path(path).write_text("\n".join(out) + "\n")
