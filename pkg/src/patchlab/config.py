"""Experiment configuration: one TOML file, strict keys, flag overrides.

Every setting has a default; ``dump_config`` prints the complete default
file.  Unknown keys are rejected with the list of valid keys at that
level, so typos fail fast instead of silently using defaults.
"""

from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .core import AdvMode, AttackSpec, AttackType, InitMode, LossWeights
from .detector import ToyDetectorConfig, ToyTrainConfig
from .evaluate import EvalConfig
from .optimize import TrainConfig
from .render import PhysRanges

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "load_config",
    "apply_overrides",
    "dump_config",
    "attack_spec_from",
    "train_config_from",
    "eval_config_from",
    "detector_configs_from",
    "phys_from",
]


class ConfigError(ValueError):
    """A configuration problem the user must fix (treated as usage error)."""


# Optional keys have no sensible default value; None means "unset".
DEFAULTS: dict = {
    "data": {
        "root": "data/synth",
        "image_size": 256,
        "num_classes": 8,
        "seed": 0,
        "counts": {"train": 800, "val": 100, "test": 100},
    },
    "detector": {
        "widths": [8, 16, 32, 48, 64, 80],
        "conf_thresh": 0.25,
        "nms_iou": 0.45,
        "train": {
            "epochs": 24,
            "lr": 1e-3,
            "batch_size": 8,
            "lambda_box": 5.0,
            "lambda_noobj": 0.5,
            "label_smoothing": 0.1,
            "augment_flip": True,
            "augment_brightness": True,
            "augment_occlusion": False,
            "seed": 0,
        },
    },
    "attack": {
        "type": "hiding",
        "target_class": None,
        "adv_mode": "both",
        "init_mode": "gray",
        "weights": {"adv": 3.0, "tv": 1.0, "nps": 1.0, "his": 0.0},
    },
    "patch": {"side": 64},
    "train": {
        "epochs": 200,
        "lr": 0.03,
        "patience": 50,
        "decay_factor": 0.1,
        "min_lr": 1e-5,
        "batch_size": 8,
        "seed": 0,
        "patch_frac": 0.35,
        "apply_phys": True,
        "train_images": 0,  # 0 = use every image
        "val_images": 0,
        "checkpoint_every": 0,
        "phys": {
            "contrast": [0.8, 1.2],
            "brightness": [-0.1, 0.1],
            "noise_amp": 0.1,
        },
    },
    "eval": {
        "split": "val",
        "seed": 0,
        "conf_thresh": 0.25,
        "nms_iou": 0.45,
        "batch_size": 8,
        "max_images": 0,
        "apply_phys": True,
        "patch_frac": 0.35,
    },
    "colorsim": {"filter_threshold": 0.1, "reference_class": None},
    "blackbox": {
        "budget": 0,  # required > 0 for shadow-attack
        "conf_thresh": 0.25,
        "eval_split": "test",
        "shadow": {
            "widths": [12, 24, 40, 56, 72],
            "epochs": 24,
            "lr": 1e-3,
            "seed": 1,
        },
    },
    "output": {"dir": "out"},
}

# keys whose default is None: (expected python types)
_OPTIONAL_TYPES = {
    ("attack", "target_class"): (int,),
    ("colorsim", "reference_class"): (int,),
}


def _check_types(path: tuple[str, ...], value, default) -> None:
    if default is None:
        expected = _OPTIONAL_TYPES.get(path, ())
        if value is not None and not isinstance(value, expected):
            raise ConfigError(
                f"config key '{'.'.join(path)}' expects {expected[0].__name__}, "
                f"got {type(value).__name__}"
            )
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(
                f"config key '{'.'.join(path)}' expects a boolean, got {value!r}"
            )
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(
                f"config key '{'.'.join(path)}' expects a number, got {value!r}"
            )
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(
                f"config key '{'.'.join(path)}' expects a string, got {value!r}"
            )
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{'.'.join(path)}' expects a list, got {value!r}")


def _merge(base: dict, user: dict, path: tuple[str, ...] = ()) -> dict:
    out = {}
    for key, default in base.items():
        if isinstance(default, dict):
            sub = user.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config key '{'.'.join(path + (key,))}' must be a section")
            out[key] = _merge(default, sub, path + (key,))
        elif key in user:
            _check_types(path + (key,), user[key], default)
            out[key] = user[key]
        else:
            out[key] = copy.deepcopy(default)
    for key in user:
        if key not in base:
            where = ".".join(path) if path else "top level"
            raise ConfigError(
                f"unknown config key '{key}' at {where}; valid keys: {sorted(base)}"
            )
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Load a TOML config merged over defaults, then apply flag overrides.

    Args:
        path: TOML file; None uses pure defaults.
        overrides: "section.key=value" strings (values parsed as TOML).
    """
    user: dict = {}
    if path is not None:
        raw = Path(path)
        if not raw.exists():
            raise ConfigError(f"config file {raw} does not exist")
        try:
            user = tomllib.loads(raw.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{raw}: {exc}") from exc
    cfg = _merge(DEFAULTS, user)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply dotted-path overrides like "train.epochs=10"."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw_value = item.split("=", 1)
        parts = tuple(p for p in dotted.strip().split(".") if p)
        if len(parts) < 2:
            raise ConfigError(f"override key {dotted!r} must be a dotted path like train.epochs")
        try:
            value = tomllib.loads(f"v = {raw_value.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw_value.strip()  # bare string
        node = cfg
        schema = DEFAULTS
        for part in parts[:-1]:
            if part not in schema or not isinstance(schema[part], dict):
                raise ConfigError(
                    f"unknown config section '{part}' in override {dotted!r}; "
                    f"valid keys: {sorted(schema)}"
                )
            node = node[part]
            schema = schema[part]
        leaf = parts[-1]
        if leaf not in schema:
            raise ConfigError(
                f"unknown config key '{leaf}' in override {dotted!r}; valid keys: {sorted(schema)}"
            )
        _check_types(parts, value, schema[leaf])
        node[leaf] = value
    return cfg


def _format_toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, list):
        return "[" + ", ".join(_format_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot format {value!r} as TOML")


def dump_config(cfg: dict | None = None) -> str:
    """Render a config (defaults when None) as a TOML document.

    Keys whose value is unset (None) are emitted as comments.
    """
    cfg = cfg if cfg is not None else DEFAULTS

    def emit(section: dict, path: tuple[str, ...], out: list[str]) -> None:
        scalars = {k: v for k, v in section.items() if not isinstance(v, dict)}
        subs = {k: v for k, v in section.items() if isinstance(v, dict)}
        if path:
            out.append(f"[{'.'.join(path)}]")
        for key, value in scalars.items():
            if value is None:
                out.append(f"# {key} = <unset>")
            else:
                out.append(f"{key} = {_format_toml_value(value)}")
        if scalars:
            out.append("")
        for key, sub in subs.items():
            emit(sub, path + (key,), out)

    lines: list[str] = []
    emit(cfg, (), lines)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# builders from a validated config dict


def attack_spec_from(cfg: dict) -> AttackSpec:
    a = cfg["attack"]
    try:
        attack_type = AttackType(a["type"])
        adv_mode = AdvMode(a["adv_mode"])
        init_mode = InitMode(a["init_mode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return AttackSpec(
            attack_type=attack_type,
            target_class=a["target_class"],
            adv_mode=adv_mode,
            weights=LossWeights(**a["weights"]),
            init_mode=init_mode,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def phys_from(cfg: dict) -> PhysRanges:
    p = cfg["train"]["phys"]
    c_lo, c_hi = p["contrast"]
    b_lo, b_hi = p["brightness"]
    return PhysRanges(
        c_lo=float(c_lo), c_hi=float(c_hi), b_lo=float(b_lo), b_hi=float(b_hi),
        noise_amp=float(p["noise_amp"]),
    )


def train_config_from(cfg: dict, checkpoint_dir: str | None = None) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            patch_side=int(cfg["patch"]["side"]),
            epochs=int(t["epochs"]),
            lr=float(t["lr"]),
            patience=int(t["patience"]),
            decay_factor=float(t["decay_factor"]),
            min_lr=float(t["min_lr"]),
            batch_size=int(t["batch_size"]),
            seed=int(t["seed"]),
            patch_frac=float(t["patch_frac"]),
            apply_phys=bool(t["apply_phys"]),
            phys=phys_from(cfg),
            train_images=int(t["train_images"]) or None,
            val_images=int(t["val_images"]) or None,
            conf_thresh=float(cfg["eval"]["conf_thresh"]),
            nms_iou=float(cfg["eval"]["nms_iou"]),
            checkpoint_every=int(t["checkpoint_every"]),
            checkpoint_dir=checkpoint_dir,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def eval_config_from(cfg: dict) -> EvalConfig:
    e = cfg["eval"]
    try:
        return EvalConfig(
            patch_frac=float(e["patch_frac"]),
            apply_phys=bool(e["apply_phys"]),
            phys=phys_from(cfg),
            conf_thresh=float(e["conf_thresh"]),
            nms_iou=float(e["nms_iou"]),
            batch_size=int(e["batch_size"]),
            max_images=int(e["max_images"]) or None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def detector_configs_from(
    cfg: dict, num_classes: int | None = None, image_size: int | None = None
) -> tuple[ToyDetectorConfig, ToyTrainConfig]:
    d = cfg["detector"]
    t = d["train"]
    try:
        det_cfg = ToyDetectorConfig(
            num_classes=num_classes if num_classes is not None else int(cfg["data"]["num_classes"]),
            image_size=image_size if image_size is not None else int(cfg["data"]["image_size"]),
            widths=tuple(int(w) for w in d["widths"]),
            conf_thresh=float(d["conf_thresh"]),
            nms_iou=float(d["nms_iou"]),
        )
        train_cfg = ToyTrainConfig(
            epochs=int(t["epochs"]),
            lr=float(t["lr"]),
            batch_size=int(t["batch_size"]),
            lambda_box=float(t["lambda_box"]),
            lambda_noobj=float(t["lambda_noobj"]),
            label_smoothing=float(t["label_smoothing"]),
            augment_flip=bool(t["augment_flip"]),
            augment_brightness=bool(t["augment_brightness"]),
            augment_occlusion=bool(t["augment_occlusion"]),
            seed=int(t["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return det_cfg, train_cfg
