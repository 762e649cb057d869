"""JSON configuration: defaults, file loading, and dotted-path overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .geometry import ProjectionGeometry, default_geometry
from .patchify import PatchSpec
from .phantom import AnatomySpec, ScrewModel
from .regressor import AugmentSpec, NetworkConfig


class ConfigError(Exception):
    pass


def default_config() -> dict:
    return {
        "master_seed": 20250810,
        "geometry": default_geometry().to_json(),
        "screw": ScrewModel().to_json(),
        "anatomy": {
            "seeds": [101, 202, 303],
            "shell_semi_axes": [55.0, 45.0, 40.0],
            "shell_thickness": 6.0,
            "mu_bone": 0.06,
            "mu_soft": 0.02,
            "n_inclusions": 40,
            "inclusion_radius": [2.0, 8.0],
            "inclusion_contrast": [0.0, 2.0],
            "dims": [128, 128, 128],
            "spacing": [1.0, 1.0, 1.0],
            "center": [0.0, 0.0, 0.0],
        },
        "dataset": {
            "out_dir": "runs/dataset",
            "factor": 0.1,
            "images": {"train": 10000, "validation": 2000, "test": 1000,
                       "expert": 200},
            "references_per_anatomy": 20,
            "position_sigma_mm": 5.0,
            "direction_cone_deg": 20.0,
            "reference_tilt_max_deg": 25.0,
            "surface_scale": 0.6,
            "step_mm": 0.5,
            "second_view_angles_deg": [60.0],
            "write_raw_sidecar": True,
        },
        "patch": PatchSpec().to_json(),
        "network": {
            "hidden": [256, 64],
            "leaky_slope": 0.01,
            "seed": 7,
            "learning_rate": 0.01,
            "momentum": 0.9,
            "batch_size": 64,
            "epochs": 40,
            "decay_epochs": [20, 32],
            "decay_factor": 0.3,
        },
        "augment": AugmentSpec().to_json(),
        "training": {"patches_per_image": 20, "val_patches_per_image": 2},
        "estimator": {"iterations": 3, "min_line_angle_deg": 10.0},
        "noise": {"eta": 4.0, "annotations_per_image": 1, "split": "train"},
        "experiment": {
            "out_dir": "runs/results",
            "etas": [0.0, 1.0, 2.0, 3.0, 4.0],
            "sizes": [155, 310, 625, 1250, 5000, 10000],
            "include_interpolated_size": False,
            "triple_annotation_on_max": True,
            "size_sweep_eta": 4.0,
            "repetitions": 10,
        },
        "serve": {
            "port": 8008,
            "mode": "practice",
            "records": "runs/annotations.jsonl",
            "window": None,
        },
    }


def _deep_merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults, overlaid with the JSON file when one is given."""
    cfg = default_config()
    if path is not None:
        cfg = _deep_merge(cfg, json.loads(Path(path).read_text()))
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply --set key.path=value pairs; values parse as JSON, else strings."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got: {item}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config path: {key}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config path: {key}")
        node[parts[-1]] = value
    return cfg


# ------------------------------------------------- typed section builders

def geometry_from(cfg: dict) -> ProjectionGeometry:
    return ProjectionGeometry.from_json(cfg["geometry"])


def screw_from(cfg: dict) -> ScrewModel:
    return ScrewModel.from_json(cfg["screw"])


def anatomy_specs_from(cfg: dict) -> list[AnatomySpec]:
    a = cfg["anatomy"]
    out = []
    for seed in a["seeds"]:
        out.append(AnatomySpec(
            seed=int(seed),
            shell_semi_axes=tuple(a["shell_semi_axes"]),
            shell_thickness=float(a["shell_thickness"]),
            mu_bone=float(a["mu_bone"]),
            mu_soft=float(a["mu_soft"]),
            n_inclusions=int(a["n_inclusions"]),
            inclusion_radius=tuple(a["inclusion_radius"]),
            inclusion_contrast=tuple(a["inclusion_contrast"]),
            dims=tuple(a["dims"]),
            spacing=tuple(a["spacing"]),
            center=tuple(a["center"]),
        ))
    return out


def patch_spec_from(cfg: dict) -> PatchSpec:
    return PatchSpec.from_json(cfg["patch"])


def network_config_from(cfg: dict) -> NetworkConfig:
    spec = patch_spec_from(cfg)
    n = cfg["network"]
    return NetworkConfig(
        input_size=spec.patch_width * spec.patch_height,
        hidden=tuple(n["hidden"]),
        leaky_slope=float(n["leaky_slope"]),
        seed=int(n["seed"]),
        learning_rate=float(n["learning_rate"]),
        momentum=float(n["momentum"]),
        batch_size=int(n["batch_size"]),
        epochs=int(n["epochs"]),
        decay_epochs=tuple(n["decay_epochs"]),
        decay_factor=float(n["decay_factor"]),
    )


def augment_from(cfg: dict) -> AugmentSpec:
    return AugmentSpec.from_json(cfg["augment"])
