"""Run configuration: one INI-style key-value file for every module.

All keys have defaults, so the file (and any CLI `--set section.key=value`
override) only needs to state deviations. Example:

    [camera]
    fx = 241.42
    fy = 241.42
    cx = 160.0
    cy = 120.0

    [forest.voting]
    trees = 8
    max_depth = 20

See README.md for the full key list. Section [gestures] maps dataset
gesture labels to five-character stretched-finger bit strings in skeleton
chain order; synthetic gesture labels are already bit strings and bypass
the table.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cascade import CascadeConfig, default_cascade_features
from .detect import DetectConfig
from .errors import ConfigError
from .features import FeatureConfig
from .forest import ForestConfig
from .data_io import SynthDatasetConfig
from .geometry import DEFAULT_BACKGROUND_MM, CameraIntrinsics, DEFAULT_INTRINSICS
from .voting import VotingConfig

# Editable defaults for the 17 MSRA-style gesture directories; bit order is
# the skeleton chain order (index, middle, ring, little, thumb for the
# 21-joint layout). Eyeball these against real data before a full run.
DEFAULT_GESTURE_TABLE = {
    "1": "10000",
    "2": "11000",
    "3": "11001",
    "4": "11110",
    "5": "11111",
    "6": "11100",
    "7": "11010",
    "8": "10110",
    "9": "01110",
    "I": "10000",
    "IP": "10010",
    "L": "10001",
    "MP": "01010",
    "RP": "00110",
    "T": "00001",
    "TIP": "10011",
    "Y": "00011",
}


@dataclass
class PipelineConfig:
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    background: float = DEFAULT_BACKGROUND_MM
    skeleton: str = "msra21"
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    voting: VotingConfig = field(default_factory=VotingConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    synth: SynthDatasetConfig = field(default_factory=SynthDatasetConfig)
    msra_negate_z: bool = True
    gesture_table: dict = field(default_factory=lambda: dict(DEFAULT_GESTURE_TABLE))


def default_config() -> PipelineConfig:
    return PipelineConfig()


def _parse_value(raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _apply(obj, attr, raw, kind):
    setattr(obj, attr, _parse_value(raw, kind))


def _feature_keys(cfg: FeatureConfig):
    return {
        "max_offset_radius_mm": ("max_offset_radius", float),
        "depth_normalize": ("depth_normalize", bool),
        "focal_ref": ("focal_ref", float),
        "candidate_count": ("candidate_count", int),
        "threshold_count": ("threshold_count", int),
    }


def _forest_keys(cfg: ForestConfig):
    return {
        "trees": ("tree_count", int),
        "max_depth": ("max_depth", int),
        "features_per_split": ("features_per_split", int),
        "thresholds_per_feature": ("thresholds_per_feature", int),
        "min_info_gain": ("min_info_gain", float),
        "min_samples_leaf": ("min_samples_leaf", int),
    }


def _synth_keys(cfg: SynthDatasetConfig):
    return {
        "width": ("width", int),
        "height": ("height", int),
        "palm_radius_mm": ("palm_radius", float),
        "palm_jitter_mm": ("palm_jitter", float),
        "depth_mm": ("depth", float),
        "depth_jitter_mm": ("depth_jitter", float),
        "center_jitter_mm": ("center_jitter", float),
        "angle_jitter_deg": ("angle_jitter", float),
        "length_jitter_mm": ("length_jitter", float),
        "width_jitter_mm": ("width_jitter", float),
        "tilt_max": ("tilt_max", float),
        "noise_mm": ("noise", float),
        "min_stretched": ("min_stretched", int),
        "max_stretched": ("max_stretched", int),
        "subjects": ("subjects", int),
    }


def _assign(cfg: PipelineConfig, section: str, key: str, raw: str) -> None:
    cam = {"fx": "fx", "fy": "fy", "cx": "cx", "cy": "cy"}
    if section == "camera":
        if key not in cam:
            raise ConfigError(f"unknown camera key {key!r}")
        vals = {k: getattr(cfg.intrinsics, k) for k in cam}
        vals[key] = _parse_value(raw, float)
        cfg.intrinsics = CameraIntrinsics(**vals)
        return
    if section == "depth":
        if key != "background_mm":
            raise ConfigError(f"unknown depth key {key!r}")
        cfg.background = _parse_value(raw, float)
        return
    if section == "skeleton":
        if key != "preset":
            raise ConfigError(f"unknown skeleton key {key!r}")
        cfg.skeleton = raw.strip()
        return
    if section == "cascade":
        if key == "palm_stages":
            _apply(cfg.cascade, "palm_stages", raw, int)
        elif key == "finger_stages":
            _apply(cfg.cascade, "finger_stages", raw, int)
        else:
            raise ConfigError(f"unknown cascade key {key!r}")
        return
    if section == "voting":
        if key == "training_images":
            _apply(cfg.voting, "training_image_count", raw, int)
        elif key == "distance_threshold_mm":
            _apply(cfg.voting, "distance_threshold", raw, float)
        else:
            raise ConfigError(f"unknown voting key {key!r}")
        return
    if section == "detect":
        keys = {
            "distance_threshold_ratio": ("distance_threshold_ratio", float),
            "curvature_window": ("curvature_window", int),
            "curvature_min_rad": ("curvature_min", float),
        }
        if key not in keys:
            raise ConfigError(f"unknown detect key {key!r}")
        _apply(cfg.detect, keys[key][0], raw, keys[key][1])
        return
    if section in ("features.cascade", "features.voting"):
        target = cfg.cascade.features if section.endswith("cascade") else cfg.voting.features
        keys = _feature_keys(target)
        if key not in keys:
            raise ConfigError(f"unknown {section} key {key!r}")
        _apply(target, keys[key][0], raw, keys[key][1])
        return
    if section in ("forest.cascade", "forest.voting"):
        target = cfg.cascade.forest if section.endswith("cascade") else cfg.voting.forest
        keys = _forest_keys(target)
        if key not in keys:
            raise ConfigError(f"unknown {section} key {key!r}")
        _apply(target, keys[key][0], raw, keys[key][1])
        return
    if section == "synth":
        keys = _synth_keys(cfg.synth)
        if key not in keys:
            raise ConfigError(f"unknown synth key {key!r}")
        _apply(cfg.synth, keys[key][0], raw, keys[key][1])
        return
    if section == "msra":
        if key != "negate_z":
            raise ConfigError(f"unknown msra key {key!r}")
        cfg.msra_negate_z = _parse_value(raw, bool)
        return
    if section == "gestures":
        mask = raw.strip()
        if len(mask) != 5 or set(mask) - {"0", "1"}:
            raise ConfigError(f"gesture {key!r}: mask must be five 0/1 characters, got {raw!r}")
        cfg.gesture_table[key] = mask
        return
    raise ConfigError(f"unknown config section {section!r}")


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Defaults, then the file (if given), then `section.key=value` overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keep gesture label case
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                try:
                    _assign(cfg, section, key, raw)
                except ConfigError as e:
                    raise ConfigError(f"{path} [{section}] {key}: {e}") from None
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        lhs, raw = ov.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        section, key = lhs.rsplit(".", 1)
        _assign(cfg, section.strip(), key.strip(), raw)
    return cfg


def write_config(cfg: PipelineConfig, path) -> None:
    """Write every current value; the file reloads to an identical config."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["camera"] = {k: repr(getattr(cfg.intrinsics, k)) for k in ("fx", "fy", "cx", "cy")}
    cp["depth"] = {"background_mm": repr(cfg.background)}
    cp["skeleton"] = {"preset": cfg.skeleton}
    cp["cascade"] = {
        "palm_stages": str(cfg.cascade.palm_stages),
        "finger_stages": str(cfg.cascade.finger_stages),
    }
    cp["voting"] = {
        "training_images": str(cfg.voting.training_image_count),
        "distance_threshold_mm": repr(cfg.voting.distance_threshold),
    }
    cp["detect"] = {
        "distance_threshold_ratio": repr(cfg.detect.distance_threshold_ratio),
        "curvature_window": str(cfg.detect.curvature_window),
        "curvature_min_rad": repr(cfg.detect.curvature_min),
    }
    for name, fc in (("features.cascade", cfg.cascade.features),
                     ("features.voting", cfg.voting.features)):
        cp[name] = {
            "max_offset_radius_mm": repr(fc.max_offset_radius),
            "depth_normalize": str(fc.depth_normalize).lower(),
            "focal_ref": repr(fc.focal_ref),
            "candidate_count": str(fc.candidate_count),
            "threshold_count": str(fc.threshold_count),
        }
    for name, rc in (("forest.cascade", cfg.cascade.forest),
                     ("forest.voting", cfg.voting.forest)):
        cp[name] = {
            "trees": str(rc.tree_count),
            "max_depth": str(rc.max_depth),
            "features_per_split": str(rc.features_per_split),
            "thresholds_per_feature": str(rc.thresholds_per_feature),
            "min_info_gain": repr(rc.min_info_gain),
            "min_samples_leaf": str(rc.min_samples_leaf),
        }
    synth_keys = _synth_keys(cfg.synth)
    cp["synth"] = {
        k: (repr(getattr(cfg.synth, attr)) if kind is float else str(getattr(cfg.synth, attr)))
        for k, (attr, kind) in synth_keys.items()
    }
    cp["msra"] = {"negate_z": str(cfg.msra_negate_z).lower()}
    cp["gestures"] = dict(cfg.gesture_table)
    with open(path, "w") as fh:
        cp.write(fh)
