"""Pipeline configuration: one flat dataclass of every tunable knob.

Precedence: built-in defaults < config file (JSON or TOML) < CLI flags.
Unknown keys in a config file are rejected, and every value is range-checked
before a run starts. The resolved config is embedded in each output JSON so
results are reproducible from the artifact alone.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # raster
    window: int = 13            # adaptive threshold window side, odd, >= 3
    offset: float = 10.0        # luminance delta under the window mean

    # tracer
    turdsize: int = 2           # drop contours enclosing area < turdsize
    turn_policy: str = "minority"
    alphamax: float = 1.0       # corner threshold
    opticurve: bool = True
    opttolerance: float = 0.2

    # sampler
    scale_width: float = 4000.0  # normalized sheet width in px
    delta: float = 5.0           # sampling interval, px (normalized frame)
    tau_merge: float = 2.5       # facing-edge merge distance, px

    # segmenter
    epsilon: float = 10.0        # stroke-height floor, px
    beta: float = 1.5            # stroke-height multiplier
    ortho_radius: float = 60.0   # orthogonal neighbor search radius, px
    ortho_angle_deg: float = 15.0
    m_windows: int = 5           # consecutive empty windows for a line label
    line_core: float = 2.0       # half-height of the collinear core band, px
    run_slope_deg: float = 5.0   # max slope step inside a straight run
    min_line_run: float = 150.0  # min arc length of a pipeline run, px
    gap_max: float = 120.0       # max axial gap bridged between runs, px
    collinear_deg: float = 5.0   # slope difference for collinear run pairs
    gap_min_points: int = 3      # candidate points required inside a gap slab
    cluster_link: float = 10.0   # single-linkage distance (2 * delta), px
    cluster_min_points: int = 6
    terminal_slope_deg: float = 30.0
    junction_slope_deg: float = 30.0

    # features
    n_points: int = 1024
    hu_window: int = 6

    # net
    knn_k: int = 20
    conv_widths: tuple[int, int, int] = (64, 64, 128)
    embed_dim: int = 128
    head_hidden: int = 256
    aux_dim: int = 0             # auxiliary embedding hook, 0 = disabled
    arc_scale: float = 30.0
    arc_margin: float = 0.5
    lr: float = 1e-3
    momentum: float = 0.9
    batch: int = 16
    epochs: int = 100
    augment_count: int = 200     # per class per orientation
    aug_rot_deg: float = 20.0
    aug_scale: float = 0.1       # scale sampled from [1-x, 1+x]
    aug_shear: float = 0.05
    aug_jitter: float = 0.01     # per-window matrix entry deviation

    # recognizer
    region_widths: tuple[float, float] = (300.0, 600.0)
    min_score: float = -1.0      # cosine floor; below it class = "unknown"
    rotation_correction: bool = False  # reserved hook, currently a no-op

    # evalkit
    iou_threshold: float = 0.5

    # misc
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        c = self
        checks = [
            (c.window >= 3 and c.window % 2 == 1, "window must be odd and >= 3"),
            (c.turdsize >= 0, "turdsize must be >= 0"),
            (c.turn_policy in TURN_POLICIES, f"turn_policy must be one of {sorted(TURN_POLICIES)}"),
            (0.0 <= c.alphamax <= 4.0 / 3.0, "alphamax must be in [0, 4/3]"),
            (c.opttolerance >= 0.0, "opttolerance must be >= 0"),
            (c.scale_width > 0, "scale_width must be positive"),
            (c.delta > 0, "delta must be positive"),
            (c.tau_merge > 0, "tau_merge must be positive"),
            (c.epsilon > 0 and c.beta > 0, "epsilon and beta must be positive"),
            (c.ortho_radius > 0, "ortho_radius must be positive"),
            (0 < c.ortho_angle_deg < 90, "ortho_angle_deg must be in (0, 90)"),
            (c.m_windows >= 1, "m_windows must be >= 1"),
            (c.line_core >= 0, "line_core must be >= 0"),
            (c.min_line_run > 0, "min_line_run must be positive"),
            (c.gap_max > 0, "gap_max must be positive"),
            (c.gap_min_points >= 1, "gap_min_points must be >= 1"),
            (c.cluster_link > 0, "cluster_link must be positive"),
            (c.cluster_min_points >= 1, "cluster_min_points must be >= 1"),
            (c.n_points >= 8, "n_points must be >= 8"),
            (c.hu_window >= 3, "hu_window must be >= 3"),
            (c.knn_k >= 1, "knn_k must be >= 1"),
            (all(w >= 1 for w in c.conv_widths) and len(c.conv_widths) == 3,
             "conv_widths must be three positive ints"),
            (c.embed_dim >= 1, "embed_dim must be >= 1"),
            (c.head_hidden >= 1, "head_hidden must be >= 1"),
            (c.aux_dim >= 0, "aux_dim must be >= 0"),
            (c.arc_scale > 0, "arc_scale must be positive"),
            (0.0 <= c.arc_margin < math.pi / 2, "arc_margin must be in [0, pi/2)"),
            (c.lr > 0, "lr must be positive"),
            (0.0 <= c.momentum < 1.0, "momentum must be in [0, 1)"),
            (c.batch >= 1, "batch must be >= 1"),
            (c.epochs >= 1, "epochs must be >= 1"),
            (c.augment_count >= 1, "augment_count must be >= 1"),
            (c.aug_rot_deg >= 0 and c.aug_scale >= 0 and c.aug_shear >= 0 and c.aug_jitter >= 0,
             "augment policy ranges must be >= 0"),
            (len(c.region_widths) == 2 and all(w > 0 for w in c.region_widths),
             "region_widths must be two positive numbers"),
            (0.0 < c.iou_threshold <= 1.0, "iou_threshold must be in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        d["region_widths"] = list(self.region_widths)
        return d


TURN_POLICIES = {"black", "white", "left", "right", "minority", "majority"}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def _coerce(name: str, value: Any) -> Any:
    if name in ("conv_widths",):
        seq = tuple(int(v) for v in value)
        return seq
    if name in ("region_widths",):
        return tuple(float(v) for v in value)
    current = getattr(PipelineConfig(), name)
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Resolve defaults, then a JSON/TOML file, then explicit overrides."""
    values: dict[str, Any] = {}
    if path:
        if path.endswith(".toml"):
            try:
                import tomllib  # type: ignore[import-not-found]
            except ModuleNotFoundError:
                import tomli as tomllib  # type: ignore[no-redef]
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        else:
            with open(path) as fh:
                raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a table/object at top level")
        for k, v in raw.items():
            if k not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key: {k!r}")
            values[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {k!r}")
        values[k] = _coerce(k, v)
    return PipelineConfig(**values).validate()
