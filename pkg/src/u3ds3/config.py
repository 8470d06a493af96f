"""Run configuration: defaults, ``key = value`` files and a canonical dump."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .network import DEFAULT_WIDTHS


@dataclass
class Config:
    # preprocessing
    cell: float = 0.03
    block: float = 1.5
    pts: int = 4096
    normal_k: int = 20
    # superpoints
    gamma: int = 40
    voxel_res: float = 0.03
    seed_res: float | None = None  # 0.5 indoor, 2.0 with road_ransac
    road_ransac: bool = False
    # model
    classes: int | None = None
    res: int = 32
    dim: int = 128
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    kernel: int = 3
    # optimization
    epochs: int = 10
    batch: int = 4
    lr: float = 1e-4
    wd: float = 1e-5
    seed: int = 0
    single_pathway: bool = False
    deterministic: bool = False
    # transforms
    brightness: float = 0.2
    contrast: float = 0.2
    # clustering
    perturb: float = 1e-4
    split_sigma: float = 1e-3
    init_batches: int = 50
    init_points: int = 512
    calibrate_bn: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.widths[-1] != self.dim:
            # a custom dim with the default plan replaces the output width
            if self.widths[:-1] == DEFAULT_WIDTHS[:-1]:
                self.widths = self.widths[:-1] + (self.dim,)
            else:
                raise ValueError(f"last width {self.widths[-1]} must equal dim {self.dim}")
        if self.widths[0] != 12:
            raise ValueError("the first width must be the 12 input features")

    def validate_for_training(self):
        if self.classes is None:
            raise ValueError("--classes is required")
        if self.classes < 1:
            raise ValueError("--classes must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if k == "widths" else v) for k, v in d.items() if k in known})

    def dump(self) -> str:
        """Canonical ``key = value`` text, one line per field, sorted by key."""
        lines = []
        for k, v in sorted(self.to_dict().items()):
            lines.append(f"{k} = {format_value(v)}")
        return "\n".join(lines) + "\n"


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types():
    return {f.name: f.type for f in fields(Config)}


def parse_value(key, text):
    types = _field_types()
    if key not in types:
        raise KeyError(f"unknown config key {key!r}")
    t = str(types[key])
    text = text.strip()
    if text.lower() == "none":
        return None
    if "bool" in t:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if "tuple" in t:
        return tuple(int(x) for x in text.split(","))
    if "int" in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        out[key] = parse_value(key, value)
    return out
