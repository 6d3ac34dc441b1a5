"""Network/run configuration and the canonical ``key = value`` text format.

The text format is flat TOML: one key per line, keys sorted, values written as
JSON literals (ints, floats, bools, strings, lists), which TOML accepts as-is.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SkipFlags:
    """Which residual sources are enabled.

    pt: stage anchor into token outputs; pc: stage anchor into channel outputs;
    tc: token output into its channel output; ct: previous mixer into next token.
    The anchor always feeds the first token block of a stage.
    """

    pt: bool = True
    pc: bool = True
    tc: bool = True
    ct: bool = False

    @classmethod
    def parse(cls, text: str) -> "SkipFlags":
        names = {s.strip().lower() for s in text.replace("+", ",").split(",") if s.strip()}
        unknown = names - {"pt", "pc", "tc", "ct", "none"}
        if unknown:
            raise ConfigError(f"unknown skip connections: {sorted(unknown)}")
        return cls(*(n in names for n in ("pt", "pc", "tc", "ct")))

    def label(self) -> str:
        on = [n for n in ("pt", "pc", "tc", "ct") if getattr(self, n)]
        return ",".join(on) if on else "none"


@dataclass(frozen=True)
class NetworkConfig:
    c1: int = 12
    stage_layers: tuple[int, ...] = (1, 1)
    alpha: int = 3
    patch_size: int = 4
    img_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    num_classes: int = 10
    T: int = 4
    tau: float = 2.0
    v_th: float = 1.0
    surrogate_slope: float = 4.0
    detach_reset: bool = True
    skips: SkipFlags = field(default_factory=SkipFlags)
    head_pool: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_layers", tuple(int(n) for n in self.stage_layers))
        object.__setattr__(self, "img_size", tuple(int(n) for n in self.img_size))
        if isinstance(self.skips, str):
            object.__setattr__(self, "skips", SkipFlags.parse(self.skips))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_layers)

    def stage_channels(self, s: int) -> int:
        return self.c1 * 2 ** s

    def stage_size(self, s: int) -> tuple[int, int]:
        f = self.patch_size * 2 ** s
        return self.img_size[0] // f, self.img_size[1] // f

    def validate(self) -> None:
        problems = []
        if self.c1 <= 0:
            problems.append("c1 must be positive")
        if not self.stage_layers or any(n < 1 for n in self.stage_layers):
            problems.append("stage_layers must be a nonempty list of positive ints")
        if self.num_stages > 1 and self.c1 % 3:
            problems.append("c1 must be divisible by 3 when SPE stages exist")
        if self.alpha < 1:
            problems.append("alpha must be >= 1")
        if self.patch_size < 1:
            problems.append("patch_size must be positive")
        if len(self.img_size) != 2:
            problems.append("img_size must be (H, W)")
        elif self.stage_layers and self.patch_size > 0:
            f = self.patch_size * 2 ** (self.num_stages - 1)
            if self.img_size[0] % f or self.img_size[1] % f:
                problems.append(f"img_size must be divisible by patch_size*2^(stages-1) = {f}")
        if self.in_channels < 1:
            problems.append("in_channels must be positive")
        if self.num_classes < 1:
            problems.append("num_classes must be positive")
        if self.T < 1:
            problems.append("T must be positive")
        if not self.tau > 1:
            problems.append("tau must be > 1")
        if not self.v_th > 0:
            problems.append("v_th must be > 0")
        if not self.surrogate_slope > 0:
            problems.append("surrogate_slope must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["stage_layers"] = list(self.stage_layers)
        d["img_size"] = list(self.img_size)
        d["skips"] = self.skips.label()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


# Published architecture variants (patch size 4, alpha 3, 224x224, 1000 classes).
VARIANTS = {
    "MLP-SPE-T": dict(c1=78, stage_layers=(2, 8, 14, 2)),
    "MLP-SPE-S": dict(c1=96, stage_layers=(2, 8, 14, 2)),
    "MLP-SPE-B": dict(c1=108, stage_layers=(2, 10, 24, 2)),
}


def variant(name: str, **overrides) -> NetworkConfig:
    base = dict(alpha=3, patch_size=4, img_size=(224, 224), num_classes=1000, T=4)
    base.update(VARIANTS[name])
    base.update(overrides)
    return NetworkConfig(**base)


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    dataset: str = ""
    eval_dataset: str = ""
    out_dir: str = "run"
    epochs: int = 1
    batch_size: int = 32
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: bool = False
    crop_pad: int = 4
    max_train_samples: int = 0

    RUN_KEYS = ("dataset", "eval_dataset", "out_dir", "epochs", "batch_size", "lr0", "momentum",
                "weight_decay", "augment", "crop_pad", "max_train_samples")

    def __post_init__(self):
        problems = []
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr0 >= 0:
            problems.append("lr0 must be >= 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must be in [0, 1)")
        if self.crop_pad < 0:
            problems.append("crop_pad must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = self.network.to_dict()
        for k in self.RUN_KEYS:
            d[k] = getattr(self, k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        run = {k: d[k] for k in cls.RUN_KEYS if k in d}
        net = NetworkConfig.from_dict({k: v for k, v in d.items() if k not in cls.RUN_KEYS})
        try:
            return cls(network=net, **run)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def validate_paths(self) -> None:
        for key in ("dataset", "eval_dataset"):
            p = getattr(self, key)
            if p and not Path(p).exists():
                raise FileNotFoundError(f"{key} path does not exist: {p}")


def _literal(v) -> str:
    if isinstance(v, float) and not math.isfinite(v):
        raise ConfigError(f"non-finite value {v!r} cannot be serialized")
    if isinstance(v, tuple):
        v = list(v)
    return json.dumps(v)


def dumps(d: dict) -> str:
    return "".join(f"{k} = {_literal(d[k])}\n" for k in sorted(d))


def loads(text: str) -> dict:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from None
    for k, v in d.items():
        if isinstance(v, dict):
            raise ConfigError(f"nested tables are not allowed (key {k!r})")
    return d


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    cfg = RunConfig.from_dict(loads(path.read_text()))
    # relative data/output paths resolve against the config file's directory
    fixes = {}
    for key in ("dataset", "eval_dataset", "out_dir"):
        p = getattr(cfg, key)
        if p and not Path(p).is_absolute():
            fixes[key] = str((path.parent / p).resolve())
    return cfg.replace(**fixes) if fixes else cfg


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg.to_dict()))
