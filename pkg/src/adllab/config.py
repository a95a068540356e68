"""Run configuration: one INI file describing data, model, insertions, optimizer and seeds.

Sections and keys (all optional, defaults are the desk-scale setup)::

    [data]    path = DIR          # an existing dataset directory, or
              <DataSpec fields>   # generate in memory (seed follows the run seed)
    [model]   blocks = name:channels:kernel:pool, ...
    [adl]     insert = block2, block3
              drop_rate, gamma, use_drop, use_importance, normalize_attention
    [has]     insert = input
              grid, hide_prob
    [train]   lr, momentum, epochs, batch_size, weight_decay
    [eval]    theta_box
    [run]     seeds = 0, 1, 2
              variant = vanilla | adl | has
              out = DIR
    [sweep]   axis = drop_rate | gamma | insertion
              values = ...
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .adl import AdlConfig
from .localization import DEFAULT_THETA_BOX
from .model import INPUT, BlockSpec, ConfigError, HasSpec, ModelConfig, SGDConfig
from .synthdata import DataSpec, DataSpecError, read_spec_header

VARIANTS = ("vanilla", "adl", "has")
AXES = ("drop_rate", "gamma", "insertion")
DEFAULT_VALUES = {
    "drop_rate": (0.0, 0.25, 0.5, 0.75, 1.0),
    "gamma": (0.5, 0.8, 0.9, 0.95, 1.0),
}


def default_blocks() -> list[BlockSpec]:
    return [
        BlockSpec("block1", 16, 3, "max2x2"),
        BlockSpec("block2", 32, 3, "max2x2"),
        BlockSpec("block3", 64, 3, "none"),
    ]


def _split(raw: str) -> list[str]:
    return [t.strip() for t in raw.split(",") if t.strip()]


@dataclass
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    data_path: Path | None = None
    blocks: list[BlockSpec] = field(default_factory=default_blocks)
    adl: AdlConfig = field(default_factory=AdlConfig)
    adl_insert: tuple[str, ...] = ("block2", "block3")
    has: HasSpec = field(default_factory=lambda: HasSpec(8, 0.5))
    has_insert: tuple[str, ...] = (INPUT,)
    opt: SGDConfig = field(default_factory=lambda: SGDConfig(lr=0.02, epochs=15))
    theta_box: float = DEFAULT_THETA_BOX
    seeds: tuple[int, ...] = (0, 1, 2)
    variant: str = "adl"
    out: Path | None = None
    sweep_axis: str = "drop_rate"
    sweep_values: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.theta_box < 1.0:
            raise ConfigError(f"theta_box must be in (0, 1), got {self.theta_box}")
        if self.data_path is not None and not self.data_path.is_dir():
            raise ConfigError(f"dataset directory {self.data_path} does not exist")
        if self.sweep_axis not in AXES:
            raise ConfigError(f"sweep axis must be one of {AXES}, got {self.sweep_axis!r}")
        self.model_config(self.data.num_classes).validate()
        self.model_config(self.data.num_classes, "adl").validate()
        self.model_config(self.data.num_classes, "has").validate()

    def model_config(self, num_classes: int, variant: str | None = None, adl: AdlConfig | None = None,
                     adl_insert: tuple[str, ...] | None = None) -> ModelConfig:
        variant = variant or self.variant
        cfg = ModelConfig(list(self.blocks), num_classes)
        if variant == "adl":
            a = adl or self.adl
            cfg.adl = {name: a for name in (self.adl_insert if adl_insert is None else adl_insert)}
        elif variant == "has":
            cfg.has = {name: self.has for name in self.has_insert}
        return cfg

    def for_seed(self, seed: int) -> "RunConfig":
        return replace(self, seeds=(seed,), data=replace(self.data, seed=seed))

    def sweep_points(self) -> list[tuple[str, ModelConfig]]:
        """(label, model config) for each sweep row; insertion rows are cumulative."""
        values = list(self.sweep_values)
        k = self.data.num_classes
        if self.sweep_axis == "insertion":
            if not values:
                values = [b.name for b in reversed(self.blocks)]
            return [("+".join(values[:i + 1]), self.model_config(k, "adl", adl_insert=tuple(values[:i + 1])))
                    for i in range(len(values))]
        if not values:
            values = [repr(v) for v in DEFAULT_VALUES[self.sweep_axis]]
        points = []
        for v in values:
            try:
                num = float(v)
            except ValueError as exc:
                raise ConfigError(f"sweep value {v!r} is not a number") from exc
            points.append((repr(num), self.model_config(k, "adl", adl=replace(self.adl, **{self.sweep_axis: num}))))
        return points

    # -- INI -----------------------------------------------------------------

    @classmethod
    def from_ini(cls, text: str, base_dir: Path | None = None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
        known = {"data", "model", "adl", "has", "train", "eval", "run", "sweep"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(extra))}")
        rc = cls()
        try:
            if cp.has_section("data"):
                d = dict(cp["data"])
                path = d.pop("path", None)
                if path:
                    p = Path(path)
                    rc.data_path = p if p.is_absolute() or base_dir is None else base_dir / p
                rc.data = DataSpec.from_mapping(d)
                if rc.data_path is not None and (rc.data_path / "train").is_dir():
                    rc.data = read_spec_header(rc.data_path / "train")
            if cp.has_section("model") and "blocks" in cp["model"]:
                probe = configparser.ConfigParser(interpolation=None)
                probe["model"] = {"blocks": cp["model"]["blocks"], "num_classes": "2"}
                rc.blocks = ModelConfig.from_parser(probe).blocks
            if cp.has_section("adl"):
                s = cp["adl"]
                rc.adl = AdlConfig(
                    drop_rate=s.getfloat("drop_rate", rc.adl.drop_rate),
                    gamma=s.getfloat("gamma", rc.adl.gamma),
                    use_drop=s.getboolean("use_drop", True),
                    use_importance=s.getboolean("use_importance", True),
                    normalize_attention=s.getboolean("normalize_attention", False),
                )
                if "insert" in s:
                    rc.adl_insert = tuple(_split(s["insert"]))
            if cp.has_section("has"):
                s = cp["has"]
                rc.has = HasSpec(s.getint("grid", rc.has.grid), s.getfloat("hide_prob", rc.has.hide_prob))
                if "insert" in s:
                    rc.has_insert = tuple(_split(s["insert"]))
            if cp.has_section("train"):
                s = cp["train"]
                unknown = set(s) - {f.name for f in fields(SGDConfig)}
                if unknown:
                    raise ConfigError(f"unknown [train] keys: {', '.join(sorted(unknown))}")
                rc.opt = SGDConfig(
                    lr=s.getfloat("lr", rc.opt.lr),
                    momentum=s.getfloat("momentum", rc.opt.momentum),
                    epochs=s.getint("epochs", rc.opt.epochs),
                    batch_size=s.getint("batch_size", rc.opt.batch_size),
                    weight_decay=s.getfloat("weight_decay", rc.opt.weight_decay),
                )
            if cp.has_section("eval"):
                rc.theta_box = cp["eval"].getfloat("theta_box", rc.theta_box)
            if cp.has_section("run"):
                s = cp["run"]
                if "seeds" in s:
                    rc.seeds = tuple(int(v) for v in _split(s["seeds"]))
                rc.variant = s.get("variant", rc.variant).strip()
                if "out" in s:
                    rc.out = Path(s["out"])
            if cp.has_section("sweep"):
                s = cp["sweep"]
                rc.sweep_axis = s.get("axis", rc.sweep_axis).strip()
                if "values" in s:
                    rc.sweep_values = tuple(_split(s["values"]))
                    if not rc.sweep_values:
                        raise ConfigError("sweep values list is empty")
        except (DataSpecError, ConfigError):
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        rc.validate()
        return rc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_ini(text, base_dir=path.parent)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["data"] = dict(line.split("=", 1) for line in self.data.to_lines())
        if self.data_path is not None:
            cp["data"]["path"] = str(self.data_path)
        cp["model"] = {"blocks": ", ".join(f"{b.name}:{b.out_channels}:{b.kernel}:{b.pool}" for b in self.blocks)}
        a = self.adl
        cp["adl"] = {
            "insert": ", ".join(self.adl_insert), "drop_rate": repr(a.drop_rate), "gamma": repr(a.gamma),
            "use_drop": str(a.use_drop).lower(), "use_importance": str(a.use_importance).lower(),
            "normalize_attention": str(a.normalize_attention).lower(),
        }
        cp["has"] = {"insert": ", ".join(self.has_insert), "grid": str(self.has.grid), "hide_prob": repr(self.has.hide_prob)}
        o = self.opt
        cp["train"] = {"lr": repr(o.lr), "momentum": repr(o.momentum), "epochs": str(o.epochs),
                       "batch_size": str(o.batch_size), "weight_decay": repr(o.weight_decay)}
        cp["eval"] = {"theta_box": repr(self.theta_box)}
        cp["run"] = {"seeds": ", ".join(map(str, self.seeds)), "variant": self.variant}
        if self.out is not None:
            cp["run"]["out"] = str(self.out)
        cp["sweep"] = {"axis": self.sweep_axis}
        if self.sweep_values:
            cp["sweep"]["values"] = ", ".join(self.sweep_values)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()
