"""Small GAP-head CNN with named insertion points for ADL and Hide-and-Seek."""
from __future__ import annotations

import configparser
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adl import EVAL, TRAIN, AdlConfig, GateTrace, adl_forward, has_patch_drop
from .imageio import atomic_write_bytes
from .rng import Rng
from .tensor import Graph, Node

MAGIC = b"ADLLAB-MODEL-1\n"
INPUT = "input"
POOLS = ("max2x2", "none")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        self.log = None
        super().__init__(f"non-finite loss {loss} in epoch {epoch}")


@dataclass(frozen=True)
class BlockSpec:
    name: str
    out_channels: int
    kernel: int = 3
    pool: str = "max2x2"


@dataclass(frozen=True)
class HasSpec:
    grid: int
    hide_prob: float = 0.5


@dataclass
class ModelConfig:
    blocks: list[BlockSpec]
    num_classes: int
    in_channels: int = 3
    adl: dict[str, AdlConfig] = field(default_factory=dict)
    has: dict[str, HasSpec] = field(default_factory=dict)
    input_shift: float = 0.5  # subtracted from pixels before the first conv

    def validate(self) -> None:
        names = [b.name for b in self.blocks]
        if not names:
            raise ConfigError("model needs at least one block")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate block names: {names}")
        if INPUT in names:
            raise ConfigError(f"{INPUT!r} is reserved for the image insertion point")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for b in self.blocks:
            if b.out_channels < 1:
                raise ConfigError(f"block {b.name}: out_channels must be positive")
            if b.kernel < 1 or b.kernel % 2 == 0:
                raise ConfigError(f"block {b.name}: kernel must be an odd positive integer")
            if b.pool not in POOLS:
                raise ConfigError(f"block {b.name}: pool must be one of {POOLS}")
        bad = [n for n in self.adl if n not in names]
        bad += [n for n in self.has if n not in names and n != INPUT]
        if bad:
            raise ConfigError(f"insertion points reference unknown blocks: {', '.join(bad)}")

    def without_insertions(self) -> "ModelConfig":
        return ModelConfig(list(self.blocks), self.num_classes, self.in_channels, input_shift=self.input_shift)

    # -- INI round trip ----------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["model"] = {
            "num_classes": str(self.num_classes),
            "in_channels": str(self.in_channels),
            "input_shift": repr(self.input_shift),
            "blocks": ", ".join(f"{b.name}:{b.out_channels}:{b.kernel}:{b.pool}" for b in self.blocks),
        }
        for name, a in self.adl.items():
            cp[f"adl.{name}"] = {
                "drop_rate": repr(a.drop_rate),
                "gamma": repr(a.gamma),
                "use_drop": str(a.use_drop).lower(),
                "use_importance": str(a.use_importance).lower(),
                "normalize_attention": str(a.normalize_attention).lower(),
            }
        for name, h in self.has.items():
            cp[f"has.{name}"] = {"grid": str(h.grid), "hide_prob": repr(h.hide_prob)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "ModelConfig":
        try:
            sec = cp["model"]
            blocks = []
            for item in sec.get("blocks", "").split(","):
                item = item.strip()
                if not item:
                    continue
                parts = item.split(":")
                if len(parts) != 4:
                    raise ConfigError(f"block spec {item!r} must be name:channels:kernel:pool")
                blocks.append(BlockSpec(parts[0], int(parts[1]), int(parts[2]), parts[3]))
            adl = {}
            has = {}
            for section in cp.sections():
                if section.startswith("adl."):
                    s = cp[section]
                    adl[section[4:]] = AdlConfig(
                        drop_rate=s.getfloat("drop_rate", 0.75),
                        gamma=s.getfloat("gamma", 0.8),
                        use_drop=s.getboolean("use_drop", True),
                        use_importance=s.getboolean("use_importance", True),
                        normalize_attention=s.getboolean("normalize_attention", False),
                    )
                elif section.startswith("has."):
                    s = cp[section]
                    has[section[4:]] = HasSpec(s.getint("grid"), s.getfloat("hide_prob", 0.5))
            cfg = cls(blocks, sec.getint("num_classes"), sec.getint("in_channels", 3), adl, has,
                      sec.getfloat("input_shift", 0.5))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"incomplete model config: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_ini(cls, text: str) -> "ModelConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        return cls.from_parser(cp)


@dataclass
class Network:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def fc_weight(self) -> np.ndarray:
        """(C_final, num_classes); column c is the CAM weight vector of class c."""
        return self.params["fc.w"]

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    cin = cfg.in_channels
    for b in cfg.blocks:
        shapes.append((f"{b.name}.w", (b.kernel, b.kernel, cin, b.out_channels)))
        shapes.append((f"{b.name}.b", (b.out_channels,)))
        cin = b.out_channels
    shapes.append(("fc.w", (cin, cfg.num_classes)))
    shapes.append(("fc.b", (cfg.num_classes,)))
    return shapes


def build_model(cfg: ModelConfig, rng: Rng) -> Network:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, drawn in declaration order."""
    cfg.validate()
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        params[name] = rng.normal(int(np.prod(shape))).reshape(shape) * np.sqrt(2.0 / fan_in)
    return Network(cfg, params)


def output_spatial(cfg: ModelConfig, size: int) -> int:
    for b in cfg.blocks:
        if b.pool == "max2x2":
            if size % 2:
                raise ConfigError(f"block {b.name}: cannot 2x2-pool odd spatial size {size}")
            size //= 2
    return size


@dataclass
class ForwardResult:
    graph: Graph
    logits: Node
    features: dict[str, Node]
    param_nodes: dict[str, Node]
    branches: dict[str, str]
    input: Node

    @property
    def final_features(self) -> Node:
        return self.features[next(reversed(self.features))]


def forward(
    net: Network,
    batch: np.ndarray,
    phase: str = EVAL,
    rng: Rng | None = None,
    pin: str | None = None,
    graph: Graph | None = None,
) -> ForwardResult:
    """Run the network on an (N, H, W, C_in) batch.

    ``features`` maps each block name to its output after pooling and any
    ADL insertion. In eval phase every ADL/HaS insertion is bypassed.
    """
    cfg = net.config
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[3] != cfg.in_channels:
        raise ValueError(f"expected (N, H, W, {cfg.in_channels}) batch, got {batch.shape}")
    g = graph if graph is not None else Graph()
    pnodes = {name: g.param(value, name=name) for name, value in net.params.items()}
    x = g.input(batch - cfg.input_shift if cfg.input_shift else batch, name="image")
    inp = x
    branches: dict[str, str] = {}
    features: dict[str, Node] = {}
    if INPUT in cfg.has and phase == TRAIN:
        h = cfg.has[INPUT]
        x = has_patch_drop(g, x, h.grid, h.hide_prob, rng, phase)
    for b in cfg.blocks:
        x = g.apply("conv2d", [x, pnodes[f"{b.name}.w"], pnodes[f"{b.name}.b"]], stride=1, padding=b.kernel // 2)
        x = g.apply("relu", [x])
        if b.pool == "max2x2":
            x = g.apply("maxpool2x2", [x])
        if phase == TRAIN:
            if b.name in cfg.has:
                h = cfg.has[b.name]
                x = has_patch_drop(g, x, h.grid, h.hide_prob, rng, phase)
            if b.name in cfg.adl:
                x, branch = adl_forward(g, x, cfg.adl[b.name], rng, phase, pin=pin)
                branches[b.name] = branch
        features[b.name] = x
    pooled = g.apply("global_avg_pool", [x])
    logits = g.apply("dense", [pooled, pnodes["fc.w"], pnodes["fc.b"]], name="logits")
    return ForwardResult(g, logits, features, pnodes, branches, inp)


def predict(net: Network, image: np.ndarray) -> tuple[int, np.ndarray]:
    """Eval-mode class (lowest index wins ties) and final feature map (H, W, C) of one image."""
    res = forward(net, np.asarray(image)[None], EVAL)
    return int(np.argmax(res.logits.value[0])), res.final_features.value[0]


def predict_batch(net: Network, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode classes, logits and final feature maps for many images."""
    logits, feats = [], []
    for start in range(0, len(images), batch_size):
        res = forward(net, images[start:start + batch_size], EVAL)
        logits.append(res.logits.value)
        feats.append(res.final_features.value)
    lg = np.concatenate(logits) if logits else np.zeros((0, net.config.num_classes))
    fm = np.concatenate(feats) if feats else np.zeros((0,))
    return np.argmax(lg, axis=1), lg, fm


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    gates: GateTrace = field(default_factory=GateTrace)

    def as_text(self) -> str:
        lines = ["epoch\tloss\ttrain_accuracy"]
        lines += [f"{i + 1}\t{l!r}\t{a!r}" for i, (l, a) in enumerate(zip(self.loss, self.accuracy))]
        return "\n".join(lines) + "\n"


def loss_and_grads(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    phase: str = TRAIN,
    rng: Rng | None = None,
    pin: str | None = None,
) -> tuple[float, dict[str, np.ndarray], ForwardResult, Node]:
    res = forward(net, images, phase, rng, pin=pin)
    loss = res.graph.apply("softmax_xent", [res.logits], labels=np.asarray(labels, dtype=np.int64), name="loss")
    grads = res.graph.backward(loss)
    named = {name: grads[node.id] for name, node in res.param_nodes.items()}
    return float(loss.value), named, res, loss


def train(
    net: Network, images: np.ndarray, labels: np.ndarray, opt: SGDConfig, rng: Rng, pin: str | None = None
) -> TrainLog:
    """Momentum SGD on softmax cross-entropy, in place on ``net.params``.

    One word is taken from ``rng``; data order, ADL gates and HaS patches
    then use separate streams derived from it, so adding a no-op insertion
    does not perturb the shuffling. A divergence error carries the partial
    log as ``exc.log``.
    """
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    base = rng.next_u64()
    order_rng = Rng.derive(base, "order")
    stoch_rng = Rng.derive(base, "insertions")
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    log = TrainLog()
    for epoch in range(opt.epochs):
        perm = order_rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, opt.batch_size):
            idx = perm[start:start + opt.batch_size]
            loss, grads, res, _ = loss_and_grads(net, images[idx], labels[idx], TRAIN, stoch_rng, pin)
            if not np.isfinite(loss):
                exc = TrainingDiverged(epoch + 1, loss)
                exc.log = log
                raise exc
            for layer, branch in res.branches.items():
                log.gates.record(layer, branch)
            total_loss += loss * len(idx)
            correct += int((np.argmax(res.logits.value, axis=1) == labels[idx]).sum())
            for k, g in grads.items():
                if opt.weight_decay and not k.endswith(".b"):
                    g = g + opt.weight_decay * net.params[k]
                velocity[k] = opt.momentum * velocity[k] - opt.lr * g
                net.params[k] = net.params[k] + velocity[k]
        mean_loss = total_loss / n
        log.loss.append(mean_loss)
        log.accuracy.append(correct / n)
    return log


# ---------------------------------------------------------------------------
# serialization: magic, u64 config length, config text, then float64 LE params


def save_model(net: Network, path: str | Path) -> None:
    text = net.config.to_ini().encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(text)), text]
    for name, _ in param_shapes(net.config):
        chunks.append(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_model(path: str | Path) -> Network:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a model file (bad magic)")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    cfg = ModelConfig.from_ini(data[off:off + n].decode("utf-8"))
    off += n
    params = {}
    for name, shape in param_shapes(cfg):
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise ValueError(f"{path}: truncated parameter block at {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return Network(cfg, params)
