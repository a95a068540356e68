"""Part-structured synthetic dataset.

Each object is a gray rounded-rectangle "body" whose distribution is the
same for every class, with a small attached disc "head" whose hue encodes
the class. The ground-truth box covers head and body, so a classifier that
only looks at the head localizes badly.
"""
from __future__ import annotations

import colorsys
import configparser
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .imageio import atomic_write_bytes, encode_pnm, read_pnm
from .localization import BBox
from .rng import Rng

BACKGROUNDS = ("plain", "textured")
BACKGROUND_RGB = (40, 40, 40)
BODY_RGB = (150, 150, 150)
MANIFEST = "manifest.txt"


class DataSpecError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    num_classes: int = 4
    image_size: int = 32
    samples_per_class: int = 250
    test_fraction: float = 0.2
    head_radius_min: float = 2.5
    head_radius_max: float = 3.3
    body_length_min: float = 16.0
    body_length_max: float = 22.0
    body_width_min: float = 9.0
    body_width_max: float = 13.0
    head_slide: float = 1.0  # how far from a side's midpoint the head may sit, as a fraction of the free span
    head_saturation: float = 0.6
    noise_std: float = 0.03
    background: str = "plain"
    class_correlated: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataSpecError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise DataSpecError("samples_per_class must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DataSpecError("test_fraction must be in [0, 1)")
        for lo, hi, what in [
            (self.head_radius_min, self.head_radius_max, "head_radius"),
            (self.body_length_min, self.body_length_max, "body_length"),
            (self.body_width_min, self.body_width_max, "body_width"),
        ]:
            if not 0 < lo <= hi:
                raise DataSpecError(f"{what} range must be positive and ordered, got [{lo}, {hi}]")
        if self.body_width_max > self.body_length_min:
            raise DataSpecError("body_width_max must not exceed body_length_min")
        if self.body_length_max + 1.5 * self.head_radius_max + 2 > self.image_size:
            raise DataSpecError("object does not fit inside the image")
        if self.background not in BACKGROUNDS:
            raise DataSpecError(f"background must be one of {BACKGROUNDS}")
        if self.noise_std < 0 or not 0 <= self.head_saturation <= 1:
            raise DataSpecError("noise_std must be >= 0 and head_saturation in [0, 1]")

    def to_lines(self) -> list[str]:
        return [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in asdict(self).items()]

    @classmethod
    def from_mapping(cls, mapping) -> "DataSpec":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in known:
                raise DataSpecError(f"unknown data spec key {key!r}")
            default = getattr(cls, key)
            try:
                if isinstance(default, bool):
                    kwargs[key] = str(raw).strip().lower() in {"1", "true", "yes", "on"}
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw).strip()
            except ValueError as exc:
                raise DataSpecError(f"bad value for {key}: {raw!r}") from exc
        spec = cls(**kwargs)
        spec.validate()
        return spec


@dataclass(frozen=True)
class Layout:
    """Resolved geometry of one object, in pixel units (pixel centers at +0.5)."""

    cx: float
    cy: float
    half_x: float  # body half extents along x and y
    half_y: float
    head_x: float
    head_y: float
    head_radius: float
    texture_phase: float = 0.0


@dataclass
class Sample:
    image: np.ndarray
    label: int
    box: BBox
    object_mask: np.ndarray
    head_mask: np.ndarray


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    boxes: list[BBox]
    names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def box_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.int64).reshape(-1, 4)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], self.labels[idx], [self.boxes[i] for i in idx], [self.names[i] for i in idx])


def head_color(label: int, num_classes: int, saturation: float) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(label / num_classes, saturation, 0.85)
    return np.rint(np.array([r, g, b]) * 255.0) / 255.0


def sample_layout(spec: DataSpec, rng: Rng) -> Layout:
    """Random body size/orientation and a head attached somewhere along one body side.

    The head center sits half a radius outside the chosen side, so the disc
    overlaps the body edge and protrudes 1.5 radii beyond it.
    """
    u = rng.uniform(9)
    length = spec.body_length_min + u[0] * (spec.body_length_max - spec.body_length_min)
    width = spec.body_width_min + u[1] * (spec.body_width_max - spec.body_width_min)
    radius = spec.head_radius_min + u[2] * (spec.head_radius_max - spec.head_radius_min)
    hx, hy = (length / 2, width / 2) if u[3] < 0.5 else (width / 2, length / 2)
    side = min(int(u[4] * 4), 3)  # 0: +x, 1: -x, 2: +y, 3: -y
    along = (u[5] - 0.5) * 2.0 * spec.head_slide
    out = 0.5 * radius
    if side < 2:
        dx, dy = (1 if side == 0 else -1) * (hx + out), along * max(hy - radius, 0.0)
    else:
        dx, dy = along * max(hx - radius, 0.0), (1 if side == 2 else -1) * (hy + out)
    # extents of body union head relative to the body center
    left, right = min(-hx, dx - radius), max(hx, dx + radius)
    top, bottom = min(-hy, dy - radius), max(hy, dy + radius)
    size = spec.image_size
    lo_x, hi_x = 1 - left, size - 1 - right
    lo_y, hi_y = 1 - top, size - 1 - bottom
    if hi_x < lo_x or hi_y < lo_y:
        raise DataSpecError("object geometry cannot fit inside the image")
    cx = lo_x + u[6] * (hi_x - lo_x)
    cy = lo_y + u[7] * (hi_y - lo_y)
    return Layout(cx, cy, hx, hy, cx + dx, cy + dy, radius, texture_phase=u[8] * 2 * np.pi)


def _object_masks(layout: Layout, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - layout.cx, yy - layout.cy
    hx, hy = layout.half_x, layout.half_y
    corner = min(hx, hy, 2.5)
    qx = np.maximum(np.abs(dx) - (hx - corner), 0.0)
    qy = np.maximum(np.abs(dy) - (hy - corner), 0.0)
    body = (np.abs(dx) <= hx) & (np.abs(dy) <= hy) & (qx * qx + qy * qy <= corner * corner)
    head = (xx - layout.head_x) ** 2 + (yy - layout.head_y) ** 2 <= layout.head_radius ** 2
    return body, head


def render_sample(label: int, layout: Layout, spec: DataSpec, noise_rng: Rng | None) -> Sample:
    """Rasterize one object; pixels are quantized to 8 bits so files round-trip exactly."""
    size = spec.image_size
    body, head = _object_masks(layout, size)
    bg = np.array(BACKGROUND_RGB, dtype=np.float64) / 255.0
    if spec.class_correlated:
        bg = np.rint((0.7 * bg + 0.3 * head_color(label, spec.num_classes, 0.5)) * 255.0) / 255.0
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    if spec.background == "textured":
        yy, xx = np.mgrid[0:size, 0:size]
        tex = 0.06 * np.sin(0.7 * xx + 0.4 * yy + layout.texture_phase)
        img += tex[..., None]
    img[body] = np.array(BODY_RGB) / 255.0
    img[head] = head_color(label, spec.num_classes, spec.head_saturation)
    if spec.noise_std > 0 and noise_rng is not None:
        img += spec.noise_std * noise_rng.normal(img.size).reshape(img.shape)
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    obj = body | head
    return Sample(img, label, BBox.of_mask(obj), obj, head)


def generate_dataset(spec: DataSpec) -> tuple[Dataset, Dataset]:
    """Render ``num_classes * samples_per_class`` objects and split them per class.

    The last ``round(samples_per_class * test_fraction)`` samples of each
    class (after a seeded shuffle) form the test set.
    """
    spec.validate()
    train_idx, test_idx = [], []
    samples = []
    n_test = int(round(spec.samples_per_class * spec.test_fraction))
    split_rng = Rng.derive(spec.seed, "split")
    for c in range(spec.num_classes):
        base = len(samples)
        for k in range(spec.samples_per_class):
            i = base + k
            layout = sample_layout(spec, Rng.derive(spec.seed, "layout", i))
            samples.append(render_sample(c, layout, spec, Rng.derive(spec.seed, "noise", i)))
        order = split_rng.permutation(spec.samples_per_class) + base
        train_idx.extend(sorted(order[: spec.samples_per_class - n_test].tolist()))
        test_idx.extend(sorted(order[spec.samples_per_class - n_test:].tolist()))

    def pack(idx: list[int], prefix: str) -> Dataset:
        if not idx:
            return Dataset(np.zeros((0, spec.image_size, spec.image_size, 3)), np.zeros(0, dtype=np.int64), [], [])
        return Dataset(
            np.stack([samples[i].image for i in idx]),
            np.array([samples[i].label for i in idx], dtype=np.int64),
            [samples[i].box for i in idx],
            [f"{prefix}_{i:05d}.ppm" for i in idx],
        )

    return pack(train_idx, "train"), pack(test_idx, "test")


# ---------------------------------------------------------------------------
# directory format: <dir>/{train,test}/manifest.txt plus one P6 file per image


def write_split(ds: Dataset, directory: Path, spec: DataSpec) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {line}" for line in spec.to_lines()]
    lines.append("# columns: filename label x0 y0 x1 y1")
    for name, label, box, img in zip(ds.names, ds.labels, ds.boxes, ds.images):
        atomic_write_bytes(directory / name, encode_pnm(img))
        lines.append(f"{name} {int(label)} {box.x0} {box.y0} {box.x1} {box.y1}")
    atomic_write_bytes(directory / MANIFEST, ("\n".join(lines) + "\n").encode("ascii"))


def write_dataset(train: Dataset, test: Dataset, out: str | Path, spec: DataSpec) -> Path:
    out = Path(out)
    write_split(train, out / "train", spec)
    write_split(test, out / "test", spec)
    return out


def read_split(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    names, labels, boxes, images = [], [], [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{manifest}:{lineno}: expected 'filename label x0 y0 x1 y1'")
        names.append(parts[0])
        labels.append(int(parts[1]))
        boxes.append(BBox(*map(int, parts[2:])))
        images.append(read_pnm(directory / parts[0]))
    imgs = np.stack(images) if images else np.zeros((0, 0, 0, 3))
    return Dataset(imgs, np.array(labels, dtype=np.int64), boxes, names)


def read_spec_header(directory: str | Path) -> DataSpec:
    header = {}
    for line in (Path(directory) / MANIFEST).read_text().splitlines():
        if line.startswith("# ") and "=" in line and not line.startswith("# columns"):
            key, value = line[2:].split("=", 1)
            header[key] = value
    return DataSpec.from_mapping(header)


def spec_from_ini(text: str, section: str = "data") -> DataSpec:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    return DataSpec.from_mapping(dict(cp[section]) if cp.has_section(section) else {})


def spec_to_ini(spec: DataSpec) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["data"] = dict(line.split("=", 1) for line in spec.to_lines())
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
