"""CAM heatmaps, box extraction, IoU and the three WSOL metrics."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEFAULT_THETA_BOX = 0.2
IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, inclusive start and exclusive end."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def within(self, height: int, width: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    @classmethod
    def of_mask(cls, mask: np.ndarray) -> "BBox":
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            raise ValueError("empty mask has no bounding box")
        return cls(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass
class Heatmap:
    values: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def cam_heatmap(features: np.ndarray, class_weights: np.ndarray) -> Heatmap:
    """Class activation map: sum over channels of weight * feature map, unnormalized."""
    features = np.asarray(features, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if features.ndim != 3 or w.shape != (features.shape[2],):
        raise ValueError(f"cam_heatmap: features {features.shape} incompatible with weights {w.shape}")
    return Heatmap(features @ w)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge samples
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(values: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h_out, w_out = target
    y0, y1, fy = _bilinear_axis(values.shape[0], h_out)
    x0, x1, fx = _bilinear_axis(values.shape[1], w_out)
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bot = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def normalize_and_upsample(h: Heatmap, target: tuple[int, int]) -> Heatmap:
    if target[0] < h.shape[0] or target[1] < h.shape[1]:
        raise ValueError(f"target {target} smaller than heatmap {h.shape}")
    norm = normalize(h.values)
    if tuple(target) != h.shape:
        norm = bilinear_resize(norm, target)
    return Heatmap(norm, normalized=True)


def extract_bbox(h: Heatmap, theta_box: float = DEFAULT_THETA_BOX) -> tuple[BBox, bool]:
    """Tight box of the largest 8-connected region at or above ``theta_box * max``.

    Returns ``(box, degenerate)``; an all-zero map yields the full-image box
    with ``degenerate=True``. Equal-area components resolve to the one whose
    first pixel comes first in raster order.
    """
    if not 0.0 < theta_box < 1.0:
        raise ValueError(f"theta_box must be in (0, 1), got {theta_box}")
    v = h.values
    height, width = v.shape
    peak = v.max()
    if peak <= 0:
        return BBox(0, 0, width, height), True
    labels, count = kernels.label_components(v >= theta_box * peak)
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    areas[0] = 0
    best = int(np.argmax(areas))
    return BBox.of_mask(labels == best), False


def iou(a: BBox, b: BBox) -> float:
    iw = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class ImageRecord:
    index: int
    label: int
    predicted: int
    class_correct: bool
    iou: float
    loc_correct: bool
    top1_loc_correct: bool
    gt_box: BBox
    box: BBox
    pred_box: BBox


@dataclass
class MetricsReport:
    records: list[ImageRecord] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    def _rate(self, attr: str) -> float:
        return sum(getattr(r, attr) for r in self.records) / self.n if self.records else 0.0

    @property
    def top1_clas(self) -> float:
        return self._rate("class_correct")

    @property
    def gt_known_loc(self) -> float:
        return self._rate("loc_correct")

    @property
    def top1_loc(self) -> float:
        return self._rate("top1_loc_correct")

    def summary(self) -> dict[str, float]:
        return {"top1_loc": self.top1_loc, "top1_clas": self.top1_clas, "gt_known_loc": self.gt_known_loc}

    def as_text(self) -> str:
        lines = [
            f"n: {self.n}",
            f"top1_loc: {self.top1_loc:.6f}",
            f"top1_clas: {self.top1_clas:.6f}",
            f"gt_known_loc: {self.gt_known_loc:.6f}",
            f"mean_iou: {np.mean([r.iou for r in self.records]) if self.records else 0.0:.6f}",
        ]
        return "\n".join(lines) + "\n"

    def records_tsv(self) -> str:
        cols = "index label predicted class_correct iou loc_correct top1_loc_correct gt_box gt_class_box pred_class_box"
        lines = ["\t".join(cols.split())]
        for r in self.records:
            lines.append("\t".join([
                str(r.index), str(r.label), str(r.predicted), str(int(r.class_correct)), f"{r.iou:.6f}",
                str(int(r.loc_correct)), str(int(r.top1_loc_correct)),
                ",".join(map(str, r.gt_box.as_tuple())), ",".join(map(str, r.box.as_tuple())),
                ",".join(map(str, r.pred_box.as_tuple())),
            ]))
        return "\n".join(lines) + "\n"


def localize(features: np.ndarray, class_weights: np.ndarray, image_hw: tuple[int, int], theta_box: float) -> tuple[BBox, Heatmap]:
    """CAM for one class, upsampled to image size, and its extracted box."""
    heat = normalize_and_upsample(cam_heatmap(features, class_weights), image_hw)
    box, _ = extract_bbox(heat, theta_box)
    return box, heat


def score_image(
    index: int,
    features: np.ndarray,
    predicted: int,
    label: int,
    gt_box: BBox,
    fc_weight: np.ndarray,
    image_hw: tuple[int, int],
    theta_box: float,
) -> ImageRecord:
    box, _ = localize(features, fc_weight[:, label], image_hw, theta_box)
    if predicted == label:
        pred_box = box
    else:
        pred_box, _ = localize(features, fc_weight[:, predicted], image_hw, theta_box)
    overlap = iou(box, gt_box)
    class_ok = predicted == label
    loc_ok = overlap >= IOU_THRESHOLD
    return ImageRecord(index, label, predicted, class_ok, overlap, loc_ok, class_ok and iou(pred_box, gt_box) >= IOU_THRESHOLD,
                       gt_box, box, pred_box)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("ADLLAB_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(net, images: np.ndarray, labels, boxes, theta_box: float = DEFAULT_THETA_BOX) -> MetricsReport:
    """Top-1 Clas, GT-known Loc and Top-1 Loc of ``net`` on a labelled, boxed set.

    GT-known Loc uses the ground-truth-class CAM; Top-1 Loc needs the class
    to be right and the predicted-class CAM box to reach IoU 0.5.
    """
    from .model import predict_batch

    if labels is None or boxes is None or len(labels) != len(images) or len(boxes) != len(images):
        raise ValueError("evaluate needs one ground-truth label and box per image")
    for i, (lab, box) in enumerate(zip(labels, boxes)):
        if lab is None or box is None:
            raise ValueError(f"sample {i} is missing its ground truth")
    boxes = [b if isinstance(b, BBox) else BBox(*map(int, b)) for b in boxes]
    predicted, _, feats = predict_batch(net, images)
    hw = images.shape[1:3]
    w = net.fc_weight

    def one(i: int) -> ImageRecord:
        return score_image(i, feats[i], int(predicted[i]), int(labels[i]), boxes[i], w, hw, theta_box)

    threads = thread_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(one, range(len(images))))
    else:
        records = [one(i) for i in range(len(images))]
    return MetricsReport(records)
