"""Pixel and parcel metrics, majority voting and classification-map rendering."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crophybrid.data import OTHERS, UNLABELED


class MetricsError(ValueError):
    pass


class PaletteError(KeyError):
    pass


class VoteWarning(UserWarning):
    pass


@dataclass
class ConfusionMatrix:
    """K x K counts, rows are truth and columns are predictions."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, truth, pred, classes: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if truth.shape != pred.shape:
            raise MetricsError(f"truth has {truth.size} samples, pred has {pred.size}")
        for name, a in (("truth", truth), ("pred", pred)):
            if a.size and (a.min() < 0 or a.max() >= classes):
                raise MetricsError(f"{name} labels outside [0, {classes})")
        counts = np.bincount(truth * classes + pred, minlength=classes * classes)
        return cls(counts.reshape(classes, classes))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def precision(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        col = self.counts.sum(axis=0)
        return np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)

    def recall(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        row = self.support()
        return np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)

    def f1(self) -> np.ndarray:
        p, r = self.precision(), self.recall()
        s = p + r
        return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)

    def accuracy(self) -> float:
        if self.total == 0:
            raise MetricsError("no samples evaluated")
        return float(np.trace(self.counts) / self.total)

    def weighted_f1(self) -> float:
        if self.total == 0:
            raise MetricsError("no samples evaluated")
        return float(np.dot(self.support() / self.total, self.f1()))


@dataclass
class Metrics:
    confusion: ConfusionMatrix
    class_names: list[str]
    unit: str = "pixel"

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy()

    @property
    def weighted_f1(self) -> float:
        return self.confusion.weighted_f1()

    def to_dict(self) -> dict:
        cm = self.confusion
        p, r, f, s = cm.precision(), cm.recall(), cm.f1(), cm.support()
        return {
            "unit": self.unit,
            "n": cm.total,
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class": {
                name: {"p": float(p[k]), "r": float(r[k]), "f1": float(f[k]), "support": int(s[k])}
                for k, name in enumerate(self.class_names)
            },
            "confusion": cm.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        d = self.to_dict()
        width = max(8, *(len(n) for n in self.class_names))
        lines = [f"{self.unit}-wise  n={d['n']}  accuracy={d['accuracy']:.4f}  weighted_f1={d['weighted_f1']:.4f}",
                 f"{'class':<{width}}  {'precision':>9}  {'recall':>7}  {'f1':>7}  {'support':>8}"]
        for name, row in d["per_class"].items():
            lines.append(f"{name:<{width}}  {row['p']:>9.4f}  {row['r']:>7.4f}  {row['f1']:>7.4f}  {row['support']:>8d}")
        return "\n".join(lines)


def _names(class_names, classes: int) -> list[str]:
    if class_names is None:
        return [str(k) for k in range(classes)]
    if len(class_names) != classes:
        raise MetricsError(f"{len(class_names)} class names for {classes} classes")
    return list(class_names)


def pixel_metrics(pred, truth, mask=None, class_names=None, classes: int | None = None) -> Metrics:
    """Accuracy, weighted F1 and per-class scores over the masked pixels.

    The default mask keeps every pixel whose truth is a class index (not
    ``UNLABELED``).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricsError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    mask = truth != UNLABELED if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != truth.shape:
        raise MetricsError(f"mask shape {mask.shape} != truth shape {truth.shape}")
    t, p = truth[mask], pred[mask]
    if t.size == 0:
        raise MetricsError("zero evaluated pixels")
    if classes is None:
        classes = len(class_names) if class_names is not None else int(max(t.max(), p.max())) + 1
    cm = ConfusionMatrix.from_labels(t, p, classes)
    return Metrics(cm, _names(class_names, classes))


def parcel_vote(pred, parcel_ids, classes: int | None = None) -> dict[int, int]:
    """Majority label per parcel; ties go to the lowest class index.

    Pixels with parcel id 0 or a negative prediction are ignored. A parcel
    that has pixels but no usable prediction is skipped with a warning.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    ids = np.asarray(parcel_ids, dtype=np.int64).ravel()
    if pred.shape != ids.shape:
        raise MetricsError(f"pred has {pred.size} pixels, parcel plane has {ids.size}")
    inside = ids > 0
    all_ids = np.unique(ids[inside])
    use = inside & (pred >= 0)
    if classes is None:
        classes = int(pred[use].max()) + 1 if use.any() else 1
    if use.any() and pred[use].max() >= classes:
        raise MetricsError(f"prediction outside [0, {classes})")
    uniq, row = np.unique(ids[use], return_inverse=True)
    hist = np.zeros((uniq.size, classes), dtype=np.int64)
    np.add.at(hist, (row, pred[use]), 1)
    winners = hist.argmax(axis=1)  # argmax returns the first maximum
    missing = np.setdiff1d(all_ids, uniq)
    if missing.size:
        warnings.warn(f"{missing.size} parcel(s) without predictions skipped: {missing[:10].tolist()}",
                      VoteWarning, stacklevel=2)
    return {int(i): int(k) for i, k in zip(uniq, winners)}


def parcel_metrics(voted: dict[int, int], truth: dict[int, int], class_names=None,
                   classes: int | None = None) -> Metrics:
    """Metrics with one sample per parcel present in both maps."""
    keys = sorted(k for k in voted if k in truth and truth[k] != UNLABELED)
    if not keys:
        raise MetricsError("zero evaluated parcels")
    p = np.array([voted[k] for k in keys])
    t = np.array([truth[k] for k in keys])
    m = pixel_metrics(p, t, class_names=class_names, classes=classes)
    m.unit = "parcel"
    return m


def vote_plane(voted: dict[int, int], parcel_ids) -> np.ndarray:
    """Paint each parcel's voted label back onto the grid; elsewhere ``UNLABELED``."""
    ids = np.asarray(parcel_ids, dtype=np.int64)
    lut = np.full(int(ids.max(initial=0)) + 1, UNLABELED, dtype=np.int64)
    for pid, k in voted.items():
        if pid < lut.size:
            lut[pid] = k
    return lut[ids]


_DEFAULT_COLORS = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
    (174, 199, 232), (255, 187, 120), (152, 223, 138), (255, 152, 150), (197, 176, 213),
]
BLACK = (0, 0, 0)


@dataclass
class ClassPalette:
    """Class name to RGB; "Others" is black and every color is distinct."""

    colors: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def __post_init__(self):
        self.colors = {name: tuple(int(c) for c in rgb) for name, rgb in self.colors.items()}
        for name, rgb in self.colors.items():
            if len(rgb) != 3 or not all(0 <= c <= 255 for c in rgb):
                raise PaletteError(f"bad color for {name!r}: {rgb}")
        if OTHERS in self.colors and self.colors[OTHERS] != BLACK:
            raise PaletteError(f"{OTHERS!r} must be black")
        values = list(self.colors.values())
        if len(set(values)) != len(values):
            raise PaletteError("palette colors are not unique")
        for name, rgb in self.colors.items():
            if rgb == BLACK and name != OTHERS:
                raise PaletteError(f"black is reserved for {OTHERS!r} and unlabeled cells")

    @classmethod
    def default(cls, class_names) -> "ClassPalette":
        named = [n for n in class_names if n != OTHERS]
        if len(named) > len(_DEFAULT_COLORS):
            raise PaletteError(f"default palette has {len(_DEFAULT_COLORS)} colors, need {len(named)}")
        colors = dict(zip(named, _DEFAULT_COLORS))
        if OTHERS in class_names:
            colors[OTHERS] = BLACK
        return cls(colors)

    def lookup(self, class_names) -> np.ndarray:
        """(K, 3) uint8 table in class-index order."""
        missing = [n for n in class_names if n not in self.colors]
        if missing:
            raise PaletteError(f"no palette entry for {missing}")
        return np.array([self.colors[n] for n in class_names], dtype=np.uint8).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.colors.items()}


def colorize(labels, palette: ClassPalette, class_names) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    table = palette.lookup(class_names)
    bad = (labels != UNLABELED) & ((labels < 0) | (labels >= len(table)))
    if bad.any():
        raise PaletteError(f"label {int(labels[bad][0])} has no palette entry")
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    known = labels >= 0
    rgb[known] = table[labels[known]]
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError(f"{path}: not an 8-bit P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).copy()


def render_map(labels, palette: ClassPalette, class_names, path) -> np.ndarray:
    """Write the label plane as a P6 pixmap, one pixel per cell; returns the RGB array."""
    rgb = colorize(labels, palette, class_names)
    write_ppm(path, rgb)
    return rgb


def decode_map(rgb: np.ndarray, palette: ClassPalette, class_names) -> np.ndarray:
    """Invert ``colorize``. Black decodes to "Others" when present, else ``UNLABELED``."""
    table = palette.lookup(class_names).astype(np.int64)
    key = rgb.astype(np.int64) @ np.array([65536, 256, 1])
    codes = table @ np.array([65536, 256, 1])
    out = np.full(key.shape, UNLABELED, dtype=np.int64)
    for k, code in enumerate(codes):
        out[key == code] = k
    unknown = (out == UNLABELED) & (key != 0)
    if unknown.any():
        raise PaletteError(f"{int(unknown.sum())} pixel(s) with colors outside the palette")
    return out
