"""Parcels, parcel-level splits, patch sampling and the synthetic phenology generator."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from crophybrid import tensor
from crophybrid.features import FeatureCube, Satellite, band_map, compute_indices
from crophybrid.tensor import ShapeError

UNLABELED = -1
OTHERS = "Others"
SPLITS = ("train", "val", "test", "none")

CROP_NAMES = (
    "Alfalfa", "Pastures", "Lettuce", "Wheat", "Onions", "Truck Crops", "Corn",
    "Field Crops", "Subtropical", "Rice", "Safflower", "Tomatoes", "Almonds", "Vineyard",
)


class GeometryError(ValueError):
    pass


class SplitWarning(UserWarning):
    pass


@dataclass
class Parcel:
    id: int
    rings: list[list[tuple[float, float]]]
    label: int
    split: str = "none"

    def __post_init__(self):
        if self.id < 1:
            raise GeometryError("parcel ids start at 1; 0 marks pixels outside every parcel")
        for ring in self.rings:
            if len(ring) < 4 or tuple(ring[0]) != tuple(ring[-1]):
                raise GeometryError(f"parcel {self.id}: ring is not closed")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split tag {self.split!r}")


def rectangle(x0, y0, x1, y1) -> list[tuple[float, float]]:
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]


def point_in_polygon(x, y, rings) -> np.ndarray:
    """Even-odd test of points (x, y) against all rings of one polygon."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for ring in rings:
        pts = np.asarray(ring, dtype=np.float64)
        for (x1, y1), (x2, y2) in zip(pts[:-1], pts[1:]):
            if y1 == y2:
                continue
            straddles = (y1 > y) != (y2 > y)
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddles & (x < x_cross)
    return inside


def rasterize_parcels(parcels: list[Parcel], grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Burn parcels into (id plane, label plane) by pixel-centre sampling.

    Coordinates are (x=column, y=row) in pixel units; pixel (i, j) has its
    centre at (j + 0.5, i + 0.5). Outside every parcel the id is 0 and the
    label is ``UNLABELED``. Later parcels win where polygons overlap.
    """
    h, w = grid
    ids = np.zeros((h, w), dtype=np.int64)
    labels = np.full((h, w), UNLABELED, dtype=np.int64)
    for p in parcels:
        pts = np.concatenate([np.asarray(r, dtype=np.float64) for r in p.rings])
        c0 = max(int(np.floor(pts[:, 0].min())), 0)
        c1 = min(int(np.ceil(pts[:, 0].max())), w)
        r0 = max(int(np.floor(pts[:, 1].min())), 0)
        r1 = min(int(np.ceil(pts[:, 1].max())), h)
        if c0 >= c1 or r0 >= r1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        hit = point_in_polygon(xx + 0.5, yy + 0.5, p.rings)
        ids[r0:r1, c0:c1][hit] = p.id
        labels[r0:r1, c0:c1][hit] = p.label
    return ids, labels


def split_parcels(parcels: list[Parcel], ratio: float = 0.6, seed: int = 0,
                  val_fraction: float = 0.0) -> list[Parcel]:
    """Stratified-by-class train/test assignment of whole parcels.

    Each class with n >= 2 parcels sends round(ratio * n) of them (at least
    one, at most n - 1) to train. Single-parcel classes go to train with a
    warning. With ``val_fraction`` > 0, that share of each class's training
    parcels is re-tagged "val" (never the last training parcel).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[Parcel]] = {}
    for p in sorted(parcels, key=lambda p: p.id):
        by_class.setdefault(p.label, []).append(p)
    tags: dict[int, str] = {}
    for label in sorted(by_class):
        group = by_class[label]
        if len(group) < 2:
            warnings.warn(f"class {label} has {len(group)} parcel(s); all assigned to train", SplitWarning, stacklevel=2)
            tags.update((p.id, "train") for p in group)
            continue
        n_train = min(max(int(round(ratio * len(group))), 1), len(group) - 1)
        n_val = min(int(round(val_fraction * n_train)), n_train - 1)
        order = rng.permutation(len(group))
        for rank, i in enumerate(order):
            if rank < n_val:
                tags[group[i].id] = "val"
            elif rank < n_train:
                tags[group[i].id] = "train"
            else:
                tags[group[i].id] = "test"
    return [replace(p, split=tags[p.id]) for p in parcels]


@dataclass
class PatchSet:
    """Patches (N, r, r, t, c) with centre label, parcel id, centre (row, col) and split."""

    x: np.ndarray
    y: np.ndarray
    parcel: np.ndarray
    centers: np.ndarray
    split: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "PatchSet":
        return PatchSet(self.x[mask], self.y[mask], self.parcel[mask], self.centers[mask], self.split[mask])

    def where(self, split: str) -> "PatchSet":
        return self.subset(self.split == split)

    def counts(self, class_names=None) -> dict:
        out = {}
        for tag in SPLITS:
            sel = self.y[self.split == tag]
            if sel.size == 0:
                continue
            labels, n = np.unique(sel, return_counts=True)
            name = (lambda k: class_names[k]) if class_names else str
            out[tag] = {name(int(k)): int(c) for k, c in zip(labels, n)}
        return out

    def save(self, out_dir, meta: dict | None = None, class_names=None) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        shards = {}
        for tag in SPLITS:
            part = self.where(tag)
            if len(part) == 0:
                continue
            name = f"{tag}.ctns"
            tensor.save_many(
                out_dir / name,
                [part.x, part.y.astype(np.float64), part.parcel.astype(np.float64), part.centers.astype(np.float64)],
            )
            shards[tag] = name
        index = {"shards": shards, "counts": self.counts(class_names), "patch_shape": list(self.x.shape[1:])}
        if class_names is not None:
            index["classes"] = list(class_names)
        index.update(meta or {})
        (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir, splits=SPLITS) -> "PatchSet":
        in_dir = Path(in_dir)
        index = json.loads((in_dir / "index.json").read_text())
        parts = []
        for tag in splits:
            if tag not in index["shards"]:
                continue
            x, y, parcel, centers = (t.numpy() for t in tensor.load_many(in_dir / index["shards"][tag]))
            parts.append(cls(x, y.astype(np.int64), parcel.astype(np.int64), centers.astype(np.int64),
                             np.full(len(y), tag)))
        if not parts:
            raise FileNotFoundError(f"no patch shards for {splits} in {in_dir}")
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("x", "y", "parcel", "centers", "split")))


def _window_view(cube: np.ndarray, r: int) -> np.ndarray:
    h = r // 2
    padded = np.pad(cube, ((h, h), (h, h), (0, 0), (0, 0)), mode="edge")
    return sliding_window_view(padded, (r, r), axis=(0, 1))  # (H, W, t, c, r, r)


def extract_patches(cube: np.ndarray, rows, cols, r: int) -> np.ndarray:
    """Edge-replicated (r, r, t, c) windows centred on the given pixels."""
    if r % 2 == 0 or r < 1:
        raise ShapeError(f"patch size must be odd, got {r}")
    if r > cube.shape[0] or r > cube.shape[1]:
        raise ShapeError(f"patch size {r} exceeds grid {cube.shape[:2]}")
    win = _window_view(cube, r)[rows, cols]  # (N, t, c, r, r)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2))


def sample_patches(cube, labels: np.ndarray, parcel_ids: np.ndarray, r: int = 7, stride: int = 1,
                   parcels: list[Parcel] | None = None) -> PatchSet:
    """One patch per parcel pixel on the ``stride`` lattice.

    A patch's split is its centre parcel's tag (``parcels``), so no test
    patch is centred inside a training parcel.
    """
    data = cube.data if isinstance(cube, FeatureCube) else np.asarray(cube)
    if labels.shape != data.shape[:2] or parcel_ids.shape != data.shape[:2]:
        raise ShapeError("label/parcel planes must match the cube grid")
    lattice = np.zeros(parcel_ids.shape, dtype=bool)
    lattice[::stride, ::stride] = True
    rows, cols = np.nonzero(lattice & (parcel_ids > 0))
    x = extract_patches(data, rows, cols, r)
    pid = parcel_ids[rows, cols]
    tags = {p.id: p.split for p in parcels or []}
    split = np.array([tags.get(int(i), "none") for i in pid], dtype="<U5")
    return PatchSet(x=x, y=labels[rows, cols].astype(np.int64), parcel=pid.astype(np.int64),
                    centers=np.stack([rows, cols], axis=1).astype(np.int64), split=split)


# -- parcel files ----------------------------------------------------------


def save_parcels(path, parcels: list[Parcel], class_names) -> None:
    doc = [{"id": p.id, "class": class_names[p.label], "rings": [[list(pt) for pt in r] for r in p.rings],
            "split": p.split} for p in parcels]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_label_csv(path) -> dict[int, str]:
    with open(path, newline="") as fh:
        return {int(row["parcel_id"]): row["class_name"] for row in csv.DictReader(fh)}


def write_label_csv(path, parcels: list[Parcel], class_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parcel_id", "class_name"])
        for p in parcels:
            w.writerow([p.id, class_names[p.label]])


def load_parcels(path, labels_csv=None, class_names=None) -> tuple[list[Parcel], list[str]]:
    """Read a parcel polygon file, optionally taking class names from a label CSV.

    Without ``class_names`` the class list is the sorted set of names found,
    with "Others" moved last.
    """
    doc = json.loads(Path(path).read_text())
    names = read_label_csv(labels_csv) if labels_csv else {}
    for d in doc:
        names.setdefault(int(d["id"]), d.get("class"))
    missing = [d["id"] for d in doc if names.get(int(d["id"])) is None]
    if missing:
        raise GeometryError(f"parcels without a class: {missing[:5]}")
    if class_names is None:
        found = sorted(set(names[int(d["id"])] for d in doc) - {OTHERS})
        class_names = found + ([OTHERS] if OTHERS in names.values() else [])
    lookup = {n: i for i, n in enumerate(class_names)}
    parcels = [
        Parcel(id=int(d["id"]), rings=[[tuple(pt) for pt in r] for r in d["rings"]],
               label=lookup[names[int(d["id"])]], split=d.get("split", "none"))
        for d in doc
    ]
    return parcels, list(class_names)


# -- synthetic data ------------------------------------------------------


@dataclass
class SynthSpec:
    """Desk-scale stand-in for a surveyed county.

    Each class follows a Gaussian NDVI-like bump peaking at
    ``peak_months[k]`` (1-based). Unset per-class lists get evenly spread
    defaults.
    """

    classes: int = 5
    grid: list[int] = field(default_factory=lambda: [64, 64])
    months: int = 9
    sigma: float = 0.05
    seed: int = 0
    peak_months: list[int] | None = None
    amplitudes: list[float] | None = None
    widths: list[float] | None = None
    parcel_min: int = 6
    parcel_max: int = 10
    satellite: str = "sentinel2"

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        k, t = self.classes, self.months
        if self.peak_months is None:
            self.peak_months = [int(round(m)) for m in np.linspace(2, max(t - 1, 2), k)]
        if self.amplitudes is None:
            self.amplitudes = [float(a) for a in np.linspace(1.0, 0.6, k)]
        if self.widths is None:
            self.widths = [1.5] * k
        for name in ("peak_months", "amplitudes", "widths"):
            if len(getattr(self, name)) != k:
                raise ValueError(f"{name} needs one entry per class")
        if any(not 1 <= m <= t for m in self.peak_months):
            raise ValueError(f"peak months must lie in [1, {t}]")
        if not 2 <= self.parcel_min <= self.parcel_max:
            raise ValueError("need 2 <= parcel_min <= parcel_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class SynthScene:
    cube: FeatureCube
    labels: np.ndarray
    parcel_ids: np.ndarray
    parcels: list[Parcel]
    class_names: list[str]
    bands: np.ndarray


def _cuts(rng, total, lo, hi):
    edges = [0]
    while edges[-1] < total:
        step = int(rng.integers(lo, hi + 1))
        if total - (edges[-1] + step) < lo:
            step = total - edges[-1]
        edges.append(edges[-1] + step)
    return edges


def _phenology(months, peak, amp, width):
    m = np.arange(1, months + 1, dtype=np.float64)
    return amp * np.exp(-((m - peak) ** 2) / (2.0 * width**2))


# reflectance = base + slope * vigour, per band in ROLES order
_BASE = np.array([0.06, 0.09, 0.12, 0.20, 0.25, 0.18])
_SLOPE = np.array([-0.02, 0.02, -0.08, 0.35, -0.10, -0.08])
_BARE_VIGOUR = 0.05


def synth_generate(spec: SynthSpec) -> SynthScene:
    """Tile the grid into rectangular parcels and simulate their band time series.

    Parcels leave a one-pixel unlabeled margin on their right and bottom
    edges, like field boundaries. Classes are dealt round-robin over a
    shuffled parcel list so they stay balanced.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.grid
    rects = []
    rows = _cuts(rng, h, spec.parcel_min, spec.parcel_max)
    for y0, y1 in zip(rows[:-1], rows[1:]):
        cols = _cuts(rng, w, spec.parcel_min, spec.parcel_max)
        rects += [(x0, y0, x1 - 1, y1 - 1) for x0, x1 in zip(cols[:-1], cols[1:])]
    labels = rng.permutation(np.arange(len(rects)) % spec.classes)
    parcels = [Parcel(id=i + 1, rings=[rectangle(*r)], label=int(k)) for i, (r, k) in enumerate(zip(rects, labels))]
    ids, label_plane = rasterize_parcels(parcels, (h, w))

    t = spec.months
    vigour = np.full((h, w, t), _BARE_VIGOUR)
    for k in range(spec.classes):
        curve = _phenology(t, spec.peak_months[k], spec.amplitudes[k], spec.widths[k])
        vigour[label_plane == k] = curve
    bands = _BASE + vigour[..., None] * _SLOPE
    if spec.sigma > 0:
        bands = bands + rng.normal(0.0, spec.sigma, size=bands.shape)
    bands = np.clip(bands, 0.005, 1.0)
    feats, flagged = compute_indices(bands)
    # short series sit in the growing season starting in March, like the survey stacks
    months = list(range(3, 3 + t)) if t <= 10 else list(range(1, t + 1))
    cube = FeatureCube(data=feats.astype(np.float32), satellite=Satellite(spec.satellite),
                       months=months, flagged=flagged)
    names = list(CROP_NAMES[: spec.classes]) + [f"class_{i}" for i in range(len(CROP_NAMES), spec.classes)]
    return SynthScene(cube=cube, labels=label_plane, parcel_ids=ids, parcels=parcels,
                      class_names=names, bands=bands.transpose(2, 0, 1, 3))



def write_scenes(out_dir, bands: np.ndarray, months, sat: Satellite | str = Satellite.SENTINEL2,
                 year: int = 2020) -> list[Path]:
    """Write a (t, H, W, 6) band stack as one cloud-free scene manifest per month."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for plane, month in zip(bands, months):
        stem = f"scene_{year}{month:02d}15"
        files = {}
        for k, (name, _) in enumerate(band_map(sat)):
            files[name] = f"{stem}_{name}.ctns"
            tensor.save(out_dir / files[name], np.ascontiguousarray(plane[..., k], dtype=np.float64))
        manifest = {"date": f"{year}-{month:02d}-15", "cloud_fraction": 0.0, "bands": files}
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths
