"""Scene selection, cloud masking, monthly median compositing and gap filling.

Masked-out observations are carried as NaN in the band planes; the valid
mask is kept alongside so the two never disagree.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from crophybrid import tensor
from crophybrid.features import ROLES, Satellite, band_map

log = logging.getLogger(__name__)

DEFAULT_MONTHS = tuple(range(3, 12))  # March to November
DEFAULT_CLOUD_THRESHOLD = 0.10


class PipelineWarning(UserWarning):
    pass


class GridError(ValueError):
    pass


class UnfillableError(ValueError):
    pass


@dataclass
class Scene:
    """One acquisition: (H, W, 6) band planes in ``ROLES`` order plus a valid mask."""

    bands: np.ndarray
    valid: np.ndarray | None = None
    date: dt.date | None = None
    cloud_fraction: float = 0.0

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        if self.bands.ndim != 3 or self.bands.shape[-1] != len(ROLES):
            raise GridError(f"band planes must be (H, W, {len(ROLES)}), got {self.bands.shape}")
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.bands), axis=-1)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.grid:
            raise GridError(f"mask grid {self.valid.shape} does not match bands {self.grid}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.bands.shape[:2]


@dataclass
class SceneStack:
    scenes: list[Scene]
    months: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.months) != len(self.scenes):
            raise GridError("one month label per scene required")
        if any(b <= a for a, b in zip(self.months, self.months[1:])):
            raise GridError(f"months must be strictly increasing: {self.months}")

    def as_array(self) -> np.ndarray:
        """(t, H, W, 6) array."""
        return np.stack([s.bands for s in self.scenes])

    @classmethod
    def from_array(cls, arr: np.ndarray, months) -> "SceneStack":
        return cls([Scene(bands=a) for a in arr], list(months))

    def save(self, out_dir, extra: dict | None = None) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tensor.save(out_dir / "stack.ctns", self.as_array())
        h, w = self.scenes[0].grid
        meta = {"months": self.months, "roles": list(ROLES), "grid": {"h": h, "w": w}}
        meta.update(extra or {})
        (out_dir / "stack.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir) -> "SceneStack":
        in_dir = Path(in_dir)
        meta = json.loads((in_dir / "stack.json").read_text())
        return cls.from_array(tensor.load(in_dir / "stack.ctns").numpy().astype(np.float64), meta["months"])


def filter_by_cloud(scenes: list[Scene], threshold: float = DEFAULT_CLOUD_THRESHOLD) -> list[Scene]:
    """Keep scenes whose cloud fraction is strictly below ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    kept = [s for s in scenes if s.cloud_fraction < threshold]
    if not kept:
        warnings.warn(
            f"no scene below cloud threshold {threshold}; months may be gap-filled",
            PipelineWarning,
            stacklevel=2,
        )
    return kept


def apply_cloud_mask(scene: Scene, mask) -> Scene:
    """AND ``mask`` into the scene's valid plane and blank invalid pixels with NaN."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scene.grid:
        raise GridError(f"mask grid {mask.shape} does not match scene grid {scene.grid}")
    valid = scene.valid & mask
    bands = np.where(valid[..., None], scene.bands, np.nan)
    return replace(scene, bands=bands, valid=valid)


def monthly_median(groups: dict[int, list[Scene]], months=None) -> SceneStack:
    """Per-pixel, per-band median over each month's valid observations.

    Even counts use the mean of the two middle values. Months listed in
    ``months`` without any scene come out all-NaN; pixels never observed in
    a month stay NaN. Both are left for :func:`fill_gaps`.
    """
    months = sorted(groups) if months is None else list(months)
    grid = None
    for scenes in groups.values():
        for s in scenes:
            if grid is None:
                grid = s.grid
            elif s.grid != grid:
                raise GridError(f"scene grid {s.grid} does not match {grid}")
    if grid is None:
        raise GridError("no scenes to composite")

    composites = []
    for m in months:
        scenes = groups.get(m, [])
        if not scenes:
            warnings.warn(f"month {m} has no usable scene", PipelineWarning, stacklevel=2)
            composites.append(Scene(bands=np.full(grid + (len(ROLES),), np.nan)))
            continue
        obs = np.stack([np.where(s.valid[..., None], s.bands, np.nan) for s in scenes])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(obs, axis=0)
        composites.append(Scene(bands=med))
    return SceneStack(composites, months)


def _interp_series(arr: np.ndarray) -> np.ndarray:
    """Linear interpolation along axis 0 with nearest-value edge extension.

    Series without any finite value are returned untouched (all NaN).
    """
    t = arr.shape[0]
    ok = np.isfinite(arr)
    idx = np.arange(t).reshape((t,) + (1,) * (arr.ndim - 1))
    prev = np.maximum.accumulate(np.where(ok, idx, -1), axis=0)
    nxt = np.flip(np.minimum.accumulate(np.flip(np.where(ok, idx, t), axis=0), axis=0), axis=0)
    has_prev = prev >= 0
    has_next = nxt < t
    pv = np.take_along_axis(arr, np.clip(prev, 0, t - 1), axis=0)
    nv = np.take_along_axis(arr, np.clip(nxt, 0, t - 1), axis=0)
    span = np.where(has_prev & has_next & (nxt > prev), nxt - prev, 1)
    w = (idx - prev) / span
    interior = (1.0 - w) * pv + w * nv
    out = np.where(has_prev & has_next, interior, np.where(has_prev, pv, nv))
    return np.where(ok, arr, out)


def fill_gaps(stack: SceneStack) -> SceneStack:
    """Fill NaNs along time; fully unobserved pixels get that month's band mean."""
    arr = stack.as_array()  # (t, H, W, 6)
    if not np.any(np.isfinite(arr)):
        raise UnfillableError("stack has no valid observation anywhere")
    filled = _interp_series(arr)
    for b in range(arr.shape[-1]):
        plane = filled[..., b]
        if np.all(np.isfinite(plane)):
            continue
        if not np.any(np.isfinite(plane)):
            raise UnfillableError(f"band {ROLES[b]} has no valid observation anywhere")
        for k in range(plane.shape[0]):
            month = plane[k]
            hole = ~np.isfinite(month)
            if hole.any():
                month[hole] = month[~hole].mean()
    return SceneStack.from_array(filled, stack.months)


# -- ingestion -------------------------------------------------------------


def load_scene(manifest_path, sat: Satellite | str = Satellite.SENTINEL2) -> Scene:
    """Read a scene from its JSON manifest.

    Manifest keys: ``date`` (ISO), ``cloud_fraction``, ``bands`` mapping band
    names to CTNS files, ``mask`` (CTNS, nonzero = clear) and an optional
    ``scale`` multiplied into reflectances.
    """
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    scale = float(meta.get("scale", 1.0))
    planes = []
    for name, role in band_map(sat):
        if name not in meta["bands"]:
            raise KeyError(f"{manifest_path.name}: band {name} ({role}) missing")
        planes.append(tensor.load(base / meta["bands"][name]).numpy().astype(np.float64) * scale)
    bands = np.stack(planes, axis=-1)
    scene = Scene(
        bands=bands,
        date=dt.date.fromisoformat(meta["date"]),
        cloud_fraction=float(meta["cloud_fraction"]),
    )
    if "mask" in meta:
        scene = apply_cloud_mask(scene, tensor.load(base / meta["mask"]).numpy() != 0)
    return scene


def run(scene_dir, sat=Satellite.SENTINEL2, months=DEFAULT_MONTHS,
        threshold=DEFAULT_CLOUD_THRESHOLD) -> SceneStack:
    """All preprocessing steps on a directory of scene manifests."""
    manifests = sorted(Path(scene_dir).glob("*.json"))
    scenes = [load_scene(p, sat) for p in manifests]
    log.info("loaded %d scenes from %s", len(scenes), scene_dir)
    scenes = filter_by_cloud(scenes, threshold)
    groups: dict[int, list[Scene]] = defaultdict(list)
    for s in sorted(scenes, key=lambda s: s.date):
        if s.date.month in months:
            groups[s.date.month].append(s)
    return fill_gaps(monthly_median(groups, months))
