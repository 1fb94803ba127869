"""Band roles, spectral indices and the 13-channel feature cube."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crophybrid import tensor

ROLES = ("blue", "green", "red", "nir", "swir1", "swir2")
INDICES = ("ndvi", "gndvi", "evi", "savi", "bsi", "ndwi", "ndbi")
CHANNEL_ORDER = ROLES + INDICES
N_CHANNELS = len(CHANNEL_ORDER)

# reflectance outside this range points to a scaling fault upstream
VALID_RANGE = (-0.1, 1.5)
DENOM_EPS = 1e-9


class Satellite(str, enum.Enum):
    SENTINEL2 = "sentinel2"
    LANDSAT8 = "landsat8"


_BANDS = {
    Satellite.SENTINEL2: ("B2", "B3", "B4", "B8", "B11", "B12"),
    Satellite.LANDSAT8: ("B2", "B3", "B4", "B5", "B6", "B7"),
}


class InvalidPixelError(ValueError):
    pass


class GridError(ValueError):
    pass


def band_map(sat: Satellite | str) -> list[tuple[str, str]]:
    """(band name, role) pairs for the six reflectance bands of ``sat``."""
    return list(zip(_BANDS[Satellite(sat)], ROLES))


def _ratio(num, den):
    bad = np.abs(den) < DENOM_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(bad, 0.0, num / np.where(bad, 1.0, den))
    return out, bad


def compute_indices(bands) -> tuple[np.ndarray, np.ndarray]:
    """Expand reflectances into the full 13-feature vector.

    Args:
        bands: array whose last axis holds the six roles in ``ROLES`` order.
            Any leading shape is accepted, so this works per pixel or on
            whole rasters.

    Returns:
        ``(features, flagged)``: features with last axis of length 13 in
        ``CHANNEL_ORDER``, and a boolean array (leading shape) marking
        pixels where some index hit a near-zero denominator and was set to 0,
        or where a reflectance lies outside ``VALID_RANGE``.

    Raises:
        InvalidPixelError: if any input is NaN or infinite.
    """
    b = np.asarray(bands)
    if b.shape[-1] != len(ROLES):
        raise InvalidPixelError(f"expected {len(ROLES)} bands on last axis, got {b.shape[-1]}")
    if not np.all(np.isfinite(b)):
        raise InvalidPixelError("non-finite reflectance in input")
    if b.dtype.kind != "f":
        b = b.astype(np.float64)
    blue, green, red, nir, swir1, _ = np.moveaxis(b, -1, 0)

    ndvi, f0 = _ratio(nir - red, nir + red)
    gndvi, f1 = _ratio(nir - green, nir + green)
    evi, f2 = _ratio(2.5 * (nir - red), nir + 6.0 * red - 7.5 * blue + 1.0)
    savi, f3 = _ratio(1.5 * (nir - red), nir + red + 0.5)
    # "SWIR" in the BSI formula is taken to be SWIR1
    bsi, f4 = _ratio((swir1 + red) - (nir + blue), (swir1 + red) + (nir + blue))
    ndwi, f5 = _ratio(green - nir, green + nir)
    ndbi, f6 = _ratio(swir1 - nir, swir1 + nir)

    idx = np.stack([ndvi, gndvi, evi, savi, bsi, ndwi, ndbi], axis=-1).astype(b.dtype)
    out = np.concatenate([b, idx], axis=-1)
    lo, hi = VALID_RANGE
    flagged = f0 | f1 | f2 | f3 | f4 | f5 | f6 | np.any((b < lo) | (b > hi), axis=-1)
    return out, flagged


@dataclass
class FeatureCube:
    """Per-pixel feature time series, shape (H, W, t, 13)."""

    data: np.ndarray
    satellite: Satellite = Satellite.SENTINEL2
    months: list[int] = field(default_factory=list)
    flagged: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != N_CHANNELS:
            raise GridError(f"feature cube must be (H, W, t, {N_CHANNELS}), got {self.data.shape}")
        if not self.months:
            self.months = list(range(1, self.data.shape[2] + 1))

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def sidecar(self) -> dict:
        h, w = self.grid
        meta = {
            "satellite": Satellite(self.satellite).value,
            "months": list(self.months),
            "channel_order": list(CHANNEL_ORDER),
            "grid": {"h": h, "w": w},
        }
        if self.flagged is not None:
            meta["flagged_pixels"] = int(self.flagged.sum())
        return meta

    def save(self, path, extra: dict | None = None) -> None:
        """Write ``<path>.ctns`` plus the ``<path>.json`` sidecar."""
        path = Path(path)
        tensor.save(path.with_suffix(".ctns"), self.data)
        meta = self.sidecar()
        if extra:
            meta.update(extra)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureCube":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta["channel_order"] != list(CHANNEL_ORDER):
            raise GridError("channel order in sidecar does not match this library")
        data = tensor.load(path.with_suffix(".ctns")).numpy()
        return cls(data=data, satellite=Satellite(meta["satellite"]), months=meta["months"])


def build_feature_cube(scenes, sat: Satellite | str = Satellite.SENTINEL2) -> FeatureCube:
    """Stack composited scenes into a feature cube.

    ``scenes`` is a :class:`crophybrid.pipeline.SceneStack` or any sequence of
    objects with a ``bands`` array of shape (H, W, 6).
    """
    months = list(getattr(scenes, "months", []))
    planes = [np.asarray(s.bands) for s in getattr(scenes, "scenes", scenes)]
    if not planes:
        raise GridError("no scenes to build a feature cube from")
    grid = planes[0].shape
    for p in planes:
        if p.shape != grid or p.shape[-1] != len(ROLES):
            raise GridError(f"scene grid {p.shape} does not match {grid}")
    stacked = np.stack(planes, axis=2)  # (H, W, t, 6)
    feats, flagged = compute_indices(stacked)
    return FeatureCube(
        data=feats.astype(np.float32),
        satellite=Satellite(sat),
        months=months or list(range(1, len(planes) + 1)),
        flagged=flagged,
    )
