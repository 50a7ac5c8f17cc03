"""Ground-truth activity maps and the box-pooling decoders.

Class indices are 0-based here (``0 .. n_individual-1`` for individual
actions, ``0 .. n_group-1`` for group activities). Files and CLI output use
1-based indices. Map arrays are ``H x W x (n_individual + n_group)`` with the
individual fields first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SIGMA_MIN = 0.5


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        # plain floats so files and checksums do not depend on how a box was built
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def clamped(self, width: float, height: float) -> "BBox":
        x1, x2 = min(max(self.x1, 0.0), width), min(max(self.x2, 0.0), width)
        y1, y2 = min(max(self.y1, 0.0), height), min(max(self.y2, 0.0), height)
        return BBox(x1, y1, x2, y2)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Person:
    box: BBox
    action: int


@dataclass
class Scene:
    """One annotated sample. Boxes are in image pixels."""

    persons: list[Person]
    group: int
    image_size: tuple[int, int]  # (H, W)
    id: int = 0
    key_actor: int | None = None
    frames_ref: int | None = None
    extra: dict = field(default_factory=dict)

    def validate(self, n_individual: int, n_group: int) -> None:
        if not 0 <= self.group < n_group:
            raise ValueError(f"scene {self.id}: group {self.group} outside 0..{n_group - 1}")
        for m, p in enumerate(self.persons):
            if not 0 <= p.action < n_individual:
                raise ValueError(f"scene {self.id}: person {m} action {p.action} outside 0..{n_individual - 1}")
        if self.key_actor is not None and not 0 <= self.key_actor < len(self.persons):
            raise ValueError(f"scene {self.id}: key_actor {self.key_actor} out of range")

    def grid_boxes(self, grid: tuple[int, int]) -> list[BBox]:
        """Boxes mapped to grid units and clamped to the grid."""
        H, W = self.image_size
        gh, gw = grid
        return [p.box.scaled(gw / W, gh / H).clamped(gw, gh) for p in self.persons]


@dataclass(frozen=True)
class GaussianParams:
    mu: tuple[float, float]
    sigma: tuple[float, float]


def gaussian_params(box: BBox, sigma_min: float = SIGMA_MIN) -> GaussianParams:
    """Center of the box and a quarter of its width/height, floored at ``sigma_min``."""
    mu = ((box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2)
    sx = max((box.x2 - box.x1) / 4, sigma_min)
    sy = max((box.y2 - box.y1) / 4, sigma_min)
    return GaussianParams(mu, (sx, sy))


def gaussian_density(gp: GaussianParams, grid: tuple[int, int]) -> np.ndarray:
    """Bivariate diagonal-covariance normal density at every cell center."""
    H, W = grid
    (mx, my), (sx, sy) = gp.mu, gp.sigma
    zx = np.arange(W) + 0.5
    zy = np.arange(H) + 0.5
    q = ((zx[None, :] - mx) / sx) ** 2 + ((zy[:, None] - my) / sy) ** 2
    return np.exp(-0.5 * q) / (2 * math.pi * sx * sy)


def render_person_map(
    box: BBox,
    action: int | None,
    group: int,
    grid: tuple[int, int],
    n_individual: int,
    n_group: int,
    sigma_min: float = SIGMA_MIN,
) -> np.ndarray:
    """Person-specific map: the normalized Gaussian in the action and group fields.

    ``action=None`` (or ``n_individual == 0``) writes only the group field.
    """
    H, W = grid
    out = np.zeros((H, W, n_individual + n_group))
    dens = gaussian_density(gaussian_params(box, sigma_min), grid)
    peak = dens.max()
    if peak > 0:
        dens = dens / peak
    else:
        return out
    if action is not None and n_individual > 0:
        out[:, :, action] = dens
    out[:, :, n_individual + group] = dens
    return out


def combine_max(person_maps: Sequence[np.ndarray], shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Elementwise maximum over person maps; all-zero map for an empty list."""
    if not person_maps:
        if shape is None:
            raise ValueError("combine_max: empty list needs an explicit shape")
        return np.zeros(shape)
    first = person_maps[0].shape
    for m in person_maps:
        if m.shape != first:
            raise ValueError(f"combine_max: shape {m.shape} != {first}")
    out = person_maps[0].copy()
    for m in person_maps[1:]:
        np.maximum(out, m, out=out)
    return out


def build_activity_map(
    scene: Scene,
    grid: tuple[int, int],
    n_individual: int,
    n_group: int,
    sigma_min: float = SIGMA_MIN,
    group_only: bool = False,
) -> np.ndarray:
    """Ground-truth map of a scene on an ``H' x W'`` grid.

    With ``group_only`` the individual fields are omitted entirely.
    """
    scene.validate(n_individual, n_group)
    ni = 0 if group_only else n_individual
    maps = [
        render_person_map(box, None if group_only else p.action, scene.group, grid, ni, n_group, sigma_min)
        for box, p in zip(scene.grid_boxes(grid), scene.persons)
    ]
    return combine_max(maps, (grid[0], grid[1], ni + n_group))


# ----------------------------------------------------------------------------
# decoding


def box_cells(box: BBox, grid: tuple[int, int]) -> tuple[slice, slice]:
    """Row/column slices of the integer cells covered by a grid-unit box."""
    H, W = grid
    x0 = min(max(math.floor(box.x1), 0), W)
    x1 = min(max(math.ceil(box.x2), 0), W)
    y0 = min(max(math.floor(box.y1), 0), H)
    y1 = min(max(math.ceil(box.y2), 0), H)
    return slice(y0, y1), slice(x0, x1)


def box_field_sums(amap: np.ndarray, box: BBox, fields: slice) -> np.ndarray:
    rows, cols = box_cells(box, amap.shape[:2])
    return amap[rows, cols, fields].sum(axis=(0, 1))


def decode_group_by_pooling(amap: np.ndarray, boxes: Sequence[BBox], n_group: int) -> tuple[int, np.ndarray]:
    """Group class with the largest field sum over all person boxes.

    Boxes are in grid units. Ties go to the lowest index.
    """
    if len(boxes) == 0:
        raise ValueError("decode_group_by_pooling: need at least one box")
    n_ind = amap.shape[2] - n_group
    scores = np.zeros(n_group)
    for b in boxes:
        scores += box_field_sums(amap, b, slice(n_ind, n_ind + n_group))
    return int(np.argmax(scores)), scores


def decode_individual_by_pooling(amap: np.ndarray, box: BBox, n_individual: int) -> int:
    return int(np.argmax(box_field_sums(amap, box, slice(0, n_individual))))


# ----------------------------------------------------------------------------
# image export

# fixed palette; classes beyond its length cycle
PALETTE = np.array(
    [
        [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
        [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
        [0, 128, 128], [170, 110, 40],
    ],
    dtype=np.float64,
)


def to_gray_bytes(field2d: np.ndarray) -> np.ndarray:
    return np.rint(255 * np.clip(field2d, 0.0, 1.0)).astype(np.uint8)


def composite(fields: np.ndarray) -> np.ndarray:
    """Color composite of an ``H x W x n`` stack: each pixel takes the color of
    its strongest field, scaled by that field's value."""
    if fields.shape[2] == 0:
        return np.zeros(fields.shape[:2] + (3,), dtype=np.uint8)
    v = np.clip(fields, 0.0, 1.0)
    best = v.argmax(axis=2)
    strength = np.take_along_axis(v, best[..., None], axis=2)
    color = PALETTE[best % len(PALETTE)] / 255.0
    return np.rint(255 * color * strength).astype(np.uint8)


def write_pgm(path: str | Path, field2d: np.ndarray) -> None:
    img = to_gray_bytes(field2d)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """Read back a binary PGM/PPM written by this module."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, dims, _maxval, body = parts
    w, h = (int(v) for v in dims.split())
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if magic == b"P6" else arr.reshape(h, w)
