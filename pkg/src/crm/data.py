"""Synthetic group-activity scenes, dataset files and splits.

Persons are drawn as textured rectangles; the texture encodes the individual
action and the fill color is random, so actions are only recoverable from
local structure. Two labeling rules are available:

``majority``
    group = most frequent individual action (ties to the lowest index);
    requires ``n_group == n_individual``.
``keyactor-side``
    exactly one key actor performs one of the first ``n_group // 2`` actions,
    everyone else one of the remaining actions; group =
    ``2 * key_action + side`` with side 0 for the left half, 1 for the right.

Annotation files store 1-based class indices; in memory they are 0-based.
RGB frames are stored centered (intensity minus 0.5); flow frames are
already zero-mean.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from crm.activity_map import BBox, Person, Scene

RULES = ("majority", "keyactor-side")
FORMAT_VERSION = 1
FRAMES_MAGIC = b"CRMFRAMES\n"


class DatasetFormatError(ValueError):
    """Malformed dataset file; carries the location of the problem."""

    def __init__(self, message: str, path=None, line: int | None = None, column: int | None = None,
                 offset: int | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column}")
        if offset is not None:
            loc.append(f"offset {offset}")
        where = f" ({', '.join(loc)})" if loc else ""
        super().__init__(f"{path}: {message}{where}" if path else f"{message}{where}")
        self.line, self.column, self.offset = line, column, offset


@dataclass
class SyntheticConfig:
    image_size: tuple[int, int] = (96, 160)
    grid: tuple[int, int] = (24, 40)
    n_individual: int = 4
    n_group: int = 4
    persons: tuple[int, int] = (3, 8)
    frames: int = 1
    scenes: int = 400
    seed: int = 0
    modalities: int = 1
    rule: str = "keyactor-side"
    box_width: tuple[int, int] = (12, 20)
    box_height: tuple[int, int] = (20, 32)
    min_gap: int = 4
    noise: float = 0.05
    jitter: int = 2

    def __post_init__(self):
        for name in ("image_size", "grid", "persons", "box_width", "box_height"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.n_individual < 2 or self.n_group < 2:
            raise ValueError("n_individual and n_group must be >= 2")
        if not 1 <= self.persons[0] <= self.persons[1]:
            raise ValueError("persons must satisfy 1 <= min <= max")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.rule == "majority" and self.n_group != self.n_individual:
            raise ValueError("majority rule needs n_group == n_individual")
        if self.rule == "keyactor-side":
            if self.n_group % 2:
                raise ValueError("keyactor-side rule needs an even n_group")
            if self.n_individual <= self.n_group // 2:
                raise ValueError("keyactor-side rule needs n_individual > n_group / 2")
        if self.frames < 1 or self.modalities not in (1, 2) or self.scenes < 1:
            raise ValueError("need frames >= 1, scenes >= 1, modalities in {1, 2}")
        if min(self.box_width) <= 2 or min(self.box_height) <= 2:
            raise ValueError("boxes must be wider and taller than 2 pixels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class Dataset:
    scenes: list[Scene]
    frames: dict[str, np.ndarray]  # modality -> S x K x H x W x C float32
    config: SyntheticConfig
    splits: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = [None] * len(self.scenes)

    def __len__(self) -> int:
        return len(self.scenes)

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        idx = list(idx)
        frames = {k: v[idx] for k, v in self.frames.items()}
        scenes = [replace(self.scenes[i], frames_ref=j) for j, i in enumerate(idx)]
        tags = [tag if tag is not None else self.splits[i] for i in idx]
        return Dataset(scenes, frames, self.config, tags)

    def clip(self, idx, modality: str = "rgb") -> np.ndarray:
        """``B x K x H x W x C`` float64 frames for scene indices ``idx``."""
        refs = [self.scenes[i].frames_ref for i in idx]
        return self.frames[modality][refs].astype(np.float64)

    def groups(self) -> np.ndarray:
        return np.array([s.group for s in self.scenes], dtype=np.int64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(annotations_to_json(self), sort_keys=True).encode())
        for k in sorted(self.frames):
            h.update(np.ascontiguousarray(self.frames[k]).tobytes())
        return h.hexdigest()


# ----------------------------------------------------------------------------
# generation


def _pattern(action: int, h: int, w: int) -> np.ndarray:
    """Binary texture for an action; 8 base patterns, phases shift beyond that."""
    yy, xx = np.mgrid[0:h, 0:w]
    kind, phase = action % 8, action // 8
    if kind == 0:
        p = (yy + phase) // 2 % 2
    elif kind == 1:
        p = (xx + phase) // 2 % 2
    elif kind == 2:
        p = (xx // 2 + yy // 2 + phase) % 2
    elif kind == 3:
        p = ((xx + yy + phase) // 2) % 2
    elif kind == 4:
        p = ((xx - yy + 64 + phase) // 2) % 2
    elif kind == 5:
        p = ((xx % 4 < 2) & (yy % 4 < 2)).astype(int)
    elif kind == 6:
        p = (yy + phase) // 4 % 2
    else:
        p = (xx + phase) // 4 % 2
    return p.astype(np.float32)


def _place_boxes(rng, cfg: SyntheticConfig, m: int, first_side: int | None) -> list[BBox] | None:
    """Rejection-sample ``m`` non-overlapping boxes; ``first_side`` pins the
    first box's center to the left (0) or right (1) half."""
    H, W = cfg.image_size
    boxes: list[BBox] = []
    g = cfg.min_gap
    for j in range(m):
        for _ in range(200):
            bw = int(rng.integers(cfg.box_width[0], cfg.box_width[1] + 1))
            bh = int(rng.integers(cfg.box_height[0], cfg.box_height[1] + 1))
            lo, hi = 0, W - bw
            if j == 0 and first_side is not None:
                if first_side == 0:
                    hi = min(hi, W // 2 - (bw + 1) // 2 - 1)
                else:
                    lo = max(lo, W // 2 - bw // 2 + 1)
            if hi < lo:
                return None
            x1 = int(rng.integers(lo, hi + 1))
            y1 = int(rng.integers(0, H - bh + 1))
            b = BBox(x1, y1, x1 + bw, y1 + bh)
            if all(
                b.x1 >= o.x2 + g or o.x1 >= b.x2 + g or b.y1 >= o.y2 + g or o.y1 >= b.y2 + g
                for o in boxes
            ):
                boxes.append(b)
                break
        else:
            return None
    return boxes


def key_side(box: BBox, image_width: int) -> int:
    return 0 if (box.x1 + box.x2) / 2 < image_width / 2 else 1


def majority_label(actions, n: int) -> int:
    counts = np.bincount(np.asarray(actions, dtype=np.int64), minlength=n)
    return int(np.argmax(counts))


def _draw_scene(rng, cfg: SyntheticConfig, idx: int) -> Scene:
    H, W = cfg.image_size
    for _ in range(50):
        m = int(rng.integers(cfg.persons[0], cfg.persons[1] + 1))
        if cfg.rule == "keyactor-side":
            n_key = cfg.n_group // 2
            key_action = int(rng.integers(n_key))
            side = int(rng.integers(2))
            boxes = _place_boxes(rng, cfg, m, side)
            if boxes is None:
                continue
            actions = [key_action] + [int(a) for a in rng.integers(n_key, cfg.n_individual, size=m - 1)]
            # shuffle so the key actor is not always listed first
            order = rng.permutation(m)
            persons = [Person(boxes[o], actions[o]) for o in order]
            key = int(np.where(order == 0)[0][0])
            return Scene(persons, 2 * key_action + side, cfg.image_size, id=idx, key_actor=key, frames_ref=idx)
        boxes = _place_boxes(rng, cfg, m, None)
        if boxes is None:
            continue
        target = int(rng.integers(cfg.n_group))
        actions = [target if rng.random() < 0.5 else int(rng.integers(cfg.n_individual)) for _ in range(m)]
        persons = [Person(b, a) for b, a in zip(boxes, actions)]
        return Scene(persons, majority_label(actions, cfg.n_individual), cfg.image_size, id=idx, frames_ref=idx)
    raise ValueError(
        f"cannot pack {cfg.persons} persons of size {cfg.box_width}x{cfg.box_height} "
        f"into a {H}x{W} image with gap {cfg.min_gap}"
    )


def _render(rng, cfg: SyntheticConfig, scene: Scene) -> dict[str, np.ndarray]:
    H, W = cfg.image_size
    K = cfg.frames
    mid = K // 2
    rgb = np.empty((K, H, W, 3), dtype=np.float32)
    flow = np.empty((K, H, W, 2), dtype=np.float32) if cfg.modalities == 2 else None
    bg = rng.uniform(0.3, 0.6, size=3).astype(np.float32)
    colors = rng.uniform(0.2, 1.0, size=(len(scene.persons), 3)).astype(np.float32)
    for k in range(K):
        img = np.empty((H, W, 3), dtype=np.float32)
        img[:] = bg
        fl = np.zeros((H, W, 2), dtype=np.float32) if flow is not None else None
        for p, col in zip(scene.persons, colors):
            dx = dy = 0
            if k != mid and cfg.jitter > 0:
                dx, dy = (int(v) for v in rng.integers(-cfg.jitter, cfg.jitter + 1, size=2))
            x1 = int(min(max(p.box.x1 + dx, 0), W - 1))
            x2 = int(min(max(p.box.x2 + dx, x1 + 1), W))
            y1 = int(min(max(p.box.y1 + dy, 0), H - 1))
            y2 = int(min(max(p.box.y2 + dy, y1 + 1), H))
            pat = _pattern(p.action, y2 - y1, x2 - x1)
            img[y1:y2, x1:x2] = col * (0.55 + 0.45 * pat[..., None])
            if fl is not None:
                ang = 2 * np.pi * p.action / cfg.n_individual
                fl[y1:y2, x1:x2] = (np.cos(ang), np.sin(ang))
        img += rng.normal(0.0, cfg.noise, size=img.shape).astype(np.float32)
        rgb[k] = img - 0.5
        if flow is not None:
            flow[k] = fl + rng.normal(0.0, cfg.noise, size=fl.shape).astype(np.float32)
    out = {"rgb": rgb}
    if flow is not None:
        out["flow"] = flow
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic synthetic dataset; scene ``i`` uses the sub-seed ``(seed, i)``."""
    for attempt in range(20):
        scenes, frames = [], []
        for i in range(cfg.scenes):
            rng = np.random.default_rng([cfg.seed, attempt, i])
            s = _draw_scene(rng, cfg, i)
            scenes.append(s)
            frames.append(_render(rng, cfg, s))
        covered = len({s.group for s in scenes}) == cfg.n_group
        if covered or cfg.scenes < 100:
            break
    else:
        raise ValueError("could not cover every group class; increase scenes")
    stacked = {k: np.stack([f[k] for f in frames]) for k in frames[0]}
    return Dataset(scenes, stacked, cfg)


def _split_indices(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fraction * n))
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def split_dataset(ds: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    tr, te = _split_indices(len(ds), fraction, seed)
    return ds.subset(tr, "train"), ds.subset(te, "test")


def tag_splits(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Same scenes in the same order, tagged ``train``/``test`` as :func:`split_dataset` would."""
    tr, _ = _split_indices(len(ds), fraction, seed)
    chosen = set(tr)
    tags = ["train" if i in chosen else "test" for i in range(len(ds))]
    return Dataset(ds.scenes, ds.frames, ds.config, tags)


def select_split(ds: Dataset, tag: str) -> Dataset:
    return ds.subset([i for i, t in enumerate(ds.splits) if t == tag], tag)


# ----------------------------------------------------------------------------
# files


def annotations_to_json(ds: Dataset) -> dict:
    scenes = []
    for s, tag in zip(ds.scenes, ds.splits):
        rec = {
            "id": s.id,
            "group": s.group + 1,
            "persons": [{"box": list(p.box.as_tuple()), "action": p.action + 1} for p in s.persons],
            "frames_ref": s.frames_ref,
        }
        if s.key_actor is not None:
            rec["key_actor"] = s.key_actor + 1
        if tag is not None:
            rec["split"] = tag
        scenes.append(rec)
    return {"version": FORMAT_VERSION, "config": ds.config.to_dict(), "scenes": scenes}


def frames_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".frames")


def save_dataset(ds: Dataset, path: str | Path, frames: bool = True) -> None:
    """Annotations as JSON at ``path``; frames in ``<path>.frames``."""
    Path(path).write_text(json.dumps(annotations_to_json(ds), indent=1) + "\n")
    if frames and ds.frames:
        _write_frames(frames_path(path), ds.frames)


def _write_frames(path: Path, frames: dict[str, np.ndarray]) -> None:
    header = {"version": FORMAT_VERSION, "dtype": "<f4", "modalities": {}}
    offset = 0
    for name in sorted(frames):
        a = frames[name]
        per_scene = int(np.prod(a.shape[1:])) * 4
        header["modalities"][name] = {
            "shape": list(a.shape),
            "offset": offset,
            "scene_offsets": [offset + i * per_scene for i in range(a.shape[0])],
        }
        offset += a.size * 4
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(FRAMES_MAGIC + struct.pack("<Q", len(hb)) + hb)
        for name in sorted(frames):
            fh.write(np.ascontiguousarray(frames[name], dtype="<f4").tobytes())


def _read_frames(path: Path) -> dict[str, np.ndarray]:
    raw = path.read_bytes()
    if not raw.startswith(FRAMES_MAGIC):
        raise DatasetFormatError("bad frames magic", path, offset=0)
    pos = len(FRAMES_MAGIC)
    if len(raw) < pos + 8:
        raise DatasetFormatError("truncated frames header", path, offset=len(raw))
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen])
    except ValueError:
        raise DatasetFormatError("unreadable frames header", path, offset=pos) from None
    body = memoryview(raw)[pos + hlen:]
    out = {}
    for name, info in header["modalities"].items():
        n = int(np.prod(info["shape"]))
        start, end = info["offset"], info["offset"] + 4 * n
        if end > len(body):
            raise DatasetFormatError(f"frames for {name!r} truncated", path, offset=pos + hlen + len(body))
        out[name] = np.frombuffer(body[start:end], dtype="<f4").astype(np.float32).reshape(info["shape"])
    return out


def _scene_from_json(rec: dict, image_size, where: str) -> Scene:
    try:
        persons = []
        for j, p in enumerate(rec["persons"]):
            box = p["box"]
            if len(box) != 4:
                raise DatasetFormatError(f"{where}.persons[{j}].box must have 4 numbers")
            persons.append(Person(BBox(*(float(v) for v in box)), int(p["action"]) - 1))
        key = rec.get("key_actor")
        return Scene(
            persons,
            int(rec["group"]) - 1,
            tuple(image_size),
            id=int(rec["id"]),
            key_actor=None if key is None else int(key) - 1,
            frames_ref=rec.get("frames_ref"),
        )
    except KeyError as e:
        raise DatasetFormatError(f"{where}: missing field {e}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, DatasetFormatError):
            raise
        raise DatasetFormatError(f"{where}: {e}") from None


def load_dataset(path: str | Path, frames: bool = True) -> Dataset:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(e.msg, path, line=e.lineno, column=e.colno, offset=e.pos) from None
    if not isinstance(doc, dict) or "scenes" not in doc or "config" not in doc:
        raise DatasetFormatError("top level must be an object with 'config' and 'scenes'", path, line=1)
    if doc.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {doc.get('version')!r}", path, line=1)
    try:
        cfg = SyntheticConfig.from_dict(doc["config"])
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(f"config: {e}", path) from None
    scenes, tags = [], []
    for i, rec in enumerate(doc["scenes"]):
        s = _scene_from_json(rec, cfg.image_size, f"scenes[{i}]")
        try:
            s.validate(cfg.n_individual, cfg.n_group)
        except ValueError as e:
            raise DatasetFormatError(f"scenes[{i}]: {e}", path) from None
        scenes.append(s)
        tags.append(rec.get("split"))
    fr = {}
    fp = frames_path(path)
    if frames and fp.exists():
        fr = _read_frames(fp)
    return Dataset(scenes, fr, cfg, tags)
