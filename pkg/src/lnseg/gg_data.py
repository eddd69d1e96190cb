"""Procedural Good Gestalt stimuli.

Every image is rendered from a part map and a reflectance map: the value of
pixel p in channel c is ``illuminance[part(p), c] * reflectance(p)``. During
training each part gets its own illuminance per channel, so pixels of one part
keep fixed ratios while different parts (and channels) vary independently.
Test images additionally break the colour cue in a dataset specific way.

Mask label order (label 0 is always the background):

    kanizsa             1 circles, 2 square
    closure             1 outlined square (outline, interior and any gaps)
    continuity          1 circle arcs (distractor strokes are background)
    proximity           1..G square groups, left to right
    gradient_occlusion  1 wide gradient rectangle, 2 tall rectangle
    illusory_occlusion  1 striped foreground square
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .model import read_container, write_container
from .numerics import Rng

GENERATOR_VERSION = "gg-1"
SIZE = 64
CHANNELS = 3
DATASETS = ("kanizsa", "closure", "continuity", "proximity", "gradient_occlusion", "illusory_occlusion")
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_SIZES = {"train": 30000, "val": 300, "test": 100}
ILLUM_LOW, ILLUM_HIGH = 0.1, 1.0

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE]


class DatasetError(ValueError):
    pass


@dataclass
class SampleRecord:
    image: np.ndarray  # (64, 64, 3) float32
    mask: np.ndarray  # (64, 64) uint8
    K: int
    dataset: str
    split: str
    index: int
    illuminance: np.ndarray  # (n_parts, 3)
    reflectance: np.ndarray = field(repr=False, default=None)
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Drawing primitives (hard edges, no anti-aliasing)
# ---------------------------------------------------------------------------

def _rect(y0, x0, h, w):
    return (_YY >= y0) & (_YY < y0 + h) & (_XX >= x0) & (_XX < x0 + w)


def _disk(cy, cx, r):
    return (_YY - cy) ** 2 + (_XX - cx) ** 2 <= r * r


def _segment(y0, x0, y1, x1, thickness=2.0):
    """Pixels whose centre lies within thickness/2 of the segment."""
    py, px = _YY + 0.5, _XX + 0.5
    dy, dx = y1 - y0, x1 - x0
    ll = dy * dy + dx * dx
    t = np.clip(((py - y0) * dy + (px - x0) * dx) / max(ll, 1e-12), 0.0, 1.0)
    d2 = (py - (y0 + t * dy)) ** 2 + (px - (x0 + t * dx)) ** 2
    return d2 <= (thickness / 2.0) ** 2


def _arc(cy, cx, r, a0, a1, thickness=2.0):
    """Annular sector between angles a0 < a1 (radians)."""
    py, px = _YY + 0.5, _XX + 0.5
    dist = np.hypot(py - cy, px - cx)
    ang = np.mod(np.arctan2(py - cy, px - cx) - a0, 2 * np.pi)
    return (np.abs(dist - r) <= thickness / 2.0) & (ang <= (a1 - a0))


# ---------------------------------------------------------------------------
# Per-dataset scene layouts. Each returns (part_map, reflectance, params) with
# part ids equal to mask labels.
# ---------------------------------------------------------------------------

def _kanizsa(rng: Rng, test: bool):
    side = int(rng.integers(20, 37))
    r = int(rng.integers(5, 9))
    y0 = int(rng.integers(r + 1, SIZE - side - r))
    x0 = int(rng.integers(r + 1, SIZE - side - r))
    corners = [(y0, x0), (y0, x0 + side), (y0 + side, x0), (y0 + side, x0 + side)]
    if not test:
        corners = [(cy + int(rng.integers(-6, 7)), cx + int(rng.integers(-6, 7))) for cy, cx in corners]
    part = np.zeros((SIZE, SIZE), np.int64)
    for cy, cx in corners:
        part[_disk(cy, cx, r)] = 1
    part[_rect(y0, x0, side, side)] = 2
    refl = np.ones((SIZE, SIZE))
    return part, refl, {"side": side, "radius": r, "y0": y0, "x0": x0}


CLOSURE_INTERIOR_RATIO = 0.5


def _closure(rng: Rng, test: bool):
    side = int(rng.integers(16, 41))
    y0 = int(rng.integers(0, SIZE - side + 1))
    x0 = int(rng.integers(0, SIZE - side + 1))
    part = np.zeros((SIZE, SIZE), np.int64)
    square = _rect(y0, x0, side, side)
    interior = _rect(y0 + 2, x0 + 2, side - 4, side - 4)
    part[square] = 1
    refl = np.ones((SIZE, SIZE))
    refl[interior] = CLOSURE_INTERIOR_RATIO
    gaps = []
    if test:
        n_occ = int(rng.integers(0, 4))
        sides = rng.generator.permutation(4)[:n_occ]
        for s in sides:
            glen = int(rng.integers(max(2, int(0.3 * side)), max(3, int(0.6 * side)) + 1))
            start = int(rng.integers(2, max(3, side - glen - 1)))
            if s == 0:
                g = _rect(y0, x0 + start, 2, glen)
            elif s == 1:
                g = _rect(y0 + side - 2, x0 + start, 2, glen)
            elif s == 2:
                g = _rect(y0 + start, x0, glen, 2)
            else:
                g = _rect(y0 + start, x0 + side - 2, glen, 2)
            g &= square
            refl[g] = CLOSURE_INTERIOR_RATIO
            gaps.append(int(s))
    return part, refl, {"side": side, "y0": y0, "x0": x0, "occluded_sides": gaps}


def _continuity(rng: Rng, test: bool):
    radius = int(rng.integers(10, 25))
    cy = float(rng.integers(radius + 2, SIZE - radius - 2))
    cx = float(rng.integers(radius + 2, SIZE - radius - 2))
    phase = float(rng.uniform(0, 2 * np.pi / 12))
    span = (2 * np.pi / 12) * (0.4 if test else 0.7)
    part = np.zeros((SIZE, SIZE), np.int64)
    ink = np.zeros((SIZE, SIZE), bool)
    for i in range(12):
        a0 = phase + i * 2 * np.pi / 12
        arc = _arc(cy, cx, radius, a0, a0 + span)
        part[arc] = 1
        ink |= arc
    n_distract = 0
    if test:
        n_distract = int(rng.integers(6, 13))
        seg_len = radius * span
        for _ in range(n_distract):
            y = float(rng.uniform(2, SIZE - 2))
            x = float(rng.uniform(2, SIZE - 2))
            th = float(rng.uniform(0, np.pi))
            dy, dx = 0.5 * seg_len * np.sin(th), 0.5 * seg_len * np.cos(th)
            stroke = _segment(y - dy, x - dx, y + dy, x + dx) & (part == 0)
            ink |= stroke
    # distractors share the circle's colour but belong to the background label
    refl = np.ones((SIZE, SIZE))
    return part, refl, {"radius": radius, "cy": cy, "cx": cx, "n_distractors": n_distract, "ink": ink}


PROXIMITY_SQUARE = 6


def _proximity(rng: Rng, test: bool):
    n_groups = 1 if rng.integers(0, 2) == 0 else 3
    s = PROXIMITY_SQUARE
    if n_groups == 1:
        gaps = [1] * 5
        groups = [1] * 6
    else:
        g = int(rng.integers(3, 9))
        gaps = [1, g, 1, g, 1]
        groups = [1, 1, 2, 2, 3, 3]
    width = 6 * s + sum(gaps)
    x = int(rng.integers(0, SIZE - width + 1))
    y0 = int(rng.integers(0, SIZE - s + 1))
    part = np.zeros((SIZE, SIZE), np.int64)
    for i in range(6):
        part[_rect(y0, x, s, s)] = groups[i]
        if i < 5:
            x += s + gaps[i]
    return part, np.ones((SIZE, SIZE)), {"n_groups": n_groups, "gaps": gaps, "y0": y0}


def _gradient_occlusion(rng: Rng, test: bool):
    ww, wh = int(rng.integers(30, 51)), int(rng.integers(10, 19))
    wy, wx = int(rng.integers(0, SIZE - wh + 1)), int(rng.integers(0, SIZE - ww + 1))
    tw, th = int(rng.integers(8, 15)), int(rng.integers(30, 51))
    if test:
        # tall rectangle splits the wide one: covers its full height, inside its span
        tx = int(rng.integers(wx + 6, wx + ww - tw - 6 + 1))
        lo = max(0, wy + wh - th)
        hi = min(wy, SIZE - th)
        ty = int(rng.integers(lo, hi + 1))
    else:
        tx, ty = int(rng.integers(0, SIZE - tw + 1)), int(rng.integers(0, SIZE - th + 1))
    part = np.zeros((SIZE, SIZE), np.int64)
    refl = np.ones((SIZE, SIZE))
    wide = _rect(wy, wx, wh, ww)
    part[wide] = 1
    grad = 0.3 + 0.7 * (_XX - wx) / max(ww - 1, 1)
    refl[wide] = grad[wide]
    tall = _rect(ty, tx, th, tw)
    part[tall] = 2
    refl[tall] = 1.0
    return part, refl, {"wide": [wy, wx, wh, ww], "tall": [ty, tx, th, tw]}


STRIPE_PERIOD = 8
STRIPE_LOW = 0.4


def _stripes(phase: int):
    return np.where(((_XX + phase) % STRIPE_PERIOD) < STRIPE_PERIOD // 2, 1.0, STRIPE_LOW)


def _illusory_occlusion(rng: Rng, test: bool):
    side = int(rng.integers(24, 41))
    y0 = int(rng.integers(0, SIZE - side + 1))
    x0 = int(rng.integers(0, SIZE - side + 1))
    phase = int(rng.integers(0, STRIPE_PERIOD))
    part = np.zeros((SIZE, SIZE), np.int64)
    sq = _rect(y0, x0, side, side)
    part[sq] = 1
    refl = _stripes(phase)
    refl[sq] = _stripes(phase + STRIPE_PERIOD // 2)[sq]
    return part, refl, {"side": side, "y0": y0, "x0": x0, "phase": phase}


_LAYOUTS = {
    "kanizsa": _kanizsa,
    "closure": _closure,
    "continuity": _continuity,
    "proximity": _proximity,
    "gradient_occlusion": _gradient_occlusion,
    "illusory_occlusion": _illusory_occlusion,
}


def expected_K(dataset: str, params: dict | None = None) -> int:
    """Number of co-varying parts, background included."""
    fixed = {"kanizsa": 3, "closure": 2, "continuity": 2, "gradient_occlusion": 3, "illusory_occlusion": 2}
    if dataset == "proximity":
        n_groups = (params or {}).get("n_groups")
        if n_groups not in (1, 3):
            raise DatasetError("proximity needs params['n_groups'] in {1, 3}")
        return n_groups + 1
    if dataset not in fixed:
        raise DatasetError(f"unknown dataset {dataset!r}")
    return fixed[dataset]


def generate_sample(dataset: str, split: str, index: int, master_seed: int) -> SampleRecord:
    """Render one sample; a pure function of its four arguments."""
    if dataset not in _LAYOUTS:
        raise DatasetError(f"unknown dataset {dataset!r}; choose from {', '.join(DATASETS)}")
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    rng = Rng(master_seed).stream(dataset, split, int(index))
    test = split == "test"
    part, refl, params = _LAYOUTS[dataset](rng.stream("layout"), test)
    n_parts = int(part.max()) + 1
    illum = rng.stream("illuminance").uniform(ILLUM_LOW, ILLUM_HIGH, (n_parts, CHANNELS))

    if test:
        if dataset == "kanizsa":
            illum[2] = illum[0]
        elif dataset == "closure":
            # interior reflectance x square illuminance == background value
            illum[0] = CLOSURE_INTERIOR_RATIO * illum[1]
        elif dataset == "proximity":
            illum[2:] = illum[1]
        elif dataset == "illusory_occlusion":
            illum[1] = illum[0]

    image = illum[part] * refl[..., None]
    if dataset == "continuity" and params["n_distractors"]:
        strokes = params["ink"] & (part == 0)
        image[strokes] = illum[1] * refl[strokes][:, None]
    params.pop("ink", None)

    K = expected_K(dataset, params)
    mask = part.astype(np.uint8)
    return SampleRecord(
        image=image.astype(np.float32),
        mask=mask,
        K=K,
        dataset=dataset,
        split=split,
        index=int(index),
        illuminance=illum,
        reflectance=refl,
        params=params,
    )


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    dataset: str
    master_seed: int
    split_sizes: dict = field(default_factory=lambda: dict(DEFAULT_SPLIT_SIZES))
    generator_version: str = GENERATOR_VERSION
    K: dict = field(default_factory=dict)  # split -> list of per-sample K
    files: dict = field(default_factory=dict)  # split -> {"images": ..., "masks": ...}

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


@dataclass
class Split:
    images: np.ndarray  # (n, 64, 64, 3) float32
    masks: np.ndarray  # (n, 64, 64) uint8
    K: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.images)


def generate_split(dataset: str, split: str, n: int, master_seed: int) -> Split:
    images = np.empty((n, SIZE, SIZE, CHANNELS), np.float32)
    masks = np.empty((n, SIZE, SIZE), np.uint8)
    ks = np.empty(n, np.int64)
    for i in range(n):
        rec = generate_sample(dataset, split, i, master_seed)
        images[i], masks[i], ks[i] = rec.image, rec.mask, rec.K
    return Split(images, masks, ks)


def write_split(out_dir, manifest: DatasetManifest, split: str, data: Split) -> None:
    out = Path(out_dir)
    sdir = out / split
    meta = {"dataset": manifest.dataset, "split": split, "master_seed": manifest.master_seed,
            "generator_version": manifest.generator_version}
    write_container(sdir / "images.bin", {"images": data.images}, meta)
    write_container(sdir / "masks.bin", {"masks": data.masks, "K": data.K.astype(np.uint8)}, meta)
    manifest.K[split] = [int(k) for k in data.K]
    manifest.split_sizes[split] = len(data)
    manifest.files[split] = {
        "images": f"{split}/images.bin",
        "masks": f"{split}/masks.bin",
        "images_sha256": _sha256(sdir / "images.bin"),
        "masks_sha256": _sha256(sdir / "masks.bin"),
    }


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 22), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(out_dir, dataset: str, master_seed: int, split_sizes: dict | None = None, log=None) -> DatasetManifest:
    sizes = dict(DEFAULT_SPLIT_SIZES)
    sizes.update(split_sizes or {})
    manifest = DatasetManifest(dataset=dataset, master_seed=int(master_seed), split_sizes=sizes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        if sizes[split] <= 0:
            continue
        if log:
            log(f"generating {dataset}/{split}: {sizes[split]} samples")
        write_split(out, manifest, split, generate_split(dataset, split, sizes[split], master_seed))
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def read_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json in {data_dir}")
    return DatasetManifest.from_json(path.read_text(encoding="utf-8"))


def read_split(data_dir, split: str) -> Split:
    manifest = read_manifest(data_dir)
    if split not in manifest.files:
        raise DatasetError(f"{data_dir}: split {split!r} not present")
    files = manifest.files[split]
    imgs, _ = read_container(Path(data_dir) / files["images"])
    masks, _ = read_container(Path(data_dir) / files["masks"])
    return Split(imgs["images"], masks["masks"], masks["K"].astype(np.int64))


def read_dataset(data_dir) -> dict:
    manifest = read_manifest(data_dir)
    return {split: read_split(data_dir, split) for split in manifest.files}


# ---------------------------------------------------------------------------
# PNG export (lossy; never read back for training)
# ---------------------------------------------------------------------------

PALETTE = [
    (0, 0, 0), (230, 159, 0), (86, 180, 233), (0, 158, 115),
    (240, 228, 66), (0, 114, 178), (213, 94, 0), (204, 121, 167),
]


def image_to_png(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def mask_to_png(mask: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.astype(np.uint8), "P")
    flat = [v for rgb in PALETTE for v in rgb]
    img.putpalette(flat + [255] * (768 - len(flat)))
    img.save(path)


def export_png(record: SampleRecord, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    stem = f"{record.dataset}_{record.split}_{record.index:05d}"
    ip, mp = out / f"{stem}_image.png", out / f"{stem}_mask.png"
    image_to_png(record.image, ip)
    mask_to_png(record.mask, mp)
    return ip, mp
