"""Procedural toy driving scenes with exact per-pixel labels.

Scenes are painted back to front: sky, grass verge, a perspective road with
lane dashes, sidewalks along the road edges, buildings on the horizon,
trees, then cars on the road. The label of a pixel is the class of the last
layer painted there. Everything is a deterministic function of
``(layout_seed, index)``.

On disk a dataset is ``manifest.tsv`` plus ``images/`` and ``labels/``
holding uint8 tensor files.
"""

import csv
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .stylizer import IDENTITY, DomainGroup, apply
from .tensorio import read_tensor, write_tensor

CLASS_NAMES = ("sky", "road", "building", "vegetation", "car", "sidewalk")
SKY, ROAD, BUILDING, VEGETATION, CAR, SIDEWALK = range(6)

SOURCE_PALETTE = {
    "sky": (0.55, 0.74, 0.95),
    "road": (0.36, 0.36, 0.39),
    "building": (0.62, 0.48, 0.40),
    "vegetation": (0.24, 0.55, 0.22),
    "sidewalk": (0.72, 0.68, 0.60),
    "lane": (0.92, 0.92, 0.86),
}
CAR_COLOURS = ((0.80, 0.12, 0.12), (0.15, 0.25, 0.75), (0.92, 0.92, 0.92), (0.10, 0.10, 0.12), (0.95, 0.80, 0.15))
MANIFEST_COLUMNS = ("sampleId", "domainId", "split", "imagePath", "labelPath")


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    num_classes: int = 6
    layout_seed: int = 0
    clutter: float = 1.0
    palette: dict = field(default_factory=lambda: dict(SOURCE_PALETTE))
    pixel_noise: float = 0.03

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ConfigError(f"the scene renderer paints exactly {len(CLASS_NAMES)} classes")
        if self.width < 16 or self.height < 16:
            raise ConfigError("scenes must be at least 16 x 16")


@dataclass
class Sample:
    sample_id: str
    domain_id: str
    split: str
    image: np.ndarray  # uint8, 3 x H x W
    label: np.ndarray  # uint8, H x W

    def float_image(self):
        return self.image.astype(np.float64) / 255.0


@dataclass
class Dataset:
    samples: list
    root: str = None
    spec: SceneSpec = None

    def split(self, name, domain_id=None):
        return [s for s in self.samples if s.split == name and (domain_id is None or s.domain_id == domain_id)]

    def domains(self, split):
        seen = []
        for s in self.samples:
            if s.split == split and s.domain_id not in seen:
                seen.append(s.domain_id)
        return seen

    def class_histogram(self, split=None):
        counts = Counter()
        for s in self.samples:
            if split is None or s.split == split:
                ids, n = np.unique(s.label, return_counts=True)
                counts.update(dict(zip(ids.tolist(), n.tolist())))
        return dict(sorted(counts.items()))


# rendering -------------------------------------------------------------------


def _fill(canvas, labels, mask, colour, cls, rng, jitter=0.04):
    tint = np.asarray(colour) + rng.uniform(-jitter, jitter, size=3)
    canvas[:, mask] = tint[:, None]
    labels[mask] = cls


def render_scene(spec, index):
    """Return ``(float image 3xHxW in [0,1], uint8 label HxW)`` for one scene."""
    rng = np.random.default_rng([spec.layout_seed, index])
    h, w = spec.height, spec.width
    pal = spec.palette
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    canvas = np.zeros((3, h, w))
    labels = np.zeros((h, w), dtype=np.uint8)

    horizon = int(rng.uniform(0.32, 0.5) * h)
    sky = yy < horizon
    _fill(canvas, labels, sky, pal["sky"], SKY, rng)
    canvas[:, sky] *= (0.85 + 0.25 * yy[sky] / max(horizon, 1))[None]
    _fill(canvas, labels, ~sky, pal["vegetation"], VEGETATION, rng)

    # road: trapezoid from a vanishing point on the horizon to the bottom edge
    vx = rng.uniform(0.35, 0.65) * w
    half_bottom = rng.uniform(0.28, 0.48) * w
    centre_bottom = vx + rng.uniform(-0.15, 0.15) * w
    depth = np.clip((yy - horizon) / max(h - horizon, 1), 0.0, 1.0)
    centre = vx + (centre_bottom - vx) * depth
    half = 1.0 + half_bottom * depth
    ground = yy >= horizon
    road = ground & (np.abs(xx - centre) <= half)
    walk_width = 1.0 + rng.uniform(0.08, 0.16) * w * depth
    sidewalk = ground & ~road & (np.abs(xx - centre) <= half + walk_width)
    _fill(canvas, labels, sidewalk, pal["sidewalk"], SIDEWALK, rng)
    _fill(canvas, labels, road, pal["road"], ROAD, rng)
    dash = road & (np.abs(xx - centre) <= 0.6 + 0.6 * depth) & ((yy - horizon) % 6 < 3) & (depth > 0.15)
    canvas[:, dash] = np.asarray(pal["lane"])[:, None]

    # buildings standing on the horizon
    n_buildings = rng.integers(2, 5 + int(2 * spec.clutter))
    for _ in range(n_buildings):
        bw = rng.uniform(0.1, 0.3) * w
        bx = rng.uniform(-0.1, 1.0) * w
        if abs(bx + bw / 2 - vx) < 0.12 * w:
            continue
        top = rng.uniform(0.05, 0.8) * horizon
        bottom = horizon + rng.uniform(0.0, 0.08) * h
        mask = (xx >= bx) & (xx < bx + bw) & (yy >= top) & (yy < bottom) & ~road & ~sidewalk
        shade = np.asarray(pal["building"]) * rng.uniform(0.75, 1.2)
        _fill(canvas, labels, mask, np.clip(shade, 0, 1), BUILDING, rng)
        windows = mask & ((yy.astype(int) % 5) < 2) & ((xx.astype(int) % 4) < 2)
        canvas[:, windows] *= 0.7

    # trees: canopy ellipses near the horizon
    n_trees = rng.integers(1, 4 + int(3 * spec.clutter))
    for _ in range(n_trees):
        tx = rng.uniform(0, w)
        if abs(tx - vx) < 0.1 * w:
            continue
        ty = horizon - rng.uniform(0.0, 0.35) * horizon
        rx, ry = rng.uniform(0.05, 0.12) * w, rng.uniform(0.06, 0.14) * h
        mask = ((xx - tx) / rx) ** 2 + ((yy - ty) / ry) ** 2 <= 1.0
        mask &= ~road
        shade = np.asarray(pal["vegetation"]) * rng.uniform(0.7, 1.25)
        _fill(canvas, labels, mask, np.clip(shade, 0, 1), VEGETATION, rng, jitter=0.06)

    # cars on the road, scaled by perspective
    n_cars = rng.integers(0, 2 + int(2 * spec.clutter))
    for _ in range(n_cars):
        d = rng.uniform(0.25, 0.95)
        cy = horizon + d * (h - horizon)
        cx = vx + (centre_bottom - vx) * d + rng.uniform(-0.6, 0.6) * half_bottom * d
        cw, ch = (0.18 + 0.25 * d) * w * 0.5, (0.1 + 0.15 * d) * h * 0.5
        mask = (np.abs(xx - cx) <= cw / 2) & (yy <= cy) & (yy > cy - ch)
        colour = CAR_COLOURS[rng.integers(len(CAR_COLOURS))]
        _fill(canvas, labels, mask, colour, CAR, rng, jitter=0.05)
        glass = mask & (yy <= cy - 0.55 * ch)
        canvas[:, glass] = canvas[:, glass] * 0.5 + 0.15

    canvas += rng.normal(0.0, spec.pixel_noise, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0), labels


def to_uint8(image):
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def generate(spec, n, domain=IDENTITY, split="train", start_index=0):
    """Render ``n`` scenes through ``domain`` (a stylizer; identity by default)."""
    if n < 1:
        raise ConfigError(f"need n >= 1 samples, got {n}")
    samples = []
    for i in range(start_index, start_index + n):
        image, label = render_scene(spec, i)
        if not domain.is_identity:
            image = apply(domain, image)
        samples.append(Sample(f"{split}-{i:06d}", domain.id, split, to_uint8(image), label))
    return Dataset(samples, spec=spec)


SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def build_dataset(spec, registry, n_train, n_val, n_test):
    """Source-domain training scenes, validation-domain and held-out test scenes."""
    samples = list(generate(spec, n_train, IDENTITY, "train", SPLIT_OFFSETS["train"]).samples)
    for style in registry.validation:
        samples += generate(spec, n_val, style, "val", SPLIT_OFFSETS["val"]).samples
    for style in registry.test:
        samples += generate(spec, n_test, style, "test", SPLIT_OFFSETS["test"]).samples
    return Dataset(samples, spec=spec)


def write_dataset(dataset, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    rows = []
    for s in dataset.samples:
        stem = f"{s.domain_id}__{s.sample_id}.drpc"
        image_path, label_path = f"images/{stem}", f"labels/{stem}"
        write_tensor(os.path.join(root, image_path), s.image)
        write_tensor(os.path.join(root, label_path), s.label)
        rows.append((s.sample_id, s.domain_id, s.split, image_path, label_path))
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    if dataset.spec is not None:
        sp = dataset.spec
        with open(os.path.join(root, "spec.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"width={sp.width}\nheight={sp.height}\nnum_classes={sp.num_classes}\n"
                     f"layout_seed={sp.layout_seed}\nclutter={sp.clutter!r}\npixel_noise={sp.pixel_noise!r}\n")
    dataset.root = root
    return dataset


def load_dataset(root, num_classes=None, ignore_index=255):
    manifest = os.path.join(root, "manifest.tsv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest at {manifest}")
    samples = []
    shape = None
    with open(manifest, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DataError(f"{manifest}: expected columns {MANIFEST_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            image_path = os.path.join(root, row["imagePath"])
            label_path = os.path.join(root, row["labelPath"])
            for path in (image_path, label_path):
                if not os.path.exists(path):
                    raise FileNotFoundError(f"manifest entry {row['sampleId']}: missing file {path}")
            image, label = read_tensor(image_path), read_tensor(label_path)
            if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] != 3:
                raise DataError(f"{image_path}: expected a uint8 3 x H x W image")
            if label.shape != image.shape[1:]:
                raise DataError(f"{label_path}: label shape {label.shape} does not match image {image.shape}")
            if shape is None:
                shape = image.shape
            elif image.shape != shape:
                raise DataError(f"{image_path}: geometry {image.shape} differs from {shape}")
            if num_classes is not None:
                bad = (label != ignore_index) & (label >= num_classes)
                if bad.any():
                    raise DataError(f"{label_path}: label id {int(label[bad][0])} >= {num_classes}")
            samples.append(Sample(row["sampleId"], row["domainId"], row["split"], image, label))
    spec = None
    if shape is not None:
        stored = _read_spec(os.path.join(root, "spec.txt"))
        spec = SceneSpec(width=shape[2], height=shape[1], num_classes=int(stored.get("num_classes", 6)),
                         layout_seed=int(stored.get("layout_seed", 0)))
    return Dataset(samples, root=root, spec=spec)


def _read_spec(path):
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as fh:
        return dict(line.strip().split("=", 1) for line in fh if "=" in line)


# loading groups --------------------------------------------------------------


class GroupLoader:
    """Endless, seed-deterministic stream of domain-group batches.

    Each epoch visits every training sample once in an order drawn from
    ``(seed, epoch)``; the stream wraps into a freshly shuffled epoch.
    """

    def __init__(self, dataset, registry, batch_groups, seed=0, batch_images=None, use_aux=True, split="train"):
        if batch_groups < 1:
            raise ConfigError(f"batch_groups must be >= 1, got {batch_groups}")
        k = registry.k if use_aux else 0
        if batch_images is not None and batch_groups * (k + 1) != batch_images:
            raise ConfigError(f"batch of {batch_images} images cannot be split into groups of {k + 1} "
                              f"({batch_groups} groups give {batch_groups * (k + 1)})")
        self.samples = [s for s in dataset.samples if s.split == split and s.domain_id == IDENTITY.id]
        if not self.samples:
            raise DataError(f"dataset has no source-domain '{split}' samples")
        self.registry = registry
        self.batch_groups = batch_groups
        self.seed = seed
        self.use_aux = use_aux
        self.epoch = 0
        self._order = self._permutation(0)
        self._pos = 0

    def _permutation(self, epoch):
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))

    def _group(self, sample):
        base = sample.float_image()
        styles = self.registry.train if self.use_aux else []
        images = [base] + [apply(s, base) for s in styles]
        return DomainGroup(images, sample.label, [IDENTITY.id] + [s.id for s in styles], sample.sample_id)

    def next_batch(self):
        groups = []
        for _ in range(self.batch_groups):
            if self._pos == len(self._order):
                self.epoch += 1
                self._order = self._permutation(self.epoch)
                self._pos = 0
            groups.append(self._group(self.samples[self._order[self._pos]]))
            self._pos += 1
        return groups

    def __iter__(self):
        while True:
            yield self.next_batch()


def load_group_batch(dataset, registry, batch_groups, seed=0, batch_images=None):
    """First batch of the stream for ``seed``; see :class:`GroupLoader`."""
    return GroupLoader(dataset, registry, batch_groups, seed, batch_images=batch_images).next_batch()
