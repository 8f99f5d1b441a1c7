"""Synthetic "contextual small objects" scenes and their on-disk format.

Every scene is a textured background with one to four planted objects whose
categories are drawn from a per-background affinity table. Two pairs of
categories (boat/car and bird/plant) are drawn identically when small, so
for small objects only the background tells the pair members apart. Large
objects carry a distinguishing detail.

On disk a split is ``images/NNNNN.ppm`` (binary P6) plus ``manifest.txt``::

    #categories: boat,car,...
    images/00000.ppm<TAB>3<TAB>10 12 18 20<TAB>small
"""
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou


@dataclass
class SceneSpec:
    canvas: int = 96
    backgrounds: tuple = ("sea", "sky", "road", "indoor")
    categories: tuple = ("boat", "car", "bird", "plant", "ball", "box")
    shapes: tuple = ("bar", "bar", "triangle", "triangle", "disc", "square")
    # rows: backgrounds, columns: categories
    affinity: tuple = (
        (0.4, 0.0, 0.0, 0.3, 0.15, 0.15),
        (0.4, 0.0, 0.3, 0.0, 0.15, 0.15),
        (0.0, 0.4, 0.3, 0.0, 0.15, 0.15),
        (0.0, 0.4, 0.0, 0.3, 0.15, 0.15),
    )
    small_range: tuple = (6, 14)
    large_range: tuple = (24, 48)
    small_prob: float = 0.7
    max_objects: int = 4
    small_alpha: float = 0.45
    large_alpha: float = 0.7
    texture_amplitude: float = 0.12
    texture_period: int = 24
    clutter: float = 1.0
    noise: float = 0.04
    small_threshold: int = 16
    max_iou: float = 0.3

    def __post_init__(self):
        for name in ("backgrounds", "categories", "shapes", "small_range", "large_range"):
            setattr(self, name, tuple(getattr(self, name)))
        self.affinity = tuple(tuple(float(v) for v in row) for row in self.affinity)
        if len(self.shapes) != len(self.categories):
            raise ValueError("one shape per category is required")
        if len(self.affinity) != len(self.backgrounds):
            raise ValueError("affinity needs one row per background")
        for bg, row in zip(self.backgrounds, self.affinity):
            if len(row) != len(self.categories) or abs(sum(row) - 1) > 1e-9 or min(row) < 0:
                raise ValueError(f"affinity row for {bg!r} must be a distribution over categories")
        if self.small_range[0] < 4:
            raise ValueError("objects must be at least 4 px")
        if self.large_range[1] > self.canvas:
            raise ValueError("large objects do not fit the canvas")


@dataclass
class Annotation:
    image_id: str
    category: int
    box: tuple  # pixel corners (xmin, ymin, xmax, ymax)
    size_class: str

    @property
    def width(self):
        return self.box[2] - self.box[0]

    @property
    def height(self):
        return self.box[3] - self.box[1]


SHAPE_COLORS = {
    "bar": (0.85, 0.25, 0.2),
    "triangle": (0.2, 0.75, 0.3),
    "disc": (0.25, 0.35, 0.9),
    "square": (0.9, 0.8, 0.2),
}


def _texture(kind, canvas, spec, rng):
    a, period = spec.texture_amplitude, spec.texture_period
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    phase_y, phase_x = rng.uniform(0, period, size=2)
    if kind == "sea":
        t = a * (2 * yy / (canvas - 1) - 1)
    elif kind == "sky":
        t = np.zeros_like(yy)
    elif kind == "road":
        t = a * np.sign(np.sin(2 * np.pi * (yy + phase_y) / period))
    elif kind == "indoor":
        t = a * np.sign(np.sin(2 * np.pi * (yy + phase_y) / period)) * np.sign(np.sin(2 * np.pi * (xx + phase_x) / period))
    else:
        # unknown names get a seeded diagonal texture so custom specs still work
        t = a * np.sign(np.sin(2 * np.pi * (xx + yy + phase_x) / period))
    return np.repeat((0.5 + t)[None], 3, axis=0)


def _object_mask(shape, w, h):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if shape in ("bar", "square"):
        return np.ones((h, w), dtype=bool)
    if shape == "disc":
        return ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # apex at the top centre
        half = (yy + 0.5) / h * (w / 2)
        return np.abs(xx + 0.5 - w / 2) <= half
    raise ValueError(f"unknown shape {shape!r}")


def _detail_mask(category_name, shape, w, h, size_class):
    """Extra dark marking that separates the confusable pairs at large sizes."""
    mask = np.zeros((h, w), dtype=bool)
    if size_class != "large":
        return mask
    if category_name == "car":
        mask[h // 3:2 * h // 3, w // 6:5 * w // 6] = True
    elif category_name == "plant":
        mask[2 * h // 3:, w // 3:2 * w // 3] = True
    return mask


def _object_dims(shape, size):
    if shape == "bar":
        return size, max(4, int(round(size * 0.45)))
    return size, size


def gen_scene(seed, spec=None):
    """Deterministic scene for ``seed``: ``(image (1, 3, H, W) float32, annotations)``.

    The image is quantised to 8 bits so that it survives a PPM round trip
    unchanged.
    """
    spec = SceneSpec() if spec is None else spec
    rng = np.random.default_rng(seed)
    size = spec.canvas
    bg = int(rng.integers(len(spec.backgrounds)))
    img = _texture(spec.backgrounds[bg], size, spec, rng)

    for _ in range(rng.poisson(spec.clutter)):
        s = int(rng.integers(3, 9))
        x0, y0 = rng.integers(0, size - s, size=2)
        img[:, y0:y0 + s, x0:x0 + s] += rng.uniform(-0.15, 0.15)

    n_obj = int(rng.integers(1, spec.max_objects + 1))
    image_id = f"{seed}"
    anns = []
    boxes = []
    for _ in range(n_obj):
        cat = int(rng.choice(len(spec.categories), p=spec.affinity[bg]))
        small = rng.random() < spec.small_prob
        lo, hi = spec.small_range if small else spec.large_range
        shape = spec.shapes[cat]
        w, h = _object_dims(shape, int(rng.integers(lo, hi + 1)))
        placed = None
        for _ in range(50):
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if all(iou(box, b) <= spec.max_iou and not _overlaps(box, b) for b in boxes):
                placed = box
                break
        if placed is None:
            continue
        size_class = "small" if max(w, h) <= spec.small_threshold else "large"
        x0, y0, x1, y1 = placed
        mask = _object_mask(shape, w, h)
        alpha = spec.small_alpha if size_class == "small" else spec.large_alpha
        color = np.array(SHAPE_COLORS[shape])[:, None]
        region = img[:, y0:y1, x0:x1]
        region[:, mask] = (1 - alpha) * region[:, mask] + alpha * color
        detail = _detail_mask(spec.categories[cat], shape, w, h, size_class) & mask
        region[:, detail] *= 0.35
        boxes.append(placed)
        anns.append(Annotation(image_id, cat, placed, size_class))

    img += rng.normal(0, spec.noise, size=img.shape)
    q = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return (q.astype(np.float32) / 255)[None], anns


def _overlaps(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def scene_background(seed, spec=None):
    """Index of the background drawn for ``seed`` (first draw of the scene rng)."""
    spec = SceneSpec() if spec is None else spec
    return int(np.random.default_rng(seed).integers(len(spec.backgrounds)))


def to_uint8(image):
    img = image[0] if image.ndim == 4 else image
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Write a (3, H, W) or (1, 3, H, W) image in [0, 1] as binary P6."""
    q = to_uint8(image)
    _, h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


def _read_header_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_ppm(path):
    """Read a binary P6 (RGB) or P5 (gray) file as float32 ``(1, C, H, W)`` in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _read_header_tokens(data, 4)
    if magic not in ("P6", "P5") or maxval != "255":
        raise ValueError(f"{path}: unsupported image format {magic} maxval {maxval}")
    w, h = int(w), int(h)
    c = 3 if magic == "P6" else 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return (arr.reshape(h, w, c).transpose(2, 0, 1).astype(np.float32) / 255)[None]


def write_pgm(path, heatmap):
    """Write a 2-D array in [0, 1] as binary P5."""
    q = np.clip(np.round(np.asarray(heatmap) * 255), 0, 255).astype(np.uint8)
    h, w = q.shape[-2:]
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.reshape(h, w).tobytes())


def _fmt_coord(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_manifest(path, categories, entries):
    """``entries`` are ``(relative_image_path, Annotation)`` pairs."""
    lines = ["#categories: " + ",".join(categories)]
    for rel, a in entries:
        coords = " ".join(_fmt_coord(v) for v in a.box)
        lines.append(f"{rel}\t{a.category}\t{coords}\t{a.size_class}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def gen_split(seed, spec, count, out_dir):
    """Write ``count`` scenes (seeds ``seed + i``) to ``out_dir``; returns the annotations."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        image, anns = gen_scene(seed + i, spec)
        rel = f"images/{i:05d}.ppm"
        write_ppm(out_dir / rel, image)
        for a in anns:
            entries.append((rel, Annotation(rel, a.category, a.box, a.size_class)))
    write_manifest(out_dir / "manifest.txt", spec.categories, entries)
    return [a for _, a in entries]


class ManifestError(ValueError):
    pass


@dataclass
class Split:
    root: Path
    categories: tuple
    image_ids: list = field(default_factory=list)
    annotations: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.image_ids)

    def image(self, image_id):
        path = self.root / image_id
        if not path.exists():
            raise FileNotFoundError(f"missing image file {path}")
        return read_ppm(path)

    def __iter__(self):
        for image_id in self.image_ids:
            yield image_id, self.image(image_id), self.annotations[image_id]

    def all_annotations(self):
        return [a for i in self.image_ids for a in self.annotations[i]]


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].startswith("#categories:"):
        raise ManifestError(f"{path}:1: expected '#categories:' header")
    header = lines[0][len("#categories:"):].strip()
    categories = tuple(c for c in header.split(",") if c)
    split = Split(path.parent, categories)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        try:
            rel, cat, coords, size_class = parts
            cat = int(cat)
            box = tuple(float(v) for v in coords.split(" "))
            if len(box) != 4 or size_class not in ("small", "large") or not 0 <= cat < len(categories):
                raise ValueError
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: malformed manifest line {line!r}") from None
        if rel not in split.annotations:
            split.image_ids.append(rel)
            split.annotations[rel] = []
        split.annotations[rel].append(Annotation(rel, cat, box, size_class))
    return split


def load_split(path):
    """Load a split directory (or its manifest file) written by :func:`gen_split`."""
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    return read_manifest(manifest)
