"""Synthetic segmentation data, slice preprocessing, augmentation and dataset IO."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, GenerationError
from .formats import read_tensor, write_tensor
from .kvconfig import parse_kv

AUGMENT_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")
INVERSE_OP = {"hflip": "hflip", "vflip": "vflip", "rot90": "rot270", "rot180": "rot180",
              "rot270": "rot90"}
FAMILIES = {"ellipse": "large", "disc": "small", "curve": "tissue"}
SMALL_MAX_AREA = 0.02
LARGE_MIN_AREA = 0.10
MAX_CURVE_WIDTH = 3
MANIFEST = "manifest.tsv"


@dataclass
class SegSample:
    image: np.ndarray          # (C, H, W) float, values in [0, 1]
    label: np.ndarray          # (H, W) integer class ids
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.label.ndim != 2:
            raise DataError(f"expected (C,H,W) image and (H,W) label, got "
                            f"{self.image.shape} and {self.label.shape}")
        if self.image.shape[1:] != self.label.shape:
            raise DataError(f"image {self.image.shape} and label {self.label.shape} misaligned")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def clip_normalize(raw, lo=-125.0, hi=275.0):
    """Clamp to [lo, hi] then rescale to [0, 1]."""
    if lo >= hi:
        raise ConfigError(f"clip bounds need lo < hi, got [{lo}, {hi}]")
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise DataError("clip_normalize needs finite values")
    return np.clip((np.clip(raw, lo, hi) - lo) / (hi - lo), 0.0, 1.0)


def _source_coords(n_out, n_in):
    """Half-pixel-centred source coordinates for a resize from n_in to n_out."""
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _bilinear(image, th, tw):
    c, h, w = image.shape
    ys = np.clip(_source_coords(th, h), 0, h - 1)
    xs = np.clip(_source_coords(tw, w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def _nearest(label, th, tw):
    h, w = label.shape
    ys = np.minimum(np.floor((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    xs = np.minimum(np.floor((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return label[ys][:, xs]


def resize(image, label, target):
    """Bilinear image, nearest-neighbour label; ``target`` is (H, W) or an int."""
    th, tw = (target, target) if np.isscalar(target) else target
    if th < 1 or tw < 1:
        raise ConfigError(f"resize target must be positive, got {target}")
    image = np.asarray(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    if image.shape[1:] == (th, tw):
        out_img, out_lbl = image.copy(), np.asarray(label).copy()
    else:
        out_img, out_lbl = _bilinear(image, th, tw), _nearest(np.asarray(label), th, tw)
    return SegSample(out_img, out_lbl, {"resized": (th, tw)})


def _apply_op(arr, op):
    """Transform the last two axes."""
    if op == "hflip":
        return arr[..., ::-1].copy()
    if op == "vflip":
        return arr[..., ::-1, :].copy()
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
    return np.rot90(arr, k, axes=(-2, -1)).copy()


def augment(sample: SegSample, op, record=True, angle=None):
    """Apply ``op`` to image and label alike.

    ``op="rotate"`` with ``angle`` (degrees) resamples: bilinear image,
    nearest label, zero fill.  Right-angle ops are exact.
    """
    h, w = sample.label.shape
    if op == "rotate":
        if angle is None:
            raise ConfigError("rotate needs an angle")
        img = ndimage.rotate(sample.image, angle, axes=(2, 1), reshape=False, order=1,
                             mode="constant", cval=0.0)
        lbl = ndimage.rotate(sample.label, angle, axes=(1, 0), reshape=False, order=0,
                             mode="constant", cval=0)
        img = np.clip(img, 0.0, 1.0).astype(sample.image.dtype)
        tag = f"rotate{angle:g}"
    elif op in AUGMENT_OPS:
        if op.startswith("rot") and h != w:
            raise ConfigError(f"right-angle rotation needs a square canvas, got {h}x{w}")
        img, lbl = _apply_op(sample.image, op), _apply_op(sample.label, op)
        tag = op
    else:
        raise ConfigError(f"unknown augmentation {op!r}")
    meta = dict(sample.meta)
    if record:
        meta["augment"] = list(meta.get("augment", [])) + [tag]
    return SegSample(img, lbl, meta)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _pair(text, cast=float):
    parts = [cast(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or parts[0] > parts[1]:
        raise ConfigError(f"expected a range 'lo,hi', got {text!r}")
    return tuple(parts)


@dataclass(frozen=True)
class ClassSpec:
    name: str
    family: str                   # ellipse | disc | curve
    area: tuple = (0.12, 0.2)     # per-instance fraction of canvas (ellipse, disc)
    count: tuple = (1, 1)
    intensity: tuple = (0.5, 0.6)
    width: int = 2                # curve thickness in pixels
    length: tuple = (0.6, 0.9)    # curve chord as a fraction of the canvas side

    @property
    def group(self):
        return FAMILIES[self.family]

    def check(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"{self.name}: unknown family {self.family!r}")
        if self.family == "disc" and self.area[1] >= SMALL_MAX_AREA:
            raise ConfigError(f"{self.name}: small instances must stay below 2% of the canvas")
        if self.family == "ellipse" and self.area[0] <= LARGE_MIN_AREA:
            raise ConfigError(f"{self.name}: large instances must exceed 10% of the canvas")
        if self.family == "curve" and not 1 <= self.width <= MAX_CURVE_WIDTH:
            raise ConfigError(f"{self.name}: curve width must be 1..{MAX_CURVE_WIDTH}")
        if self.count[0] < 0:
            raise ConfigError(f"{self.name}: negative instance count")
        if not 0.0 <= self.intensity[0] <= self.intensity[1] <= 1.0:
            raise ConfigError(f"{self.name}: intensity range must lie in [0, 1]")


def default_classes():
    return (
        ClassSpec("large", "ellipse", area=(0.12, 0.2), intensity=(0.75, 0.85)),
        ClassSpec("small", "disc", area=(0.006, 0.015), count=(1, 2), intensity=(0.45, 0.55)),
        ClassSpec("tissue", "curve", width=3, intensity=(0.95, 1.0)),
    )


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    classes: tuple = field(default_factory=default_classes)
    background: float = 0.15
    noise: float = 0.04
    seed: int = 0
    channels: int = 1
    retries: int = 200

    def __post_init__(self):
        if self.size < 8:
            raise ConfigError("canvas must be at least 8 pixels")
        if self.channels not in (1, 3):
            raise ConfigError("images have 1 or 3 channels")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")
        for c in self.classes:
            c.check()

    @property
    def num_classes(self):
        return len(self.classes) + 1

    def grouping_text(self):
        lines = ["0=background,background"]
        lines += [f"{k}={c.group},{c.name}" for k, c in enumerate(self.classes, start=1)]
        return "\n".join(lines) + "\n"

    def to_text(self):
        lines = [f"size={self.size}", f"background={self.background!r}",
                 f"noise={self.noise!r}", f"seed={self.seed}", f"channels={self.channels}",
                 f"classes={len(self.classes)}"]
        for k, c in enumerate(self.classes, start=1):
            lines += [f"class{k}.name={c.name}", f"class{k}.family={c.family}",
                      f"class{k}.area={c.area[0]!r},{c.area[1]!r}",
                      f"class{k}.count={c.count[0]},{c.count[1]}",
                      f"class{k}.intensity={c.intensity[0]!r},{c.intensity[1]!r}",
                      f"class{k}.width={c.width}",
                      f"class{k}.length={c.length[0]!r},{c.length[1]!r}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = parse_kv(text)
        try:
            top = {}
            for key, cast in (("size", int), ("background", float), ("noise", float),
                              ("seed", int), ("channels", int), ("retries", int)):
                if key in kv:
                    top[key] = cast(kv.pop(key))
            n = int(kv.pop("classes", 0))
            classes = []
            for k in range(1, n + 1):
                pre = f"class{k}."
                fam = kv.pop(pre + "family", None)
                if fam is None:
                    raise ConfigError(f"class{k} has no family")
                args = {"name": kv.pop(pre + "name", f"class{k}"), "family": fam}
                for key, cast in (("area", float), ("count", int), ("intensity", float),
                                  ("length", float)):
                    if pre + key in kv:
                        args[key] = _pair(kv.pop(pre + key), cast)
                if pre + "width" in kv:
                    args["width"] = int(kv.pop(pre + "width"))
                classes.append(ClassSpec(**args))
        except ValueError as exc:
            raise ConfigError(f"bad synth spec value: {exc}") from exc
        if kv:
            raise ConfigError(f"unknown synth spec keys: {sorted(kv)}")
        if classes:
            top["classes"] = tuple(classes)
        return cls(**top)


def _ellipse_mask(size, rng, area):
    target = rng.uniform(*area) * size * size
    aspect = rng.uniform(0.6, 1.0)
    a = np.sqrt(target / (np.pi * aspect))
    b = a * aspect
    theta = rng.uniform(0, np.pi)
    margin = a + 1
    if 2 * margin >= size:
        return None
    cy, cx = rng.uniform(margin, size - margin, 2)
    yy, xx = np.mgrid[:size, :size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _disc_mask(size, rng, area):
    r = np.sqrt(rng.uniform(*area) * size * size / np.pi)
    cy, cx = rng.uniform(r + 1, size - r - 1, 2)
    yy, xx = np.mgrid[:size, :size] + 0.5
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _curve_mask(size, rng, spec: ClassSpec):
    """Quadratic Bezier stroke of at most ``width`` pixels thickness."""
    chord = rng.uniform(*spec.length) * size
    angle = rng.uniform(0, np.pi)
    mid = rng.uniform(0.3 * size, 0.7 * size, 2)
    d = 0.5 * chord * np.array([np.sin(angle), np.cos(angle)])
    p0, p2 = mid - d, mid + d
    bend = rng.uniform(-0.25, 0.25) * chord
    p1 = mid + bend * np.array([np.cos(angle), -np.sin(angle)])
    t = np.linspace(0, 1, int(4 * chord) + 2)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    yy, xx = np.mgrid[:size, :size] + 0.5
    dist, _ = cKDTree(pts).query(np.column_stack([yy.ravel(), xx.ravel()]))
    return (dist < spec.width / 2.0).reshape(size, size)


# Paint order: large shapes first, thin and small structures must land on
# unoccupied pixels so every instance keeps its full extent in the label.
# A one-pixel gap keeps instances apart as separate connected components.
_PAINT_ORDER = {"ellipse": 0, "curve": 1, "disc": 2}


def generate_one(spec: SynthSpec, index):
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    label = np.zeros((n, n), dtype=np.uint32)
    image = np.full((n, n), spec.background)
    counts = {}
    order = sorted(range(len(spec.classes)), key=lambda k: _PAINT_ORDER[spec.classes[k].family])
    draws = {k: int(rng.integers(spec.classes[k].count[0], spec.classes[k].count[1] + 1))
             for k in range(len(spec.classes))}
    for k in order:
        c = spec.classes[k]
        counts[c.name] = draws[k]
        for inst in range(draws[k]):
            for _ in range(spec.retries):
                if c.family == "ellipse":
                    mask = _ellipse_mask(n, rng, c.area)
                elif c.family == "disc":
                    mask = _disc_mask(n, rng, c.area)
                else:
                    mask = _curve_mask(n, rng, c)
                if mask is not None and mask.any() and not (label[ndimage.binary_dilation(mask)] != 0).any():
                    break
            else:
                raise GenerationError(
                    f"sample {index}: could not place {c.name} instance {inst} on a "
                    f"{n}x{n} canvas after {spec.retries} tries")
            label[mask] = k + 1
            image[mask] = rng.uniform(*c.intensity)
    image = image + rng.normal(0.0, spec.noise, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    image = np.repeat(image[None], spec.channels, axis=0)
    return SegSample(image, label, {"source": f"synth:{spec.seed}:{index}", "instances": counts,
                                    "augment": []})


def generate(spec: SynthSpec, n, start=0):
    return [generate_one(spec, start + i) for i in range(n)]


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list
    num_classes: int
    root: Path | None = None

    def __len__(self):
        return len(self.samples)

    def split(self, name):
        return Dataset([s for s in self.samples if s.meta.get("split") == name],
                       self.num_classes, self.root)

    def arrays(self, indices=None):
        idx = range(len(self.samples)) if indices is None else indices
        images = np.stack([self.samples[i].image for i in idx])
        labels = np.stack([self.samples[i].label for i in idx]).astype(np.int64)
        return images, labels


def epoch_order(n, seed, epoch):
    """Deterministic sample order for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def write_dataset(out_dir, samples, num_classes, val_fraction=0.2, extra_files=None):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    n = len(samples)
    n_val = int(round(n * val_fraction))
    lines = []
    for i, s in enumerate(samples):
        split = "val" if i >= n - n_val else "train"
        img, lbl = f"images/{i:05d}.stnt", f"labels/{i:05d}.stnt"
        write_tensor(out / img, s.image.astype(np.float32))
        write_tensor(out / lbl, s.label.astype(np.uint32))
        lines.append(f"{img}\t{lbl}\t{split}\n")
    (out / MANIFEST).write_text("".join(lines))
    (out / "dataset.txt").write_text(f"num_classes={num_classes}\n")
    for name, text in (extra_files or {}).items():
        (out / name).write_text(text)
    return out


def load_dataset(root, split=None):
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DataError(f"{root} has no {MANIFEST}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{manifest}:{lineno}: expected image<TAB>label<TAB>split")
        img_path, lbl_path, which = parts
        if split is not None and which != split:
            continue
        image = read_tensor(root / img_path)
        label = read_tensor(root / lbl_path)
        if image.ndim == 2:
            image = image[None]
        samples.append(SegSample(image, label.astype(np.int64),
                                 {"source": img_path, "split": which, "augment": []}))
    info = root / "dataset.txt"
    if info.is_file():
        num_classes = int(parse_kv(info.read_text())["num_classes"])
    else:
        num_classes = int(max((s.label.max() for s in samples), default=0)) + 1
    for s in samples:
        if s.label.size and s.label.max() >= num_classes:
            raise DataError(f"{s.meta['source']}: label id beyond num_classes={num_classes}")
    return Dataset(samples, num_classes, root)


def synth_dataset(spec: SynthSpec, n, val_fraction=0.2):
    """In-memory equivalent of ``gen-data`` followed by ``load_dataset``."""
    samples = generate(spec, n)
    n_val = int(round(n * val_fraction))
    out = []
    for i, s in enumerate(samples):
        meta = dict(s.meta, split="val" if i >= n - n_val else "train")
        out.append(replace(s, label=s.label.astype(np.int64), meta=meta))
    return Dataset(out, spec.num_classes)
