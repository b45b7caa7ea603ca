"""Images, label maps, manifests, configuration files and the synthetic shape dataset."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .modelio import atomic_write_bytes
from .ops import local_contrast_normalize
from .train import Dataset, TrainConfig

SPLITS = ("train", "val", "test")

log = logging.getLogger(__name__)


class PnmError(ValueError):
    """Malformed binary PPM/PGM file."""

    def __init__(self, message, offset=None):
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class PnmHeaderError(PnmError):
    pass


class PnmMaxvalError(PnmError):
    pass


class PnmTruncatedError(PnmError):
    pass


def _read_header(buf, magic):
    if buf[:2] != magic:
        raise PnmHeaderError(f"expected magic {magic.decode()!r}, found {bytes(buf[:2])!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between tokens
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                nl = buf.find(b"\n", pos)
                pos = len(buf) if nl < 0 else nl + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= len(buf):
                raise PnmTruncatedError("file ends inside the header", pos)
            raise PnmHeaderError(f"expected a decimal number, found {bytes(buf[pos:pos + 1])!r}", pos)
        fields.append((int(buf[start:pos]), start))
    if pos >= len(buf):
        raise PnmTruncatedError("missing whitespace after maxval", pos)
    if not buf[pos:pos + 1].isspace():
        raise PnmHeaderError("maxval must be followed by one whitespace byte", pos)
    (w, w_at), (h, h_at), (maxval, m_at) = fields
    if w < 1 or h < 1:
        raise PnmHeaderError(f"invalid image size {w}x{h}", w_at if w < 1 else h_at)
    if maxval != 255:
        raise PnmMaxvalError(f"maxval must be 255, got {maxval}", m_at)
    return w, h, pos + 1


def _decode(buf, magic, channels):
    w, h, start = _read_header(buf, magic)
    need = w * h * channels
    if len(buf) - start < need:
        raise PnmTruncatedError(f"payload has {len(buf) - start} bytes, expected {need}", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def load_image_ppm(path):
    """Read a binary P6 file as an (h, w, 3) uint8 array."""
    with open(path, "rb") as f:
        return _decode(f.read(), b"P6", 3)


def load_label_pgm(path):
    """Read a binary P5 file as an (h, w) uint8 array of class ids."""
    with open(path, "rb") as f:
        return _decode(f.read(), b"P5", 1)


def encode_ppm(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM images must be (h, w, 3) uint8")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def encode_pgm(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM images must be (h, w) uint8")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def save_image_ppm(path, img):
    atomic_write_bytes(path, encode_ppm(img))


def save_label_pgm(path, labels):
    atomic_write_bytes(path, encode_pgm(labels))


# -- manifests -----------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    records: list
    num_classes: int
    ignore_label: int = 255
    class_names: list = field(default_factory=list)

    def split(self, name):
        return [(img, lab) for s, img, lab in self.records if s == name]

    def text(self):
        lines = [f"K={self.num_classes} ignore={self.ignore_label}"]
        lines += [f"{s}\t{img}\t{lab}" for s, img, lab in self.records]
        return "\n".join(lines) + "\n"


def save_manifest(path, manifest):
    atomic_write_bytes(path, manifest.text().encode())


def load_manifest(path):
    """Parse a manifest; paths are relative to the manifest's directory."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    head = dict(tok.split("=", 1) for tok in lines[0].split())
    try:
        K, ignore = int(head["K"]), int(head["ignore"])
    except (KeyError, ValueError):
        raise ValueError(f"{path}:1: header must be 'K=<int> ignore=<int>'") from None
    records, owner = [], {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in SPLITS:
            raise ValueError(f"{path}:{n}: expected 'split<TAB>image<TAB>label'")
        split, img, lab = parts
        for p in (img, lab):
            if not os.path.exists(os.path.join(root, p)):
                raise FileNotFoundError(f"{path}:{n}: missing file {p}")
            if owner.setdefault(p, split) != split:
                raise ValueError(f"{path}:{n}: {p} appears in splits {owner[p]} and {split}")
        records.append((split, img, lab))
    return DatasetManifest(root, records, K, ignore)


def prepare_images(images, lcn=True, dtype=np.float32):
    """uint8 (n, h, w, 3) -> float (n, 3, h, w) network input."""
    x = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0
    if lcn:
        x = local_contrast_normalize(x).data
    else:
        x = (x - 0.5) / 0.25
    return np.ascontiguousarray(x, dtype=dtype)


def load_split(manifest, split, depth=None, lcn=True, dtype=np.float32):
    """Load one split as raw uint8 images, label maps and ids, with range checks."""
    pairs = manifest.split(split)
    if not pairs:
        raise ValueError(f"manifest has no {split!r} records")
    imgs, labs, ids = [], [], []
    for img_path, lab_path in pairs:
        img = load_image_ppm(os.path.join(manifest.root, img_path))
        lab = load_label_pgm(os.path.join(manifest.root, lab_path))
        if img.shape[:2] != lab.shape:
            raise ValueError(f"{img_path}: image {img.shape[:2]} and label {lab.shape} sizes differ")
        bad = (lab >= manifest.num_classes) & (lab != manifest.ignore_label)
        if bad.any():
            raise ValueError(f"{lab_path}: label {int(lab[bad][0])} outside [0, {manifest.num_classes})")
        if depth is not None and any(s % 2 ** depth for s in lab.shape):
            raise ValueError(f"{img_path}: size {lab.shape} not divisible by 2^{depth}")
        imgs.append(img)
        labs.append(lab)
        ids.append(os.path.splitext(os.path.basename(img_path))[0])
    images = np.stack(imgs)
    return Dataset(prepare_images(images, lcn, dtype), np.stack(labs).astype(np.int64), ids)


# -- configuration -------------------------------------------------------------


@dataclass
class SynthSpec:
    classes: int = 6
    height: int = 64
    width: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    skew: float = 4.0
    data_seed: int = 0
    ignore_label: int = 255
    shapes: tuple = ("rectangle", "disk", "triangle", "bar")

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.height < 8 or self.width < 8:
            raise ValueError("images must be at least 8x8")
        if self.skew < 1:
            raise ValueError("skew must be >= 1")
        if not 0 <= self.ignore_label <= 255 or self.ignore_label < self.classes:
            raise ValueError("ignore_label must be a byte value >= classes")


@dataclass
class RunConfig:
    train: TrainConfig
    synth: SynthSpec
    variants: tuple = ()
    overrides: dict = field(default_factory=dict)


def _convert(text, typ, key, lineno):
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if "bool" in t:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if t.startswith("int | None") or t == "Optional[int]":
            return None if text.lower() in ("none", "") else int(text)
        if "int" in t:
            return int(text)
        if "float" in t:
            return float(text)
        if "tuple" in t:
            return tuple(v.strip() for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ValueError(f"line {lineno}: {key} = {text!r} is not a valid {t}") from None


def _field_types(cls):
    return {f.name: f.type for f in dataclasses.fields(cls)}


def parse_config_text(text, origin="<config>"):
    """Parse ``key = value`` lines into train settings, synthetic-data settings and the variant list."""
    train_t = _field_types(TrainConfig)
    synth_t = _field_types(SynthSpec)
    seen, train_kw, synth_kw, variants = {}, {}, {}, ()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{origin}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ValueError(f"{origin}:{n}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = n
        try:
            if key == "variants":
                variants = _convert(value, "tuple", key, n)
            elif key in train_t:
                train_kw[key] = _convert(value, train_t[key], key, n)
            elif key in synth_t:
                synth_kw[key] = _convert(value, synth_t[key], key, n)
            else:
                raise ValueError(f"line {n}: unknown key {key!r}")
        except ValueError as e:
            raise ValueError(f"{origin}: {e}") from None
    try:
        train = TrainConfig(**train_kw)
        synth = SynthSpec(**synth_kw)
    except ValueError as e:
        raise ValueError(f"{origin}: {e}") from None
    return RunConfig(train, synth, variants, {**train_kw, **synth_kw})


def parse_config(path):
    with open(path) as f:
        return parse_config_text(f.read(), origin=str(path))


# -- synthetic shapes ----------------------------------------------------------


def _class_shapes(spec):
    # the rarest class is always drawn as thin bars
    vocab = list(spec.shapes)
    kinds = [vocab[(c - 1) % len(vocab)] for c in range(1, spec.classes)]
    if "bar" in vocab and spec.classes > 2:
        kinds[-1] = "bar"
    return kinds


def class_palette(K, seed=1234):
    rng = np.random.default_rng(seed)
    hues = (np.arange(K) / K + rng.uniform(0, 1 / K)) % 1.0
    pal = []
    for i, hue in enumerate(hues):
        sat = 0.55 if i else 0.2
        val = 0.8 if i % 2 else 0.6
        pal.append(_hsv_to_rgb(hue, sat, val))
    return np.array(pal) * 255


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _smooth_noise(rng, h, w, cells):
    coarse = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _shape_mask(kind, rng, h, w, size):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "rectangle":
        ry, rx = size * rng.uniform(0.6, 1.4), size * rng.uniform(0.6, 1.4)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if kind == "disk":
        r = size * rng.uniform(0.8, 1.2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "triangle":
        r = size * rng.uniform(1.0, 1.6)
        ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        py, px = cy + r * np.sin(ang), cx + r * np.cos(ang)
        inside = np.ones((h, w), bool)
        sign = None
        for i in range(3):
            j = (i + 1) % 3
            cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
            s = cross >= 0
            if sign is None:
                sign = (px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0]) >= 0
            inside &= s == sign
        return inside
    if kind == "bar":
        length = size * rng.uniform(3, 5)
        half = rng.uniform(0.8, 1.6)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        along = dx * np.cos(theta) + dy * np.sin(theta)
        across = -dx * np.sin(theta) + dy * np.cos(theta)
        return (np.abs(along) <= length / 2) & (np.abs(across) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def synth_sample(spec: SynthSpec, rng):
    """One (image uint8 (h, w, 3), labels uint8 (h, w)) pair."""
    h, w, K = spec.height, spec.width, spec.classes
    pal = class_palette(K)
    kinds = _class_shapes(spec)
    base = min(h, w)
    tex = _smooth_noise(rng, h, w, 4)[..., None] * 22 + _smooth_noise(rng, h, w, 12)[..., None] * 10
    tint = rng.normal(0, 12, size=3)
    img = pal[0] + tint + tex * np.array([1.0, 0.9, 1.1])
    labels = np.zeros((h, w), np.uint8)
    for c in range(1, K):
        # rank 0 (class 1) is the largest; sizes fall geometrically with the skew
        frac = (c - 1) / max(K - 2, 1)
        size = base * 0.2 * spec.skew ** (-0.5 * frac)
        count = rng.poisson(1.2) + (1 if rng.random() < 0.7 else 0)
        for _ in range(count):
            m = _shape_mask(kinds[c - 1], rng, h, w, size)
            labels[m] = c
            color = pal[c] + rng.normal(0, 18, size=3)
            shade = 1 + 0.15 * _smooth_noise(rng, h, w, 3)[..., None]
            img = np.where(m[..., None], color * shade, img)
    img = img + rng.normal(0, 8, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), labels


def generate_synthetic(spec: SynthSpec, out_dir):
    """Write a deterministic synthetic dataset plus ``manifest.txt`` under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.data_seed)
    records = []
    counts = np.zeros(spec.classes, np.int64)
    train_present = np.zeros(spec.classes, bool)
    for split, n in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for i in range(n):
            img, lab = synth_sample(spec, rng)
            if split == "train" and i == n - 1:
                # guarantee every class is seen in training
                img, lab = _ensure_classes(spec, rng, img, lab, ~train_present)
            sid = f"{split}_{i:05d}"
            ip, lp = f"{split}/{sid}.ppm", f"{split}/{sid}.pgm"
            save_image_ppm(os.path.join(out_dir, ip), img)
            save_label_pgm(os.path.join(out_dir, lp), lab)
            records.append((split, ip, lp))
            if split == "train":
                binc = np.bincount(lab.reshape(-1), minlength=spec.classes)[: spec.classes]
                counts += binc
                train_present |= binc > 0
    manifest = DatasetManifest(os.path.abspath(out_dir), records, spec.classes, spec.ignore_label)
    save_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    shares = counts / max(counts.sum(), 1)
    if spec.skew > 1 and shares[0] <= shares[1:].max():
        log.warning("class pixel shares %s are not long-tailed", np.round(shares, 4).tolist())
    return manifest


def _ensure_classes(spec, rng, img, lab, missing):
    pal = class_palette(spec.classes)
    kinds = _class_shapes(spec)
    for c in np.flatnonzero(missing):
        if c == 0 or (lab == c).any():
            continue
        m = _shape_mask(kinds[c - 1], rng, spec.height, spec.width, min(spec.height, spec.width) * 0.15)
        while not m.any():
            m = _shape_mask(kinds[c - 1], rng, spec.height, spec.width, min(spec.height, spec.width) * 0.15)
        lab = lab.copy()
        lab[m] = c
        img = np.where(m[..., None], np.clip(pal[c], 0, 255).astype(np.uint8), img)
    return img, lab


def class_pixel_shares(manifest, split="train"):
    counts = np.zeros(manifest.num_classes, np.int64)
    for _, lab_path in manifest.split(split):
        lab = load_label_pgm(os.path.join(manifest.root, lab_path))
        lab = lab[lab != manifest.ignore_label]
        counts += np.bincount(lab, minlength=manifest.num_classes)[: manifest.num_classes]
    return counts / max(counts.sum(), 1)
