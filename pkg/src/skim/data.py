"""Data pipeline: on-disk formats, letterboxing, augmentation, synthetic
fabric-defect generation, and the split / few-shot protocols.

Images travel as float arrays in [0, 1] with shape [h, w, 3]; masks are
uint8 {0, 1} of the same spatial shape.  On disk, images are binary P6
pixmaps and masks binary P5 graymaps holding only bytes 0 and 255.  All
manifest paths are relative to the manifest file's directory.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .tensor import Rng

# ---------------------------------------------------------------------------
# portable pixmap / graymap IO

def _write_pnm(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_p6(path, rgb: np.ndarray) -> None:
    """rgb: uint8 [h, w, 3]."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"P6 wants [h, w, 3], got {rgb.shape}")
    _write_pnm(path, b"P6", rgb)


def write_p5(path, gray: np.ndarray) -> None:
    """gray: uint8 [h, w]."""
    if gray.ndim != 2:
        raise InputError(f"P5 wants [h, w], got {gray.shape}")
    _write_pnm(path, b"P5", gray)


def _read_pnm(path, magic: str):
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1

    def token(what):
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, start, f"missing {what}")
        return data[start:pos], start

    got, off = token("magic")
    if got != magic.encode():
        raise ParseError(path, off, f"expected magic {magic}, got {got[:8]!r}")
    dims = []
    for what in ("width", "height", "maxval"):
        tok, off = token(what)
        if not tok.isdigit():
            raise ParseError(path, off, f"{what} is not a number: {tok[:8]!r}")
        dims.append((int(tok), off))
    (w, _), (h, _), (maxval, moff) = dims
    if maxval != 255:
        raise ParseError(path, moff, f"maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise ParseError(path, dims[0][1], f"bad dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == "P6" else 1
    need = w * h * channels
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise ParseError(path, pos + len(raster),
                         f"truncated raster: need {need} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return (arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)), pos


def read_p6(path) -> np.ndarray:
    arr, _ = _read_pnm(path, "P6")
    return arr


def read_p5(path, binary: bool = True) -> np.ndarray:
    arr, raster_off = _read_pnm(path, "P5")
    if binary:
        bad = (arr != 0) & (arr != 255)
        if bad.any():
            idx = int(np.argmax(bad.reshape(-1)))
            raise ParseError(path, raster_off + idx,
                             f"mask byte must be 0 or 255, got {int(arr.reshape(-1)[idx])}")
    return arr


# ---------------------------------------------------------------------------
# samples

@dataclass
class Sample:
    image: np.ndarray          # float [h, w, 3] in [0, 1]
    mask: np.ndarray           # uint8 [h, w] in {0, 1}
    domain_id: str = ""
    defect_kinds: tuple = ()

    def validate(self) -> "Sample":
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise InputError(f"image must be [h, w, 3], got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise InputError("mask shape must match image spatial shape")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise InputError("mask values must be 0/1")
        return self


def write_sample(sample: Sample, image_path, mask_path) -> None:
    rgb = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    write_p6(image_path, rgb)
    write_p5(mask_path, (sample.mask * 255).astype(np.uint8))


def read_sample(image_path, mask_path, domain_id="", kinds=()) -> Sample:
    rgb = read_p6(image_path)
    mask = (read_p5(mask_path) > 0).astype(np.uint8)
    if mask.shape != rgb.shape[:2]:
        raise InputError(f"{mask_path}: mask {mask.shape} does not match "
                         f"image {rgb.shape[:2]}")
    return Sample(rgb.astype(np.float32) / 255.0, mask, domain_id, tuple(kinds))


# ---------------------------------------------------------------------------
# resampling helpers (plain numpy; the tape has its own integer-factor resize)

def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.clip(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), 0, h - 1)
    cols = np.clip(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), 0, w - 1)
    return arr[rows][:, cols]


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners-false sampling: src = (dst + 0.5) * in/out - 0.5, edge-clamped."""
    h, w = arr.shape[:2]
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
    wx = (sx - x0).astype(wy.dtype)
    if arr.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
    bot = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# letterbox

@dataclass
class LetterboxGeometry:
    scale: float
    pad_top: int
    pad_left: int
    pad_bottom: int
    pad_right: int
    original_h: int
    original_w: int


def letterbox(sample: Sample, target: int):
    """Aspect-preserving fit into target x target; never magnifies.

    scale = min(1, target/h, target/w); the scaled content is centered and
    padded with 0.5 gray (image) / 0 (mask).  Image resampling is bilinear,
    mask nearest so it stays binary.
    """
    if target < 1:
        raise InputError("target must be >= 1")
    h, w = sample.image.shape[:2]
    if h < 1 or w < 1:
        raise InputError("empty image")
    scale = min(1.0, target / h, target / w)
    if scale >= 1.0:
        nh, nw = h, w
        img, msk = sample.image, sample.mask
    else:
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        img = resize_bilinear(sample.image, nh, nw)
        msk = resize_nearest(sample.mask, nh, nw)
    top = (target - nh) // 2
    left = (target - nw) // 2
    canvas = np.full((target, target, 3), 0.5, dtype=np.float32)
    canvas[top:top + nh, left:left + nw] = img
    mcanvas = np.zeros((target, target), dtype=np.uint8)
    mcanvas[top:top + nh, left:left + nw] = msk
    geom = LetterboxGeometry(scale, top, left, target - nh - top,
                             target - nw - left, h, w)
    out = Sample(canvas, mcanvas, sample.domain_id, sample.defect_kinds)
    return out, geom


def invert_letterbox(pred: np.ndarray, geom: LetterboxGeometry) -> np.ndarray:
    """Crop the padding and resize back to the original frame (nearest)."""
    t_h, t_w = pred.shape[:2]
    nh = t_h - geom.pad_top - geom.pad_bottom
    nw = t_w - geom.pad_left - geom.pad_right
    if nh < 1 or nw < 1:
        raise InputError("geometry does not match prediction shape")
    content = pred[geom.pad_top:geom.pad_top + nh, geom.pad_left:geom.pad_left + nw]
    if geom.scale >= 1.0:
        if content.shape[:2] != (geom.original_h, geom.original_w):
            raise InputError("geometry does not match prediction shape")
        return content.copy()
    return resize_nearest(content, geom.original_h, geom.original_w)


# ---------------------------------------------------------------------------
# augmentation

def augment(sample: Sample, rng: Rng) -> Sample:
    """hflip, vflip, rot90, brightness, contrast -- each applied with p=0.5.

    Exactly seven uniforms are drawn per call (five gates plus the two
    photometric amounts), so the stream position never depends on outcomes.
    Geometric ops hit image and mask alike; photometric ops (brightness
    shift U(-0.2, 0.2), contrast gain U(0.8, 1.2) about mid-gray) apply to
    the image only, clamped back to [0, 1].
    """
    u = rng.uniform(7)
    img = sample.image
    msk = sample.mask
    if u[0] < 0.5:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if u[1] < 0.5:
        img, msk = img[::-1], msk[::-1]
    if u[2] < 0.5:
        img, msk = np.rot90(img, axes=(0, 1)), np.rot90(msk, axes=(0, 1))
    if u[3] < 0.5:
        img = np.clip(img + (-0.2 + 0.4 * u[4]), 0.0, 1.0)
    if u[5] < 0.5:
        gain = 0.8 + 0.4 * u[6]
        img = np.clip((img - 0.5) * gain + 0.5, 0.0, 1.0)
    return Sample(np.ascontiguousarray(img, dtype=np.float32),
                  np.ascontiguousarray(msk), sample.domain_id, sample.defect_kinds)


# ---------------------------------------------------------------------------
# manifest

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    image: str
    mask: str
    domain: str
    kinds: tuple
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    spec: dict
    seed: int
    samples: list = field(default_factory=list)
    base_dir: str = "."

    def split_entries(self, split: str):
        if split not in SPLITS:
            raise InputError(f"unknown split {split!r}")
        return [e for e in self.samples if e.split == split]

    def load(self, entry: ManifestEntry) -> Sample:
        return read_sample(os.path.join(self.base_dir, entry.image),
                           os.path.join(self.base_dir, entry.mask),
                           entry.domain, entry.kinds)


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "spec": manifest.spec,
        "seed": manifest.seed,
        "samples": [{"image": e.image, "mask": e.mask, "domain": e.domain,
                     "kinds": list(e.kinds), "split": e.split}
                    for e in manifest.samples],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    base = os.path.dirname(os.path.abspath(path))
    samples = [ManifestEntry(e["image"], e["mask"], e["domain"],
                             tuple(e["kinds"]), e.get("split"))
               for e in doc["samples"]]
    for e in samples:
        for rel in (e.image, e.mask):
            if not os.path.exists(os.path.join(base, rel)):
                raise InputError(f"manifest references missing file: {rel}")
    return DatasetManifest(doc.get("spec", {}), doc.get("seed", 0), samples, base)


def split_dataset(manifest: DatasetManifest, fractions=(0.6, 0.2, 0.2),
                  seed: int = 0) -> DatasetManifest:
    """Deterministic shuffled partition; floor counts, remainder to train."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError("split fractions must sum to 1")
    n = len(manifest.samples)
    if n == 0:
        raise InputError("cannot split an empty manifest")
    n_val = int(math.floor(n * fractions[1]))
    n_test = int(math.floor(n * fractions[2]))
    n_train = n - n_val - n_test
    perm = Rng(seed).shuffle(n)
    for rank, idx in enumerate(perm):
        if rank < n_train:
            manifest.samples[idx].split = "train"
        elif rank < n_train + n_val:
            manifest.samples[idx].split = "val"
        else:
            manifest.samples[idx].split = "test"
    return manifest


def few_shot_sample(manifest: DatasetManifest, k: int, seed: int) -> DatasetManifest:
    """Keep k uniformly chosen train samples; val/test pass through untouched."""
    train = manifest.split_entries("train")
    if k > len(train):
        raise InputError(f"k={k} exceeds train split size {len(train)}")
    if k < 1:
        raise InputError("k must be >= 1")
    perm = Rng(seed).shuffle(len(train))
    keep = {id(train[i]) for i in perm[:k]}
    samples = [e for e in manifest.samples
               if e.split != "train" or id(e) in keep]
    return DatasetManifest(manifest.spec, manifest.seed, samples, manifest.base_dir)


# ---------------------------------------------------------------------------
# synthetic fabric domains

DEFECT_KINDS = ("stain", "broken_yarn", "hole", "fluff")


@dataclass
class DomainSpec:
    domain_id: str
    image_size: int = 128
    weave_period: float = 12.0
    yarn_contrast: float = 0.25
    orientation: float = 0.0
    defect_mix: dict = field(default_factory=lambda: {"stain": 1.0})
    brightness: float = 0.0
    contrast_gain: float = 1.0
    noise_std: float = 0.03
    seed: int = 0

    def validate(self) -> "DomainSpec":
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if not 4.0 <= self.weave_period <= 64.0:
            raise ConfigError("weave_period must be in [4, 64]")
        if not 0.05 <= self.yarn_contrast <= 0.5:
            raise ConfigError("yarn_contrast must be in [0.05, 0.5]")
        if not -0.3 <= self.brightness <= 0.3:
            raise ConfigError("brightness must be in [-0.3, 0.3]")
        if not 0.5 <= self.contrast_gain <= 1.5:
            raise ConfigError("contrast_gain must be in [0.5, 1.5]")
        if not 0.0 <= self.noise_std <= 0.2:
            raise ConfigError("noise_std must be in [0, 0.2]")
        if not self.defect_mix:
            raise ConfigError("defect_mix is empty")
        for kind, prob in self.defect_mix.items():
            if kind not in DEFECT_KINDS:
                raise ConfigError(f"unknown defect kind {kind!r}")
            if prob < 0:
                raise ConfigError("defect probabilities must be >= 0")
        if abs(sum(self.defect_mix.values()) - 1.0) > 1e-9:
            raise ConfigError("defect_mix probabilities must sum to 1")
        return self


def builtin_domain(name: str, seed: int = 0, image_size: int = 128) -> DomainSpec:
    """The three stock domains: D1 stains, D2 yarn lines, D3 mixed + shifted imaging."""
    table = {
        "D1": dict(weave_period=12.0, yarn_contrast=0.25, orientation=0.0,
                   defect_mix={"stain": 1.0},
                   brightness=0.0, contrast_gain=1.0, noise_std=0.03),
        "D2": dict(weave_period=7.0, yarn_contrast=0.38, orientation=0.0,
                   defect_mix={"broken_yarn": 1.0},
                   brightness=-0.08, contrast_gain=0.9, noise_std=0.02),
        "D3": dict(weave_period=18.0, yarn_contrast=0.15, orientation=0.3,
                   defect_mix={"stain": 0.3, "broken_yarn": 0.3,
                               "hole": 0.2, "fluff": 0.2},
                   brightness=0.12, contrast_gain=1.2, noise_std=0.05),
    }
    key = name.upper()
    if key not in table:
        raise ConfigError(f"unknown builtin domain {name!r}; choose D1/D2/D3")
    return DomainSpec(domain_id=key, image_size=image_size, seed=seed,
                      **table[key]).validate()


DOMAIN_DEFAULT_SIZES = {"D1": 40, "D2": 20, "D3": 150}

# extras gate: no further defects once the mask covers this fraction, which
# caps the total under the documented 20% band (a single defect stays < 10%)
_ADD_CAP = 0.08


def _pick_kind(spec: DomainSpec, u: float) -> str:
    acc = 0.0
    for kind in DEFECT_KINDS:
        acc += spec.defect_mix.get(kind, 0.0)
        if u < acc:
            return kind
    return next(k for k in reversed(DEFECT_KINDS) if spec.defect_mix.get(k, 0))


def _render_stain(img, mask, rng: Rng, size: int) -> None:
    u = rng.uniform(12)
    cy = size * (0.2 + 0.6 * u[0])
    cx = size * (0.2 + 0.6 * u[1])
    radius = size * (0.05 + 0.08 * u[2])
    amps = 0.35 * (2 * u[3:6] - 1) / np.arange(1, 4)
    phases = 2 * math.pi * u[6:9]
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    wobble = sum(a * np.cos((k + 1) * theta + p)
                 for k, (a, p) in enumerate(zip(amps, phases)))
    rim = radius * np.clip(1.0 + wobble, 0.55, 1.45)
    inside = dy * dy + dx * dx <= rim * rim
    delta = 0.12 + 0.15 * u[9]
    if u[10] < 0.7:
        delta = -delta
    img[inside] = np.clip(img[inside] + delta, 0.0, 1.0)
    mask[inside] = 1


def _render_broken_yarn(img, mask, rng: Rng, size: int) -> None:
    u = rng.uniform(8)
    thickness = max(2, int(round(size / 128 * (2 + 2.5 * u[1]))))
    pos = int(size * (0.08 + 0.84 * u[2]))
    amp = 1.5 * u[3] * size / 128
    wavelength = size * (0.3 + 0.5 * u[4])
    phase = 2 * math.pi * u[5]
    delta = (0.2 + 0.2 * u[6]) * (1 if u[7] < 0.4 else -1)
    t = np.arange(size)
    offset = amp * np.sin(2 * math.pi * t / wavelength + phase)
    centers = np.clip(np.rint(pos + offset).astype(np.int64), 0, size - 1)
    lanes = centers[None, :] + np.arange(thickness)[:, None] - thickness // 2
    lanes = np.clip(lanes, 0, size - 1)
    line = np.zeros((size, size), dtype=bool)
    if u[0] < 0.5:   # horizontal span: a lane per column
        line[lanes, t[None, :]] = True
    else:
        line[t[None, :], lanes] = True
    img[line] = np.clip(img[line] + delta, 0.0, 1.0)
    mask[line] = 1


def _render_hole(img, mask, rng: Rng, size: int) -> None:
    u = rng.uniform(6)
    cy = size * (0.15 + 0.7 * u[0])
    cx = size * (0.15 + 0.7 * u[1])
    a = size * (0.03 + 0.045 * u[2])
    b = size * (0.03 + 0.045 * u[3])
    phi = math.pi * u[4]
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    ry = dx * math.sin(phi) + dy * math.cos(phi)
    rx = dx * math.cos(phi) - dy * math.sin(phi)
    inside = (rx / a) ** 2 + (ry / b) ** 2 <= 1.0
    img[inside] = img[inside] * (0.15 + 0.1 * u[5])
    mask[inside] = 1


def _render_fluff(img, mask, rng: Rng, size: int) -> None:
    u = rng.uniform(4)
    cy = size * (0.15 + 0.7 * u[0])
    cx = size * (0.15 + 0.7 * u[1])
    spread = size * (0.06 + 0.06 * u[2])
    count = 15 + int(25 * u[3])
    offs = rng.gaussian(2 * count, 0.0, spread * 0.6).reshape(2, count)
    radii = 1.0 + rng.uniform(count)
    bright = 0.25 + 0.15 * rng.uniform(count)
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(count):
        sy = min(max(cy + offs[0, i], 2), size - 3)
        sx = min(max(cx + offs[1, i], 2), size - 3)
        spot = (yy - sy) ** 2 + (xx - sx) ** 2 <= radii[i] ** 2
        img[spot] = np.clip(img[spot] + bright[i], 0.0, 1.0)
        mask[spot] = 1


_RENDERERS = {"stain": _render_stain, "broken_yarn": _render_broken_yarn,
              "hole": _render_hole, "fluff": _render_fluff}


def generate_sample(spec: DomainSpec, index: int) -> Sample:
    """Deterministic sample index under spec: stream seed is spec.seed + index."""
    spec.validate()
    size = spec.image_size
    rng = Rng(spec.seed + index)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cs, sn = math.cos(spec.orientation), math.sin(spec.orientation)
    uu = cs * xx + sn * yy
    vv = -sn * xx + cs * yy
    ph = 2 * math.pi * rng.uniform(2)
    weave = (np.sin(2 * math.pi * uu / spec.weave_period + ph[0])
             + np.sin(2 * math.pi * vv / spec.weave_period + ph[1]))
    img = 0.5 + 0.25 * spec.yarn_contrast * weave
    img = img * (1.0 + spec.noise_std * rng.gaussian(size * size).reshape(size, size))

    mask = np.zeros((size, size), dtype=np.uint8)
    kinds = []
    extra_u = rng.uniform(1)[0]
    extras = 0 if extra_u < 0.45 else (1 if extra_u < 0.8 else 2)
    for i in range(1 + extras):
        if i > 0 and mask.mean() >= _ADD_CAP:
            break
        kind = _pick_kind(spec, rng.uniform(1)[0])
        _RENDERERS[kind](img, mask, rng, size)
        kinds.append(kind)

    img = (img - 0.5) * spec.contrast_gain + 0.5 + spec.brightness
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    rgb = np.repeat(img[:, :, None], 3, axis=2)

    frac = mask.mean()
    if not 0.001 <= frac <= 0.2:
        raise ConfigError(f"defect fraction {frac:.4f} outside [0.001, 0.2] "
                          f"for {spec.domain_id} sample {index}")
    return Sample(rgb, mask, spec.domain_id, tuple(sorted(set(kinds)))).validate()


def synth_generate(spec: DomainSpec, n: int, out_dir) -> DatasetManifest:
    """Write n generated samples (P6 + P5) and return the unsplit manifest."""
    if n < 1:
        raise InputError("n must be >= 1")
    spec.validate()
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for i in range(n):
        sample = generate_sample(spec, i)
        stem = f"{spec.domain_id}_{i:04d}"
        img_rel = os.path.join("images", stem + ".ppm")
        msk_rel = os.path.join("masks", stem + ".pgm")
        write_sample(sample, os.path.join(out_dir, img_rel),
                     os.path.join(out_dir, msk_rel))
        entries.append(ManifestEntry(img_rel, msk_rel, spec.domain_id,
                                     sample.defect_kinds, None))
    return DatasetManifest(asdict(spec), spec.seed, entries, str(out_dir))


def gray_histogram(samples, bins: int = 32) -> np.ndarray:
    """Normalized intensity histogram pooled over samples (gray channel mean)."""
    counts = np.zeros(bins, dtype=np.float64)
    for s in samples:
        gray = s.image.mean(axis=2)
        h, _ = np.histogram(gray, bins=bins, range=(0.0, 1.0))
        counts += h
    return counts / counts.sum()
