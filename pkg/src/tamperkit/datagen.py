"""Synthetic weakly-labeled tamper data, augmentation, and perturbations.

Authentic images are procedural: multi-scale value noise plus a few flat
geometric shapes, pushed through a per-image "camera response" (random
per-channel gain and gamma, plus a per-image sensor noise level). The
response is what makes splicing detectable in principle: a patch pasted
from a different image carries a different noise fingerprint.

Tampered variants:
  copy_move  paste a patch of the image elsewhere in the same image
  splice     paste a patch taken from a *different* generated image
  inpaint    erase a region and refill it by repeated boundary averaging

Every tampered image has a {0,255} PNG mask covering exactly the changed
pixels. The manifest is JSON-lines, one record per line; dataset-level
facts (split, seed, size, per-kind counts) live in meta.json next to it.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageFilter

TAMPER_KINDS = ("copy_move", "splice", "inpaint")
MASK_AREA_BOUNDS = (0.05, 0.40)
INPAINT_PASSES = 50
DEFAULT_JPEG_GRID = (100, 90, 80, 70, 60, 50)
DEFAULT_BLUR_GRID = (1, 3, 5, 7, 9)


@dataclass
class SampleRecord:
    id: str
    image_path: str
    label: int
    manipulation_kind: str
    mask_path: str | None

    def __post_init__(self):
        if (self.label == 0) != (self.manipulation_kind == "none") or (self.label == 0) != (self.mask_path is None):
            raise ValueError(f"record {self.id}: label/kind/mask fields disagree")


@dataclass
class DatasetManifest:
    split: str
    seed: int
    image_size: int
    records: list[SampleRecord]
    counts: dict[str, int]
    root: Path

    def __len__(self) -> int:
        return len(self.records)


# ------------------------------------------------------------ image synthesis


def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, coarse scales dominating."""
    out = np.zeros((size, size), dtype=np.float64)
    total = 0.0
    scale = 4
    # natural-image-like 1/f^2 spectrum: quadratic weight falloff and no
    # octave finer than size/4, so the background's second derivative stays
    # far below the sensor noise and the fixed high-pass bank sees only
    # noise plus real edges
    while scale <= size // 4:
        grid = rng.uniform(0.0, 1.0, size=(scale, scale))
        img = Image.fromarray((grid * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
        weight = 1.0 / (scale * scale)
        out += np.asarray(img, dtype=np.float64) / 255.0 * weight
        total += weight
        scale *= 2
    return out / total


def _draw_shapes(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    """Blend a few flat rectangles/ellipses into an (H,W,3) float image."""
    size = base.shape[0]
    img = base.copy()
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.4, 0.9)
        h = int(rng.integers(size // 8, size // 2))
        w = int(rng.integers(size // 8, size // 2))
        y = int(rng.integers(0, size - h + 1))
        x = int(rng.integers(0, size - w + 1))
        region = np.zeros((size, size), dtype=bool)
        if rng.random() < 0.5:
            region[y : y + h, x : x + w] = True
        else:
            yy, xx = np.mgrid[0:size, 0:size]
            cy, cx = y + h / 2, x + w / 2
            region = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        img[region] = (1 - alpha) * img[region] + alpha * color
    return img


def _camera_response(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    """Per-image color pipeline: channel gain + gamma, then sensor noise."""
    gains = rng.uniform(0.7, 1.3, size=3)
    gammas = rng.uniform(0.8, 1.25, size=3)
    noise_sigma = rng.uniform(0.95, 1.6) / 255.0
    out = np.clip(img, 0.0, 1.0) ** gammas[None, None, :] * gains[None, None, :]
    out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _synth_authentic(rng: np.random.Generator, size: int) -> np.ndarray:
    """One authentic uint8 (H,W,3) image."""
    channels = [_value_noise(rng, size) for _ in range(3)]
    base = np.stack(channels, axis=-1)
    mix = rng.uniform(0.3, 0.7)
    luma = base.mean(axis=-1, keepdims=True)
    base = mix * base + (1 - mix) * luma  # partially correlated channels
    img = _draw_shapes(rng, base)
    img = _camera_response(rng, img)
    return np.round(img * 255.0).astype(np.uint8)


def _region_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random rectangle or ellipse with area within MASK_AREA_BOUNDS."""
    lo, hi = MASK_AREA_BOUNDS
    for _ in range(200):
        frac = rng.uniform(lo * 1.2, hi * 0.9)
        aspect = np.exp(rng.uniform(-0.6, 0.6))
        ellipse = rng.random() < 0.5
        area = frac * size * size
        if ellipse:
            area = area * 4.0 / np.pi
        h = int(np.clip(np.sqrt(area * aspect), 4, size - 2))
        w = int(np.clip(np.sqrt(area / aspect), 4, size - 2))
        y = int(rng.integers(0, size - h + 1))
        x = int(rng.integers(0, size - w + 1))
        mask = np.zeros((size, size), dtype=bool)
        if ellipse:
            yy, xx = np.mgrid[0:size, 0:size]
            mask = (((yy - (y + h / 2)) / (h / 2)) ** 2 + ((xx - (x + w / 2)) / (w / 2)) ** 2) <= 1.0
        else:
            mask[y : y + h, x : x + w] = True
        got = mask.mean()
        if lo <= got <= hi:
            return mask
    raise RuntimeError("could not draw a region mask within the area bounds")


def _resample_block(rng: np.random.Generator, block: np.ndarray) -> np.ndarray:
    """Round-trip a patch through a small bilinear rescale plus a mild blur,
    as moved regions in real forgeries do; the interpolation history leaves
    a local sensor-noise deficit."""
    h, w = block.shape[:2]
    factor = rng.uniform(1.2, 1.45)
    up = Image.fromarray(block).resize((max(w + 1, round(w * factor)),
                                        max(h + 1, round(h * factor))), Image.BILINEAR)
    down = up.resize((w, h), Image.BILINEAR)
    return np.asarray(down.filter(ImageFilter.GaussianBlur(rng.uniform(0.4, 0.7))))


def _apply_copy_move(rng: np.random.Generator, img: np.ndarray):
    size = img.shape[0]
    mask = _region_mask(rng, size)
    ys, xs = np.nonzero(mask)
    h_span = ys.max() - ys.min() + 1
    w_span = xs.max() - xs.min() + 1
    dy = dx = 0
    for attempt in range(300):
        dy = int(rng.integers(-(ys.min()), size - (ys.max() + 1) + 1))
        dx = int(rng.integers(-(xs.min()), size - (xs.max() + 1) + 1))
        # prefer a clearly displaced paste; settle for any nonzero shift
        if attempt < 150:
            if abs(dy) >= h_span // 2 or abs(dx) >= w_span // 2:
                break
        elif dy or dx:
            break
    block = _resample_block(rng, img[ys.min():ys.max() + 1, xs.min():xs.max() + 1])
    # moved content rarely matches the destination illumination exactly
    shifted = block.astype(np.float64) * rng.uniform(0.92, 1.08) + rng.uniform(-9.0, 9.0)
    block = np.round(np.clip(shifted, 0, 255)).astype(np.uint8)
    out = img.copy()
    out[ys + dy, xs + dx] = block[ys - ys.min(), xs - xs.min()]
    dest = np.zeros_like(mask)
    dest[ys + dy, xs + dx] = True
    return out, dest


def _apply_splice(rng: np.random.Generator, img: np.ndarray, donor: np.ndarray):
    size = img.shape[0]
    mask = _region_mask(rng, size)
    ys, xs = np.nonzero(mask)
    # sample the donor at a random offset of the same footprint
    h_span = ys.max() - ys.min() + 1
    w_span = xs.max() - xs.min() + 1
    sy = int(rng.integers(0, size - h_span + 1))
    sx = int(rng.integers(0, size - w_span + 1))
    patch = donor[ys - ys.min() + sy, xs - xs.min() + sx].astype(np.float64)
    # the pasted content carries the donor's processing history: a slight
    # color-calibration mismatch plus the donor's own resampled sensor noise
    # on top of the target's. The excess noise is neighbor-correlated (it
    # went through interpolation), unlike the target's white sensor noise.
    patch *= rng.uniform(0.93, 1.07, size=3)
    patch += rng.uniform(-8.0, 8.0, size=3)
    field = rng.normal(0.0, rng.uniform(4.0, 7.0), size=(h_span + 1, w_span + 1, 3))
    corr = (field[:-1, :-1] + field[1:, :-1] + field[:-1, 1:] + field[1:, 1:]) / 4.0
    patch += corr[ys - ys.min(), xs - xs.min()]
    out = img.copy()
    out[ys, xs] = np.round(np.clip(patch, 0, 255)).astype(np.uint8)
    return out, mask


def _apply_inpaint(rng: np.random.Generator, img: np.ndarray):
    size = img.shape[0]
    mask = _region_mask(rng, size)
    work = img.astype(np.float64)
    inside = mask
    boundary_mean = work[~inside].mean(axis=0) if (~inside).any() else work.mean(axis=(0, 1))
    work[inside] = boundary_mean
    padded = np.pad(work, ((1, 1), (1, 1), (0, 0)), mode="edge")
    for _ in range(INPAINT_PASSES):
        neighbor_avg = (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]) / 4.0
        work[inside] = neighbor_avg[inside]
        padded[1:-1, 1:-1] = work
    # synthesized fills get re-noised below the camera noise floor, so the
    # region carries a noise deficit rather than an unrealistic dead zone
    work[inside] += rng.normal(0.0, rng.uniform(0.5, 1.0), size=work[inside].shape)
    out = img.copy()
    out[inside] = np.round(np.clip(work[inside], 0, 255)).astype(np.uint8)
    return out, mask


# ------------------------------------------------------------ dataset assembly


def generate_dataset(out_dir, seed: int, n_per_class: int, size: int,
                     kinds=("copy_move", "splice"), split: str = "train",
                     force: bool = False) -> DatasetManifest:
    """Write images/, masks/, manifest.jsonl, and meta.json under out_dir.

    Produces n_per_class authentic and n_per_class tampered records, the
    tampered ones cycling through ``kinds``. All randomness derives from
    ``seed``; regeneration is bitwise identical.
    """
    kinds = tuple(kinds)
    if not kinds:
        raise ValueError("kinds must be non-empty")
    for k in kinds:
        if k not in TAMPER_KINDS:
            raise ValueError(f"unknown manipulation kind {k!r}; expected one of {TAMPER_KINDS}")
    if size < 32:
        raise ValueError(f"image size must be >= 32, got {size}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")

    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use force to overwrite)")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    n_total = 2 * n_per_class
    ss = np.random.SeedSequence(seed)
    base_seeds, op_seeds = ss.spawn(2)
    base_children = base_seeds.spawn(n_total)
    op_children = op_seeds.spawn(n_per_class)

    # base pool: one authentic image per record; the second half get tampered
    pool = [_synth_authentic(np.random.default_rng(s), size) for s in base_children]

    records: list[SampleRecord] = []
    counts: dict[str, int] = {"none": n_per_class}
    for i in range(n_per_class):
        rid = f"{split}_auth_{i:04d}"
        rel = f"images/{rid}.png"
        Image.fromarray(pool[i]).save(out / rel)
        records.append(SampleRecord(rid, rel, 0, "none", None))

    donors: dict[str, int] = {}  # tampered id -> donor's index in the base pool
    for i in range(n_per_class):
        rng = np.random.default_rng(op_children[i])
        kind = kinds[i % len(kinds)]
        base_idx = n_per_class + i
        base = pool[base_idx]
        rid = f"{split}_tamper_{i:04d}"
        if kind == "copy_move":
            img, mask = _apply_copy_move(rng, base)
        elif kind == "splice":
            donor_idx = int(rng.integers(0, n_total - 1))
            if donor_idx >= base_idx:
                donor_idx += 1  # never splice from yourself
            img, mask = _apply_splice(rng, base, pool[donor_idx])
            donors[rid] = donor_idx
        else:
            img, mask = _apply_inpaint(rng, base)
        if not mask.any():
            raise RuntimeError(f"empty mask generated for {rid}")
        rel = f"images/{rid}.png"
        mrel = f"masks/{rid}.png"
        Image.fromarray(img).save(out / rel)
        Image.fromarray((mask * 255).astype(np.uint8)).save(out / mrel)
        records.append(SampleRecord(rid, rel, 1, kind, mrel))
        counts[kind] = counts.get(kind, 0) + 1

    with open(out / "manifest.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    meta = {
        "split": split,
        "seed": seed,
        "image_size": size,
        "counts": counts,
        "kinds": list(kinds),
        "n_per_class": n_per_class,
        "splice_donors": donors,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return DatasetManifest(split, seed, size, records, counts, out)


def load_manifest(path) -> DatasetManifest:
    """Read manifest.jsonl (+ meta.json) from a dataset directory or the
    manifest file path itself."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"no manifest at {p}")
    root = p.parent
    records = []
    with open(p) as f:
        for line in f:
            if line.strip():
                records.append(SampleRecord(**json.loads(line)))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate record ids in {p}")
    meta_path = root / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        split = meta.get("split", "unknown")
        seed = int(meta.get("seed", -1))
        size = int(meta.get("image_size", 0))
        counts = meta.get("counts", {})
    else:
        split, seed, counts = "unknown", -1, {}
        size = 0
    if size == 0 and records:
        with Image.open(root / records[0].image_path) as im:
            size = im.size[0]
    return DatasetManifest(split, seed, size, records, counts, root)


# ------------------------------------------------------------ augmentation


def augment(images: np.ndarray, rng: np.random.Generator, train: bool, pad: int = 4) -> np.ndarray:
    """Random crop (after reflect padding) + horizontal flip, train mode only.

    ``images`` is channel-first (N,C,H,W); eval mode returns the input
    unchanged. Per image the draws are crop-y, crop-x, flip in that fixed
    order, so the stream of random numbers is reproducible.
    """
    if not train or pad == 0:
        return images
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        if rng.random() < 0.5:
            crop = crop[:, :, ::-1]
        out[i] = crop
    return out


# ------------------------------------------------------------ perturbations


def perturb_jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    """In-memory JPEG encode/decode of one (H,W,3) uint8 image."""
    q = int(quality)
    if not (10 <= q <= 100):
        raise ValueError(f"JPEG quality must be in [10,100], got {quality}")
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="JPEG", quality=q)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"))


def _gaussian_kernel1d(k: int, sigma: float) -> np.ndarray:
    r = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return w / w.sum()


def perturb_blur(image: np.ndarray, kernel_size: int, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; k=1 is the identity,
    bit for bit."""
    k = int(kernel_size)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"blur kernel size must be odd and >= 1, got {kernel_size}")
    if k == 1:
        return image.copy()
    if sigma is None:
        sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    w = _gaussian_kernel1d(k, float(sigma))
    pad = k // 2
    work = image.astype(np.float64)
    work = np.pad(work, ((pad, pad), (0, 0), (0, 0)), mode="reflect")
    work = sum(w[i] * work[i : i + image.shape[0]] for i in range(k))
    work = np.pad(work, ((0, 0), (pad, pad), (0, 0)), mode="reflect")
    work = sum(w[i] * work[:, i : i + image.shape[1]] for i in range(k))
    return np.round(np.clip(work, 0, 255)).astype(np.uint8)


def perturb(image: np.ndarray, kind: str, **params) -> np.ndarray:
    if kind == "jpeg":
        return perturb_jpeg(image, params["quality"])
    if kind == "blur":
        return perturb_blur(image, params["kernel_size"], params.get("sigma"))
    raise ValueError(f"unknown perturbation kind {kind!r}")


# ------------------------------------------------------------ batch loading


@dataclass
class WeakBatch:
    """Training view of the data: images and image-level labels only.

    There is deliberately no mask field and no code path here that opens a
    mask file; weak supervision is enforced by this interface.
    """

    images: np.ndarray  # (B,3,H,W) float32, [0,255] scale
    labels: np.ndarray  # (B,) float32 in {0,1}
    ids: list[str]


@dataclass
class EvalBatch:
    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray  # (B,H,W) float32 {0,1}; all-zero rows for authentic
    kinds: list[str]
    ids: list[str]


def _read_image(manifest: DatasetManifest, record: SampleRecord) -> np.ndarray:
    with Image.open(manifest.root / record.image_path) as im:
        return np.asarray(im.convert("RGB"))


def _read_mask(manifest: DatasetManifest, record: SampleRecord) -> np.ndarray:
    path = manifest.root / record.mask_path
    if not path.exists():
        raise FileNotFoundError(f"mask file missing for record {record.id}: {path}")
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.float32)


def _pick(manifest: DatasetManifest, indices) -> list[SampleRecord]:
    records = []
    for i in indices:
        i = int(i)
        if not (0 <= i < len(manifest.records)):
            raise IndexError(f"record index {i} out of range (dataset has {len(manifest.records)})")
        records.append(manifest.records[i])
    return records


def images_to_chw(images_hwc: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images_hwc.transpose(0, 3, 1, 2).astype(np.float32))


def load_weak_batch(manifest: DatasetManifest, indices) -> WeakBatch:
    records = _pick(manifest, indices)
    images = np.stack([_read_image(manifest, r) for r in records])
    labels = np.asarray([r.label for r in records], dtype=np.float32)
    return WeakBatch(images=images_to_chw(images), labels=labels, ids=[r.id for r in records])


def load_eval_batch(manifest: DatasetManifest, indices) -> EvalBatch:
    records = _pick(manifest, indices)
    images = np.stack([_read_image(manifest, r) for r in records])
    labels = np.asarray([r.label for r in records], dtype=np.float32)
    size = images.shape[1:3]
    masks = np.zeros((len(records),) + size, dtype=np.float32)
    for j, r in enumerate(records):
        if r.label == 1:
            masks[j] = _read_mask(manifest, r)
    return EvalBatch(images=images_to_chw(images), labels=labels, masks=masks,
                     kinds=[r.manipulation_kind for r in records], ids=[r.id for r in records])


def load_batch(manifest: DatasetManifest, indices, weak_mode: bool):
    """Single entry point per the interface contract; training code must go
    through load_weak_batch (enforced by the firewall test)."""
    return load_weak_batch(manifest, indices) if weak_mode else load_eval_batch(manifest, indices)
