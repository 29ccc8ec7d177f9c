"""Data generation oracles: bitwise reproducibility, mask/image contracts
for each manipulation, perturbation algebra, and the weak-batch firewall."""
import dataclasses
import json

import numpy as np
import pytest
from PIL import Image

from tamperkit.datagen import (
    DEFAULT_BLUR_GRID,
    DEFAULT_JPEG_GRID,
    EvalBatch,
    WeakBatch,
    _apply_copy_move,
    _apply_inpaint,
    _apply_splice,
    _synth_authentic,
    augment,
    generate_dataset,
    load_batch,
    load_eval_batch,
    load_manifest,
    load_weak_batch,
    perturb,
    perturb_blur,
    perturb_jpeg,
)


def hash_tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


# --------------------------------------------------------------- generation


def test_regeneration_is_bitwise_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(a, seed=3, n_per_class=4, size=64)
    generate_dataset(b, seed=3, n_per_class=4, size=64)
    assert hash_tree(a) == hash_tree(b)


def test_different_seed_differs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(a, seed=3, n_per_class=2, size=64)
    generate_dataset(b, seed=4, n_per_class=2, size=64)
    ha, hb = hash_tree(a), hash_tree(b)
    assert any(ha[k] != hb[k] for k in ha if k.endswith(".png"))


def test_refuses_nonempty_dir_without_force(tmp_path):
    d = tmp_path / "ds"
    generate_dataset(d, seed=1, n_per_class=1, size=32)
    with pytest.raises(FileExistsError):
        generate_dataset(d, seed=1, n_per_class=1, size=32)
    generate_dataset(d, seed=1, n_per_class=1, size=32, force=True)


def test_parameter_validation(tmp_path):
    with pytest.raises(ValueError, match="kind"):
        generate_dataset(tmp_path / "x", seed=0, n_per_class=1, size=32, kinds=("warp",))
    with pytest.raises(ValueError, match="size"):
        generate_dataset(tmp_path / "y", seed=0, n_per_class=1, size=16)
    with pytest.raises(ValueError):
        generate_dataset(tmp_path / "z", seed=0, n_per_class=0, size=32)


def test_manifest_contents(tiny_dataset, tiny_manifest):
    m = tiny_manifest
    assert len(m.records) == 24
    labels = [r.label for r in m.records]
    assert sum(labels) == 12
    kinds = {r.manipulation_kind for r in m.records if r.label == 1}
    assert kinds == {"copy_move", "splice"}
    for r in m.records:
        assert (tiny_dataset / r.image_path).exists()
        if r.label:
            assert r.mask_path and (tiny_dataset / r.mask_path).exists()
        else:
            assert r.mask_path is None
    assert m.counts == {"none": 12, "copy_move": 6, "splice": 6}


def test_mask_area_within_bounds(tiny_dataset, tiny_manifest):
    for r in tiny_manifest.records:
        if not r.label:
            continue
        with Image.open(tiny_dataset / r.mask_path) as im:
            mask = (np.asarray(im.convert("L")) >= 128).astype(np.float64)
        assert 0.05 <= mask.mean() <= 0.40, r.id


def test_splice_donors_recorded(tiny_dataset):
    meta = json.loads((tiny_dataset / "meta.json").read_text())
    donors = meta["splice_donors"]
    assert len(donors) == 6
    for rid, donor_idx in donors.items():
        i = int(rid.split("_")[-1])
        assert donor_idx != 12 + i  # never the spliced image itself


# ----------------------------------------------------------------- appliers


@pytest.fixture(scope="module")
def base_image():
    return _synth_authentic(np.random.default_rng(42), 64)


def test_copy_move_contract(base_image):
    rng = np.random.default_rng(0)
    out, mask = _apply_copy_move(rng, base_image)
    assert out.dtype == np.uint8 and mask.dtype == bool
    np.testing.assert_array_equal(out[~mask], base_image[~mask])  # untouched outside
    changed = (out[mask] != base_image[mask]).any(axis=-1).mean()
    assert changed > 0.5  # most destination pixels actually moved


def test_splice_contract(base_image):
    rng = np.random.default_rng(1)
    donor = _synth_authentic(np.random.default_rng(43), 64)
    out, mask = _apply_splice(rng, base_image, donor)
    np.testing.assert_array_equal(out[~mask], base_image[~mask])
    changed = (out[mask] != base_image[mask]).any(axis=-1).mean()
    assert changed > 0.5


def test_inpaint_contract(base_image):
    rng = np.random.default_rng(2)
    out, mask = _apply_inpaint(rng, base_image)
    np.testing.assert_array_equal(out[~mask], base_image[~mask])
    changed = (out[mask] != base_image[mask]).any(axis=-1).mean()
    assert changed > 0.5
    # smoothing: inpainted interior varies less than the original did
    assert out[mask].astype(np.float64).var() < base_image[mask].astype(np.float64).var()


# ------------------------------------------------------------ perturbations


def test_blur_k1_is_bitwise_identity(base_image):
    out = perturb_blur(base_image, 1)
    np.testing.assert_array_equal(out, base_image)
    assert out is not base_image  # a copy, not an alias


def test_blur_reduces_variance_monotonically(base_image):
    variances = [base_image.astype(np.float64).var()]
    for k in (3, 5, 7, 9):
        variances.append(perturb_blur(base_image, k).astype(np.float64).var())
    diffs = np.diff(variances)
    assert np.all(diffs < 0)


def test_blur_validation(base_image):
    for bad in (0, 2, 4, -1):
        with pytest.raises(ValueError):
            perturb_blur(base_image, bad)
    with pytest.raises(ValueError):
        perturb_blur(base_image, 3, sigma=0.0)


def test_blur_preserves_shape_and_dtype(base_image):
    out = perturb_blur(base_image, 5)
    assert out.shape == base_image.shape and out.dtype == np.uint8


def test_jpeg_round_trip(base_image):
    out = perturb_jpeg(base_image, 90)
    assert out.shape == base_image.shape and out.dtype == np.uint8
    assert not np.array_equal(out, base_image)  # lossy even at q=90
    worse = perturb_jpeg(base_image, 10)
    err90 = np.abs(out.astype(int) - base_image.astype(int)).mean()
    err10 = np.abs(worse.astype(int) - base_image.astype(int)).mean()
    assert err10 > err90


def test_jpeg_quality_validation(base_image):
    for bad in (0, 5, 101, -3):
        with pytest.raises(ValueError):
            perturb_jpeg(base_image, bad)


def test_perturb_dispatch(base_image):
    np.testing.assert_array_equal(perturb(base_image, "blur", kernel_size=1), base_image)
    assert perturb(base_image, "jpeg", quality=80).shape == base_image.shape
    with pytest.raises(ValueError, match="unknown"):
        perturb(base_image, "rotate", angle=5)


def test_default_grids():
    assert DEFAULT_JPEG_GRID == (100, 90, 80, 70, 60, 50)
    assert DEFAULT_BLUR_GRID == (1, 3, 5, 7, 9)


# ------------------------------------------------------------- augmentation


def test_augment_eval_mode_is_identity(rng):
    imgs = rng.uniform(0, 255, (2, 3, 32, 32)).astype(np.float32)
    out = augment(imgs, rng, train=False)
    assert out is imgs


def test_augment_train_mode_shape_and_determinism():
    imgs = np.random.default_rng(0).uniform(0, 255, (3, 3, 32, 32)).astype(np.float32)
    a = augment(imgs, np.random.default_rng(7), train=True)
    b = augment(imgs, np.random.default_rng(7), train=True)
    assert a.shape == imgs.shape
    np.testing.assert_array_equal(a, b)
    c = augment(imgs, np.random.default_rng(8), train=True)
    assert not np.array_equal(a, c)


def test_augment_content_is_a_padded_crop():
    # center crop of the reflect-padded image must reproduce the original
    imgs = np.random.default_rng(1).uniform(0, 255, (1, 3, 16, 16)).astype(np.float32)
    out = augment(imgs, np.random.default_rng(0), train=True, pad=4)
    padded = np.pad(imgs, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
    candidates = []
    for oy in range(9):
        for ox in range(9):
            crop = padded[0, :, oy : oy + 16, ox : ox + 16]
            candidates.append(crop)
            candidates.append(crop[:, :, ::-1])
    assert any(np.array_equal(out[0], c) for c in candidates)


# ------------------------------------------------------------ batch loading


def test_weak_batch_exposes_no_masks(tiny_manifest):
    batch = load_weak_batch(tiny_manifest, [0, 1, 12, 13])
    assert isinstance(batch, WeakBatch)
    assert {f.name for f in dataclasses.fields(WeakBatch)} == {"images", "labels", "ids"}
    assert batch.images.shape == (4, 3, 64, 64)
    assert batch.images.dtype == np.float32
    assert batch.images.max() > 1.0  # [0,255] scale, not unit scale
    np.testing.assert_array_equal(batch.labels, [0.0, 0.0, 1.0, 1.0])


def test_eval_batch_masks(tiny_manifest):
    batch = load_eval_batch(tiny_manifest, [0, 12])
    assert isinstance(batch, EvalBatch)
    assert batch.masks.shape == (2, 64, 64)
    assert set(np.unique(batch.masks)) <= {0.0, 1.0}
    np.testing.assert_array_equal(batch.masks[0], 0.0)  # authentic: all zero
    assert batch.masks[1].sum() > 0
    assert batch.kinds[0] == "none" and batch.kinds[1] in ("copy_move", "splice")


def test_load_batch_dispatch(tiny_manifest):
    assert isinstance(load_batch(tiny_manifest, [0], weak_mode=True), WeakBatch)
    assert isinstance(load_batch(tiny_manifest, [0], weak_mode=False), EvalBatch)


def test_index_out_of_range(tiny_manifest):
    with pytest.raises(IndexError, match="out of range"):
        load_weak_batch(tiny_manifest, [999])


def test_load_manifest_round_trip(tiny_dataset, tiny_manifest):
    again = load_manifest(tiny_dataset)  # directory form
    assert again.split == tiny_manifest.split == "train"
    assert again.seed == 7
    assert again.image_size == 64
    assert [r.id for r in again.records] == [r.id for r in tiny_manifest.records]


def test_load_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope")
