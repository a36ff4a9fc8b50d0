"""Backbone loading, stub inference, and dataset extraction."""

from __future__ import annotations

import json

import numpy as np
import pytest

from dfl.backbones import (
    BackboneHandle,
    _apply_pooling,
    grid_features,
    load_backbone,
    write_stub_backbone,
)
from dfl.errors import BackboneError, ExtractionError
from dfl.extractor import extract, extract_dataset, normalize_embedding, preprocess_view
from dfl.manifest import ViewSpec, load_manifest
from dfl.store import read_store
from tests._synth import (
    blob_features,
    build_image_dataset,
    default_view,
    render_feature_image,
    unit_centers,
    write_png,
)

GRID = 4
SIZE = 64
N_FEATURES = 3 * GRID * GRID


@pytest.fixture
def stub_sidecar(tmp_path):
    return write_stub_backbone(
        tmp_path / "bb", "stub_a", embedding_dim=24, input_size=SIZE, grid=GRID, seed=1
    )


@pytest.fixture
def small_manifest(tmp_path):
    rng = np.random.default_rng(0)
    centers = unit_centers(50, 3, 30)
    labels, feats = blob_features(rng, 7, centers, spread=0.3, noise=0.05)
    view = default_view(size=SIZE)
    return build_image_dataset(
        tmp_path / "data",
        classes=["a", "b", "c"],
        views=[view],
        labels=labels,
        features={view.name: feats},
        grid=GRID,
    )


# --- sidecar / handle -----------------------------------------------------------


def test_load_stub_backbone(stub_sidecar):
    handle = load_backbone(stub_sidecar)
    assert handle.id == "stub_a"
    assert handle.embedding_dim == 24
    assert handle.input_size == SIZE
    assert handle.format == "stub-linear"
    # probe excluded from extraction counters
    assert handle.inference_batches == 0 and handle.inference_images == 0


def test_load_backbone_missing_files(tmp_path, stub_sidecar):
    with pytest.raises(BackboneError, match="not found"):
        load_backbone(tmp_path / "nope.json")
    meta = json.loads(stub_sidecar.read_text())
    meta["model"] = "missing.npz"
    bad = stub_sidecar.parent / "dangling.json"
    bad.write_text(json.dumps(meta))
    with pytest.raises(BackboneError, match="model file not found"):
        load_backbone(bad)


def test_load_backbone_dim_mismatch(stub_sidecar):
    meta = json.loads(stub_sidecar.read_text())
    meta["embedding_dim"] = 1000
    lying = stub_sidecar.parent / "lying.json"
    lying.write_text(json.dumps(meta))
    with pytest.raises(BackboneError, match="1000"):
        load_backbone(lying)


def test_load_backbone_rejects_malformed_sidecar(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{}")
    with pytest.raises(BackboneError, match="missing key"):
        load_backbone(p)
    p.write_text("not json")
    with pytest.raises(BackboneError, match="parse"):
        load_backbone(p)


def test_grid_features_recovers_block_means():
    rng = np.random.default_rng(1)
    feats = rng.uniform(0.1, 0.9, size=N_FEATURES)
    img = render_feature_image(feats, GRID, SIZE)
    out = grid_features(img[None].astype(np.float32), GRID)
    assert out.shape == (1, N_FEATURES)
    assert np.allclose(out[0], feats, atol=1e-6)


def test_apply_pooling_global_average():
    fmap = np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4)
    pooled = _apply_pooling(fmap, "global_average")
    assert pooled.shape == (2, 3)
    assert np.allclose(pooled, fmap.mean(axis=(2, 3)))
    with pytest.raises(BackboneError, match="pooling"):
        _apply_pooling(fmap, "none")


# --- extract ---------------------------------------------------------------------


def test_extract_deterministic_and_ordered(stub_sidecar):
    handle = load_backbone(stub_sidecar)
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(SIZE, SIZE, 3)).astype(np.float32)
    out = extract(handle, [img, img])
    assert len(out) == 2
    assert np.array_equal(out[0], out[1])
    assert handle.inference_batches == 1 and handle.inference_images == 2


def test_extract_empty_batch(stub_sidecar):
    handle = load_backbone(stub_sidecar)
    assert extract(handle, []) == []


def test_extract_shape_mismatch(stub_sidecar):
    handle = load_backbone(stub_sidecar)
    with pytest.raises(ExtractionError, match="shape"):
        extract(handle, [np.zeros((SIZE, SIZE + 1, 3), dtype=np.float32)])


def test_normalize_embedding():
    assert np.allclose(normalize_embedding(np.array([3.0, 4.0])), [0.6, 0.8])
    unit = np.array([0.0, 1.0])
    assert np.allclose(normalize_embedding(unit), unit)
    with pytest.raises(ExtractionError, match="zero"):
        normalize_embedding(np.zeros(4))


# --- extract_dataset --------------------------------------------------------------


def test_extract_dataset_basic(tmp_path, stub_sidecar, small_manifest):
    manifest = load_manifest(small_manifest)
    handle = load_backbone(stub_sidecar)
    out = tmp_path / "out.dflb"
    summary = extract_dataset(manifest, handle, ["x20_rgb"], out, batch_size=4)
    assert summary.rows == 21 and summary.dim == 24
    ds = read_store(out)
    assert ds.rows == 21 and ds.dim == 24
    # row order is manifest order
    expected_labels = [manifest.class_index(s.label) for s in manifest.samples]
    assert ds.labels.tolist() == expected_labels
    # every row unit-norm after the default L2 mode
    norms = np.linalg.norm(ds.data.astype(np.float64), axis=1)
    assert np.allclose(norms, 1.0, atol=1e-4)
    prov = ds.provenance
    assert prov["backbone_id"] == "stub_a"
    assert prov["normalization"] == "l2"
    assert [v["name"] for v in prov["views"]] == ["x20_rgb"]
    assert prov["classes"] == ["a", "b", "c"]


def test_extract_dataset_multiview_dim_and_norms(tmp_path, stub_sidecar):
    rng = np.random.default_rng(3)
    centers = unit_centers(51, 2, 20)
    labels, fa = blob_features(rng, 5, centers, spread=0.3, noise=0.05)
    _, fb = blob_features(rng, 5, centers, spread=0.3, noise=0.05)
    va = default_view("va", SIZE)
    vb = default_view("vb", SIZE)
    manifest_path = build_image_dataset(
        tmp_path / "mv",
        classes=["a", "b"],
        views=[va, vb],
        labels=labels,
        features={"va": fa, "vb": fb},
        grid=GRID,
    )
    manifest = load_manifest(manifest_path)
    handle = load_backbone(stub_sidecar)
    out = tmp_path / "mv.dflb"
    summary = extract_dataset(manifest, handle, ["va", "vb"], out)
    assert summary.dim == 48  # 2 views x 24
    ds = read_store(out)
    # each per-view block is unit-norm: normalization precedes concatenation
    for lo, hi in ((0, 24), (24, 48)):
        norms = np.linalg.norm(ds.data[:, lo:hi].astype(np.float64), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-4)
    # view order respected: swapping views swaps blocks
    out2 = tmp_path / "vu.dflb"
    extract_dataset(manifest, handle, ["vb", "va"], out2)
    ds2 = read_store(out2)
    assert np.array_equal(ds2.data[:, :24], ds.data[:, 24:])


def test_extract_dataset_worker_count_invariant(tmp_path, stub_sidecar, small_manifest):
    manifest = load_manifest(small_manifest)
    handle = load_backbone(stub_sidecar)
    p1 = tmp_path / "w1.dflb"
    p8 = tmp_path / "w8.dflb"
    extract_dataset(manifest, handle, ["x20_rgb"], p1, batch_size=4, workers=1)
    extract_dataset(manifest, handle, ["x20_rgb"], p8, batch_size=4, workers=8)
    assert p1.read_bytes() == p8.read_bytes()


def test_extract_dataset_unreadable_image_aborts_with_sample_id(
    tmp_path, stub_sidecar, small_manifest
):
    manifest = load_manifest(small_manifest)
    # corrupt the image of the 6th sample
    victim = manifest.samples[5]
    (manifest.root / victim.view_paths["x20_rgb"]).write_bytes(b"broken")
    handle = load_backbone(stub_sidecar)
    out = tmp_path / "bad.dflb"
    with pytest.raises(ExtractionError, match=victim.id):
        extract_dataset(manifest, handle, ["x20_rgb"], out, batch_size=4, workers=2)
    assert not out.exists()
    assert list(tmp_path.glob("*.tmp")) == []


def test_extract_dataset_validation_errors(tmp_path, stub_sidecar, small_manifest):
    manifest = load_manifest(small_manifest)
    handle = load_backbone(stub_sidecar)
    with pytest.raises(ExtractionError, match="ghost"):
        extract_dataset(manifest, handle, ["ghost"], tmp_path / "x.dflb")
    with pytest.raises(ExtractionError, match="batch_size"):
        extract_dataset(manifest, handle, ["x20_rgb"], tmp_path / "x.dflb", batch_size=0)
    with pytest.raises(ExtractionError, match="no views"):
        extract_dataset(manifest, handle, [], tmp_path / "x.dflb")


def test_extract_dataset_view_size_must_match_backbone(tmp_path, stub_sidecar):
    rng = np.random.default_rng(4)
    view = ViewSpec(
        name="big", zoom="x20", colorspace="rgb", target_size=128, resize_policy="resize"
    )
    labels, feats = blob_features(rng, 3, unit_centers(52, 2, 10), spread=0.3, noise=0.05)
    manifest_path = build_image_dataset(
        tmp_path / "big",
        classes=["a", "b"],
        views=[view],
        labels=labels,
        features={"big": feats},
        grid=GRID,
    )
    manifest = load_manifest(manifest_path)
    handle = load_backbone(stub_sidecar)
    with pytest.raises(ExtractionError, match="target_size 128"):
        extract_dataset(manifest, handle, ["big"], tmp_path / "x.dflb")


def test_extract_dataset_none_normalization(tmp_path, stub_sidecar, small_manifest):
    manifest = load_manifest(small_manifest)
    handle = load_backbone(stub_sidecar)
    out = tmp_path / "raw.dflb"
    extract_dataset(manifest, handle, ["x20_rgb"], out, normalization="none")
    ds = read_store(out)
    norms = np.linalg.norm(ds.data.astype(np.float64), axis=1)
    assert not np.allclose(norms, 1.0, atol=1e-3)
    assert ds.provenance["normalization"] == "none"


def test_preprocess_view_grayscale_and_pad(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(32, 32, 3))
    p = tmp_path / "small.png"
    write_png(img, p)

    gray_view = ViewSpec(
        name="g", zoom="x20", colorspace="grayscale", target_size=32, resize_policy="resize"
    )
    from dfl.imageprep import IDENTITY_NORMALIZATION

    out = preprocess_view(p, gray_view, IDENTITY_NORMALIZATION)
    assert out.shape == (32, 32, 3)
    assert np.allclose(out[..., 0], out[..., 1]) and np.allclose(out[..., 1], out[..., 2])

    pad_view = ViewSpec(
        name="p", zoom="x20", colorspace="rgb", target_size=70, resize_policy="pad_then_scale"
    )
    out = preprocess_view(p, pad_view, IDENTITY_NORMALIZATION, pad_fill=1.0)
    assert out.shape == (70, 70, 3)
    assert np.all(out[0] == 1.0)  # top padding row is fill


def test_constant_stub_backbone_outputs_constants(tmp_path):
    sidecar = write_stub_backbone(
        tmp_path,
        "stub_const",
        embedding_dim=8,
        input_size=SIZE,
        grid=GRID,
        W=np.zeros((8, N_FEATURES)),
        b=np.ones(8),
    )
    handle = load_backbone(sidecar)
    rng = np.random.default_rng(6)
    out = extract(handle, [rng.uniform(size=(SIZE, SIZE, 3)).astype(np.float32) for _ in range(3)])
    assert all(np.allclose(v, 1.0) for v in out)
