import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthlab.dataset_io import (
    AugmentConfig, DatasetFormatError, Manifest, generate_dataset, load_batch, match_intersection, read_depth,
    read_image, read_seg, write_depth, write_image, write_seg,
)
from depthlab.records import SegmentationMap


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return generate_dataset(root, 3, 2, seed=4, height=32, width=96)


def test_depth_codes(tmp_path):
    d = np.array([[0.0, 1.0, 255.99]])
    write_depth(tmp_path / "d.pgm", d)
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 1\n65535\n")
    codes = np.frombuffer(raw[-6:], dtype=">u2")
    np.testing.assert_array_equal(codes, [0, 256, round(255.99 * 256)])
    np.testing.assert_array_equal(read_depth(tmp_path / "d.pgm")[0, :2], [0.0, 1.0])


@given(arrays(np.float64, (7, 9), elements=st.floats(0, 255.99)))
@settings(max_examples=50, deadline=None)
def test_depth_round_trip_within_half_step(tmp_path_factory, depth):
    path = tmp_path_factory.mktemp("rt") / "d.pgm"
    write_depth(path, depth)
    assert np.abs(read_depth(path) - depth).max() <= 1 / 512 + 1e-5  # float32 readback


def test_depth_write_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        write_depth(tmp_path / "d.pgm", np.array([[256.0]]))
    with pytest.raises(ValueError):
        write_depth(tmp_path / "d.pgm", np.array([[-1.0]]))


def test_depth_read_rejects_wrong_container(tmp_path):
    write_image(tmp_path / "i.ppm", np.zeros((2, 2, 3)))
    with pytest.raises(DatasetFormatError):
        read_depth(tmp_path / "i.ppm")
    (tmp_path / "s.pgm").write_bytes(b"P5\n2 1\n255\n\x00\x01")
    with pytest.raises(DatasetFormatError, match="65535"):
        read_depth(tmp_path / "s.pgm")


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DatasetFormatError, match="nothere"):
        read_depth(tmp_path / "nothere.pgm")


def test_black_image_round_trip(tmp_path):
    write_image(tmp_path / "b.ppm", np.zeros((4, 5, 3)))
    np.testing.assert_array_equal(read_image(tmp_path / "b.ppm"), 0.0)


@given(arrays(np.float64, (5, 6, 3), elements=st.floats(0, 1)))
@settings(max_examples=50, deadline=None)
def test_image_round_trip_within_half_step(tmp_path_factory, image):
    path = tmp_path_factory.mktemp("im") / "i.ppm"
    write_image(path, image)
    assert np.abs(read_image(path) - image).max() <= 1 / 510 + 1e-6


def test_seg_round_trip(tmp_path):
    seg = SegmentationMap(np.full((4, 6), 3), 6)
    write_seg(tmp_path / "s.pgm", seg)
    back = read_seg(tmp_path / "s.pgm", 6)
    np.testing.assert_array_equal(back.labels, seg.labels)
    with pytest.raises(DatasetFormatError):
        read_seg(tmp_path / "s.pgm", 3)


def test_manifest_save_load(dataset):
    loaded = Manifest.load(dataset.root)
    assert loaded.to_json() == dataset.to_json()
    assert [e["id"] for e in loaded.split("train")] == [e["id"] for e in dataset.split("train")]
    assert len(loaded.split("train")) == 3 and len(loaded.split("val")) == 2


def test_manifest_rejects_overlap_and_missing_files(dataset):
    dup = Manifest(dataset.root, dataset.samples + [dict(dataset.samples[0], split="val")], dataset.frames)
    with pytest.raises(DatasetFormatError, match="duplicate"):
        dup.validate()
    broken = Manifest(dataset.root, [dict(dataset.samples[0], gt="gt/missing.pgm")], dataset.frames)
    with pytest.raises(DatasetFormatError, match="missing"):
        broken.validate()


def test_manifest_rejects_unknown_version(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(DatasetFormatError, match="version"):
        Manifest.load(tmp_path)


def test_self_join_keeps_every_sample(dataset):
    joined, report = match_intersection(dataset, dataset)
    assert [e["id"] for e in joined.samples] == [e["id"] for e in dataset.samples]
    assert report == {"only_a": [], "only_b": [], "incomplete": []}


def test_disjoint_join_is_empty(dataset):
    a = Manifest(dataset.root, dataset.samples[:2], dataset.frames)
    b = Manifest(dataset.root, dataset.samples[2:], dataset.frames)
    joined, report = match_intersection(a, b)
    assert joined.samples == []
    assert report["only_a"] == [e["id"] for e in a.samples]
    assert report["only_b"] == sorted(e["id"] for e in b.samples)


@given(st.lists(st.booleans(), min_size=5, max_size=5), st.lists(st.booleans(), min_size=5, max_size=5))
@settings(max_examples=40, deadline=None)
def test_join_matches_set_intersection(dataset, pick_a, pick_b):
    a = Manifest(dataset.root, [e for e, p in zip(dataset.samples, pick_a) if p], dataset.frames)
    b = Manifest(dataset.root, [e for e, p in zip(dataset.samples, pick_b) if p], dataset.frames)
    joined, _ = match_intersection(a, b)
    expected = {e["id"] for e in a.samples} & {e["id"] for e in b.samples}
    assert {e["id"] for e in joined.samples} == expected


def test_join_merges_modalities_and_reports_incomplete(dataset):
    depth_side = [{k: v for k, v in e.items() if k != "seg"} for e in dataset.samples]
    seg_side = [{"id": e["id"], "split": e["split"], "seg": e["seg"]} for e in dataset.samples[1:]]
    joined, report = match_intersection(Manifest(dataset.root, depth_side, dataset.frames),
                                        Manifest(dataset.root, seg_side, dataset.frames))
    assert [e["id"] for e in joined.samples] == [e["id"] for e in dataset.samples[1:]]
    assert all(e["seg"] for e in joined.samples)
    assert report["only_a"] == [dataset.samples[0]["id"]]
    no_seg = Manifest(dataset.root, [{"id": e["id"], "split": e["split"]} for e in dataset.samples])
    _, report = match_intersection(Manifest(dataset.root, depth_side, dataset.frames), no_seg)
    assert report["incomplete"] == sorted(e["id"] for e in dataset.samples)


def test_join_rejects_duplicates(dataset):
    dup = Manifest(dataset.root, dataset.samples + dataset.samples[:1], dataset.frames)
    with pytest.raises(DatasetFormatError):
        match_intersection(dup, dataset)


def test_batch_without_augmentation_matches_disk(dataset):
    from pathlib import Path

    entry = dataset.split("val")[1]
    (record,) = load_batch(dataset, "val", [1])
    root = Path(dataset.root)
    np.testing.assert_array_equal(record.image, read_image(root / entry["image"]))
    np.testing.assert_array_equal(record.sparse, read_depth(root / entry["sparse"]))
    np.testing.assert_array_equal(record.gt, read_depth(root / entry["gt"]))
    np.testing.assert_array_equal(record.seg.labels, read_seg(root / entry["seg"], 6).labels)
    np.testing.assert_array_equal(record.prev_image, read_image(root / dataset.frames[entry["prev"]]))
    assert record.photometric_ok and record.ids[1] == entry["id"]


def test_sequence_boundary_duplicates_centre(dataset):
    entries = [dict(e, prev=None) for e in dataset.samples]
    (record,) = load_batch(Manifest(dataset.root, entries, dataset.frames), "train", [0])
    assert not record.photometric_ok
    np.testing.assert_array_equal(record.prev_image, record.image)


def test_augmented_batches_are_deterministic(dataset):
    cfg = AugmentConfig(flip_prob=0.5, crop=(32, 64), seed=3)
    a = load_batch(dataset, "train", [0, 1, 2], cfg, epoch=2)
    b = load_batch(dataset, "train", [0, 1, 2], cfg, epoch=2)
    for x, y in zip(a, b):
        assert x.shape == (32, 64)
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.sparse, y.sparse)


def test_generation_is_byte_deterministic(tmp_path):
    a = generate_dataset(tmp_path / "a", 2, 1, seed=7, height=32, width=96)
    generate_dataset(tmp_path / "b", 2, 1, seed=7, height=32, width=96)
    for rel in list(a.frames.values()) + [e[m] for e in a.samples for m in ("sparse", "gt", "seg", "gt_full")]:
        assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False)
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_generated_data_is_consistent(dataset):
    for record in load_batch(dataset, "train", range(3)):
        valid = record.sparse > 0
        assert valid.any()
        assert np.all(record.gt[valid] > 0)
        assert not valid[: -(-record.shape[0] // 3)].any()
