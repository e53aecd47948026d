import binascii
import struct
from pathlib import Path

import numpy as np
import pytest

from viewset.data import (
    DataFormatError,
    Dataset,
    ManifestEntry,
    ViewFeatureSet,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    read_feature_file,
    read_manifest,
    save_checkpoint,
    save_dataset,
    write_feature_file,
    write_manifest,
)
from viewset.model import Model, ModelConfig

GOLDEN = Path(__file__).parent / "golden"


def small_dataset():
    rng = np.random.default_rng(0)
    splits = {"train": [], "val": [], "test": []}
    for i in range(2):
        splits["train"].append(ViewFeatureSet(
            shape_id=f"sh{i}", label=i, sublabel=i,
            features=rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64)))
    splits["test"].append(ViewFeatureSet(
        shape_id="sh9", label=0, sublabel=0,
        features=rng.normal(size=(2, 4)).astype(np.float32).astype(np.float64)))
    return Dataset(splits=splits, dim=4, label_names=["a", "b"], name="toy")


# ----------------------------------------------------------- feature files

def test_feature_file_round_trip_bit_identical(tmp_path):
    data = np.random.default_rng(1).normal(size=(6, 4)).astype(np.float32)
    path = tmp_path / "f.vsf"
    write_feature_file(path, data)
    back = read_feature_file(path)
    assert back.dtype == np.float64
    assert np.array_equal(back.astype(np.float32), data)
    # writing what was read reproduces the same bytes
    path2 = tmp_path / "g.vsf"
    write_feature_file(path2, back.astype(np.float32))
    assert path.read_bytes() == path2.read_bytes()


def test_feature_file_truncation_reports_byte_counts(tmp_path):
    path = tmp_path / "f.vsf"
    write_feature_file(path, np.ones((2, 3), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(DataFormatError, match="expected 36 bytes .* found 32"):
        read_feature_file(path)


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "f.vsf"
    path.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(DataFormatError, match="bad magic"):
        read_feature_file(path)


def test_feature_file_rejects_nonfinite_payload(tmp_path):
    path = tmp_path / "f.vsf"
    payload = np.array([[1.0, np.inf]], dtype="<f4")
    path.write_bytes(b"VSF1" + struct.pack("<II", 1, 2) + payload.tobytes())
    with pytest.raises(DataFormatError, match="non-finite value at row 0, col 1"):
        read_feature_file(path)
    with pytest.raises(ValueError):
        write_feature_file(tmp_path / "g.vsf", payload)


def test_golden_feature_files_parse_to_expected_values():
    cases = {
        "views_2x3.vsf": np.array([[0.5, -1.25, 3.0], [4.5, -6.75, 0.015625]]),
        "views_1x1.vsf": np.array([[42.0]]),
        "views_4x2.vsf": np.array([[0.0, 1.0], [2.0, 3.0],
                                   [-4.0, -5.0], [6.5, -7.5]]),
    }
    for name, want in cases.items():
        got = read_feature_file(GOLDEN / name)
        assert np.array_equal(got, want), name


def test_golden_feature_file_exact_bytes():
    want = binascii.unhexlify(
        "5653463102000000030000000000003f0000a0bf000040400000"
        "90400000d8c00000803c")
    assert (GOLDEN / "views_2x3.vsf").read_bytes() == want


# --------------------------------------------------------------- manifests

def test_manifest_round_trip(tmp_path):
    path = tmp_path / "m.tsv"
    entries = [
        ManifestEntry("sh0", "cup", 0, 3, "train", 0, 4),
        ManifestEntry("sh1", "vase", 1, None, "test", 4, 2),
    ]
    write_manifest(path, entries, dim=16, dataset_name="toy",
                   view_size="224x224x3")
    back, header = read_manifest(path)
    assert header["dim"] == 16
    assert header["dataset"] == "toy"
    assert header["views"] == "224x224x3"
    assert back == entries


def test_manifest_requires_dim(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("sh0\tcup\t0\t-\ttrain\t0\t4\n")
    with pytest.raises(DataFormatError, match="dim"):
        read_manifest(path)


def test_manifest_rejects_unknown_split(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("# dim\t4\nsh0\tcup\t0\t-\tdev\t0\t4\n")
    with pytest.raises(DataFormatError, match="unknown split"):
        read_manifest(path)


def test_dataset_out_of_bounds_range(tmp_path):
    write_feature_file(tmp_path / "f.vsf", np.ones((4, 2), dtype=np.float32))
    (tmp_path / "m.tsv").write_text(
        "# dim\t2\nsh0\tcup\t0\t-\ttrain\t0\t3\nsh1\tcup\t0\t-\ttrain\t3\t2\n")
    with pytest.raises(DataFormatError, match=r"outside feature file"):
        load_dataset(tmp_path / "f.vsf", tmp_path / "m.tsv")


def test_dataset_overlapping_ranges(tmp_path):
    write_feature_file(tmp_path / "f.vsf", np.ones((5, 2), dtype=np.float32))
    (tmp_path / "m.tsv").write_text(
        "# dim\t2\nsh0\tcup\t0\t-\ttrain\t0\t3\nsh1\tcup\t0\t-\ttrain\t2\t2\n")
    with pytest.raises(DataFormatError, match="overlap"):
        load_dataset(tmp_path / "f.vsf", tmp_path / "m.tsv")


def test_dataset_dim_mismatch(tmp_path):
    write_feature_file(tmp_path / "f.vsf", np.ones((2, 3), dtype=np.float32))
    (tmp_path / "m.tsv").write_text("# dim\t2\nsh0\tcup\t0\t-\ttrain\t0\t2\n")
    with pytest.raises(DataFormatError, match="does not match feature"):
        load_dataset(tmp_path / "f.vsf", tmp_path / "m.tsv")


def test_dataset_rejects_mixed_subcategories(tmp_path):
    write_feature_file(tmp_path / "f.vsf", np.ones((4, 2), dtype=np.float32))
    (tmp_path / "m.tsv").write_text(
        "# dim\t2\nsh0\tcup\t0\t1\ttrain\t0\t2\nsh1\tcup\t0\t-\ttrain\t2\t2\n")
    with pytest.raises(DataFormatError, match="all or none"):
        load_dataset(tmp_path / "f.vsf", tmp_path / "m.tsv")


def test_dataset_save_load_identity(tmp_path):
    ds = small_dataset()
    save_dataset(ds, tmp_path / "f.vsf", tmp_path / "m.tsv")
    back = load_dataset(tmp_path / "f.vsf", tmp_path / "m.tsv")
    assert back.label_names == ds.label_names
    assert back.name == "toy"
    for split in ("train", "val", "test"):
        assert [s.shape_id for s in back.splits[split]] == \
            [s.shape_id for s in ds.splits[split]]
        for a, b in zip(back.splits[split], ds.splits[split]):
            assert np.array_equal(a.features, b.features)
            assert (a.label, a.sublabel) == (b.label, b.sublabel)
    # a second save of the loaded dataset is byte-identical
    save_dataset(back, tmp_path / "f2.vsf", tmp_path / "m2.tsv")
    assert (tmp_path / "f.vsf").read_bytes() == (tmp_path / "f2.vsf").read_bytes()
    assert (tmp_path / "m.tsv").read_text() == (tmp_path / "m2.tsv").read_text()


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_identical(tmp_path):
    cfg = ModelConfig(dim_in=6, num_classes=3, dim_view=8, num_blocks=1,
                      num_heads=2, decoder_depth=2)
    model = Model.build(cfg, np.random.default_rng(3))
    params, buffers = model.state_arrays()
    meta = {"best_epoch": 7, "instance_accuracy": 0.5}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, params, buffers, meta)
    cfg2, p2, b2, meta2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert meta2 == meta
    assert set(p2) == set(params) and set(b2) == set(buffers)
    for k in params:
        assert np.array_equal(p2[k], params[k]), k
    for k in buffers:
        assert np.array_equal(b2[k], buffers[k]), k
    # loading into a fresh model and saving again is byte-identical
    model2 = Model.build(cfg, np.random.default_rng(99))
    model2.load_state(p2, b2)
    save_checkpoint(tmp_path / "m2.ckpt", cfg, *model2.state_arrays(), meta)
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_truncation_detected(tmp_path):
    cfg = ModelConfig(dim_in=4, num_classes=2, dim_view=4, num_blocks=1,
                      num_heads=1, decoder_depth=1)
    model = Model.build(cfg, np.random.default_rng(4))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, *model.state_arrays())
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DataFormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(DataFormatError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"JUNK" + b"\x00" * 16)
    with pytest.raises(DataFormatError, match="bad magic"):
        load_checkpoint(path)


# ---------------------------------------------------------------- synthetic

def aspect_table(dataset):
    """Recover the prototype vocabulary from a noise-free dataset."""
    aspects = {}
    for shape in dataset.all_shapes():
        for row in shape.features:
            aspects.setdefault(tuple(np.round(row, 9)), len(aspects))
    return aspects


def test_synthetic_multiset_oracle_is_perfect():
    ds = generate_synthetic(num_classes=5, shapes_per_class=6, views=6,
                            dim=8, noise=0.0, seed=1)
    aspects = aspect_table(ds)
    # reference multiset per class, learned from one train shape per class
    reference = {}
    for shape in ds.splits["train"]:
        key = tuple(sorted(aspects[tuple(np.round(r, 9))] for r in shape.features))
        reference.setdefault(shape.label, key)
    assert len(set(reference.values())) == 5  # multisets identify the class
    correct = 0
    shapes = ds.all_shapes()
    for shape in shapes:
        key = tuple(sorted(aspects[tuple(np.round(r, 9))] for r in shape.features))
        pred = next(c for c, ref in reference.items() if ref == key)
        correct += pred == shape.label
    assert correct == len(shapes)


def test_synthetic_single_view_is_ambiguous():
    ds = generate_synthetic(num_classes=5, shapes_per_class=6, views=6,
                            dim=8, noise=0.0, seed=1)
    aspects = aspect_table(ds)
    owners = {}
    for shape in ds.all_shapes():
        for row in shape.features:
            owners.setdefault(aspects[tuple(np.round(row, 9))], set()).add(shape.label)
    # every single aspect is shared between classes: one view cannot decide
    assert all(len(classes) >= 2 for classes in owners.values())
    # a single-view oracle (pick the lowest owning class) stays below 100%
    correct = total = 0
    for shape in ds.all_shapes():
        aspect = aspects[tuple(np.round(shape.features[0], 9))]
        correct += min(owners[aspect]) == shape.label
        total += 1
    assert correct < total


def test_synthetic_deterministic():
    a = generate_synthetic(num_classes=4, shapes_per_class=4, views=6,
                           dim=6, noise=0.1, seed=9)
    b = generate_synthetic(num_classes=4, shapes_per_class=4, views=6,
                           dim=6, noise=0.1, seed=9)
    for sa, sb in zip(a.all_shapes(), b.all_shapes()):
        assert sa.shape_id == sb.shape_id
        assert np.array_equal(sa.features, sb.features)


def test_synthetic_rejects_degenerate_configs():
    with pytest.raises(ValueError, match="at least 2 classes"):
        generate_synthetic(num_classes=1)
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(num_classes=3)  # too few classes for shared codes
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(views=5)  # odd view count breaks balance
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(views=4)  # too few coding slots
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(num_classes=8, views=6)  # only C(4,2)=6 codes exist


def test_synthetic_default_shape_counts():
    ds = generate_synthetic(num_classes=4, shapes_per_class=5, views=6,
                            dim=8, noise=0.1, seed=0)
    assert len(ds.splits["train"]) == 16
    assert len(ds.splits["test"]) == 4
    assert ds.has_subcategories  # subclasses mirror classes
    assert ds.num_subclasses == 4
