import numpy as np
import pytest

from augsearch.data import (
    Dataset,
    SynthSpec,
    load_cifar10,
    make_synthetic,
    parse_records,
    records_bytes,
    sample_images,
    sample_val_batch,
    split_holdout,
    subsample,
    write_cifar10,
)
from augsearch.errors import ConfigError, DataFormatError


def test_hand_built_two_record_file(tmp_path):
    rec0 = bytes([3]) + bytes(range(256)) * 12
    rec1 = bytes([9]) + bytes([255 - (i % 256) for i in range(3072)])
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(rec0 + rec1)
    ds = load_cifar10(path)
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.labels.tolist() == [3, 9]
    # channel-planar, row-major: byte 1 + c*1024 + r*32 + col
    assert ds.images[0, 0, 0, 5] == 5 / 255
    assert ds.images[0, 1, 2, 3] == ((1024 + 2 * 32 + 3) % 256) / 255
    assert ds.images[1, 2, 31, 31] == (255 - (3071 % 256)) / 255


def test_full_batch_size(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((10000, 3, 32, 32)), rng.integers(0, 10, 10000), 10)
    path = tmp_path / "data_batch_1.bin"
    write_cifar10(ds, path)
    assert path.stat().st_size == 30_730_000
    back = load_cifar10(path)
    assert back.images.shape == (10000, 3, 32, 32)


def test_directory_split_selection(tmp_path):
    rng = np.random.default_rng(1)
    for name, n in (("data_batch_1.bin", 5), ("data_batch_2.bin", 7), ("test_batch.bin", 3)):
        write_cifar10(Dataset(rng.random((n, 3, 32, 32)), rng.integers(0, 10, n), 10), tmp_path / name)
    assert len(load_cifar10(tmp_path, "train")) == 12
    assert len(load_cifar10(tmp_path, "test")) == 3


def test_round_trip_within_quantization():
    train, _ = make_synthetic(SynthSpec(image_size=32, channels=3, samples_per_class=5, val_per_class=1))
    back = parse_records(records_bytes(train), shape=train.image_shape, class_count=train.class_count)
    assert np.array_equal(back.labels, train.labels)
    assert np.abs(back.images - train.images).max() <= 0.5 / 255 + 1e-12


@pytest.mark.parametrize("blob,match", [(b"", "empty"), (b"\x00" * 3072, "multiple"),
                                        (bytes([10]) + b"\x00" * 3072, "label")])
def test_malformed_files(tmp_path, blob, match):
    path = tmp_path / "bad.bin"
    path.write_bytes(blob)
    with pytest.raises(DataFormatError, match=match):
        load_cifar10(path)


def test_missing_path(tmp_path):
    with pytest.raises(DataFormatError):
        load_cifar10(tmp_path / "nope")


def test_synthetic_determinism():
    spec = SynthSpec(nuisance="rotation", samples_per_class=10, val_per_class=10, seed=4)
    a, b = make_synthetic(spec), make_synthetic(spec)
    for x, y in zip(a, b):
        assert np.array_equal(x.images, y.images)
        assert np.array_equal(x.labels, y.labels)


def test_rotation_nuisance_present_in_val():
    spec = SynthSpec(nuisance="rotation", samples_per_class=10, val_per_class=50, seed=1)
    train, val, train_bases, val_bases = make_synthetic(spec, return_bases=True)
    diff = np.abs(val.images - val_bases).mean(axis=(1, 2, 3))
    assert np.mean(diff > 0) >= 0.9
    assert np.array_equal(train.images, train_bases)


def test_nuisance_free_splits_share_distribution():
    spec = SynthSpec(nuisance="none", samples_per_class=200, val_per_class=200)
    train, val = make_synthetic(spec)
    for lab in range(spec.classes):
        a = train.images[train.labels == lab].mean(axis=0)
        b = val.images[val.labels == lab].mean(axis=0)
        assert np.abs(a - b).max() < 0.05


def test_synthetic_config_errors():
    with pytest.raises(ConfigError):
        make_synthetic(SynthSpec(samples_per_class=0))
    with pytest.raises(ConfigError):
        make_synthetic(SynthSpec(nuisance="fog"))


def test_samplers():
    train, _ = make_synthetic(SynthSpec(samples_per_class=20, val_per_class=1))
    sub = subsample(train, 30, seed=2)
    assert len(sub) == 30
    assert np.array_equal(sub.images, subsample(train, 30, seed=2).images)
    with pytest.raises(ConfigError):
        subsample(train, 81, seed=0)
    imgs, labs = sample_val_batch(train, 10, np.random.default_rng(0), label=2)
    assert imgs.shape[0] == 10 and np.all(labs == 2)
    with pytest.raises(ConfigError):
        sample_val_batch(train, 0, np.random.default_rng(0))
    a = sample_images(train, 16, np.random.default_rng(5))
    b = sample_images(train, 16, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0])
    tr, va = split_holdout(train, 0.25, seed=0)
    assert len(tr) == 60 and len(va) == 20
