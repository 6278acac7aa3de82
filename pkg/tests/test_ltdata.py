import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from candle import ltdata
from candle.errors import CorruptData, InvalidRatio
from candle.ltdata import Dataset

# training-set sizes of the standard LT benchmarks
LT_SIZES = [("cifar10", 10, 5000, 10, 20431), ("cifar10", 10, 5000, 100, 12406),
            ("cifar100", 100, 500, 10, 19573), ("cifar100", 100, 500, 100, 10847)]


def label_dataset(k, per_class):
    return Dataset(None, np.repeat(np.arange(k), per_class), k, name=f"labels{k}")


def cifar_record(label, pixel=255, variant="cifar10"):
    head = bytes([label]) if variant == "cifar10" else bytes([0, label])
    return head + bytes([pixel]) * 3072


@pytest.mark.parametrize("variant,k,per_class,ratio,total", LT_SIZES)
def test_lt_sizes(variant, k, per_class, ratio, total):
    lt = ltdata.derive_lt(label_dataset(k, per_class), ratio, seed=0)
    assert len(lt) == total


def test_ratio_one_is_identity():
    d = label_dataset(5, 40)
    lt = ltdata.derive_lt(d, 1.0)
    np.testing.assert_array_equal(lt.class_counts, d.class_counts)


def test_ratio_below_one_rejected():
    with pytest.raises(InvalidRatio):
        ltdata.derive_lt(label_dataset(3, 10), 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(2, 600), st.floats(1.0, 200.0), st.integers(0, 2**16))
def test_lt_invariants(k, per_class, ratio, seed):
    d = label_dataset(k, per_class)
    lt = ltdata.derive_lt(d, ratio, seed)
    counts = lt.class_counts
    assert counts.sum() == len(lt)
    assert lt.labels.max() < k
    ordered = lt.ordered_counts
    assert np.all(np.diff(ordered) <= 0)
    head, tail = ordered[0], ordered[-1]
    if tail > 0:
        # flooring the tail count can only raise the realized ratio
        assert ratio - 1e-9 <= head / tail <= ratio * (1 + 1 / tail) + 1e-9
    # retained indices are real members of the source with matching labels
    np.testing.assert_array_equal(d.labels[lt.source_indices], lt.labels)
    assert np.unique(lt.source_indices).size == lt.source_indices.size


def test_derive_lt_deterministic_and_seed_dependent():
    rng = np.random.default_rng(0)
    d = Dataset(rng.random((300, 1, 2, 2)).astype(np.float32), np.repeat(np.arange(3), 100), 3)
    a = ltdata.derive_lt(d, 10, seed=1)
    b = ltdata.derive_lt(d, 10, seed=1)
    c = ltdata.derive_lt(d, 10, seed=2)
    np.testing.assert_array_equal(a.source_indices, b.source_indices)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.source_indices, c.source_indices)
    np.testing.assert_array_equal(a.class_counts, c.class_counts)


def test_manifest_contents():
    lt = ltdata.derive_lt(label_dataset(4, 50), 10, seed=3)
    m = lt.manifest()
    assert m["ratio"] == 10 and m["seed"] == 3
    assert m["num_samples"] == len(lt) == len(m["retained_indices"])
    assert sum(m["class_counts"]) == len(lt)


def test_class_order_ties_by_index():
    np.testing.assert_array_equal(ltdata.class_order_by_count([5, 9, 5, 9]), [1, 3, 0, 2])


def test_parse_cifar_single_record():
    px, lb = ltdata.parse_cifar_records(cifar_record(7), "cifar10")
    assert lb.tolist() == [7]
    assert px.shape == (1, 3, 32, 32)


def test_load_cifar_single_record(tmp_path):
    f = tmp_path / "one.bin"
    f.write_bytes(cifar_record(7))
    d = ltdata.load_cifar_binary(f, "cifar10")
    assert len(d) == 1 and d.labels[0] == 7
    assert np.all(d.images == 1.0)


def test_cifar100_uses_fine_label():
    px, lb = ltdata.parse_cifar_records(cifar_record(42, variant="cifar100"), "cifar100")
    assert lb.tolist() == [42]


def test_cifar_errors():
    with pytest.raises(CorruptData):
        ltdata.parse_cifar_records(b"", "cifar10")
    with pytest.raises(CorruptData) as err:
        ltdata.parse_cifar_records(cifar_record(1) + b"\x01\x02", "cifar10")
    assert err.value.offset == 3073
    with pytest.raises(CorruptData) as err:
        ltdata.parse_cifar_records(cifar_record(1) + cifar_record(10), "cifar10")
    assert err.value.offset == 3073


def test_cifar_batch_directory(tmp_path):
    names = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
             "data_batch_5.bin"]
    for i, name in enumerate(names):
        (tmp_path / name).write_bytes(cifar_record(i) + cifar_record(9 - i))
    d = ltdata.load_cifar_binary(tmp_path, "cifar10", "train")
    assert len(d) == 10
    np.testing.assert_array_equal(d.class_counts, np.ones(10))


def test_class_balanced_sampler_marginal():
    d = Dataset(None, np.array([0] * 100 + [1]), 2)
    draws = ltdata.class_balanced_indices(d, 10_000, seed=0)
    freq = (d.labels[draws] == 1).mean()
    assert abs(freq - 0.5) <= 0.02


def test_class_balanced_sampler_single_class_and_determinism():
    d = Dataset(None, np.zeros(7, dtype=np.int64), 1)
    draws = ltdata.class_balanced_indices(d, 50, seed=1)
    assert set(draws.tolist()) <= set(range(7))
    np.testing.assert_array_equal(draws, ltdata.class_balanced_indices(d, 50, seed=1))


@pytest.mark.parametrize("k,sizes", [(9, (3, 3, 3)), (10, (4, 4, 2)), (100, (34, 34, 32))])
def test_tertile_partition(k, sizes):
    counts = np.arange(k, 0, -1) * 10
    p = ltdata.partition_classes(counts)
    assert (len(p.head), len(p.medium), len(p.tail)) == sizes
    assert set(p.head) | set(p.medium) | set(p.tail) == set(range(k))
    assert p.group_of(0) == "head" and p.group_of(k - 1) == "tail"


def test_count_partition():
    p = ltdata.partition_classes([500, 100, 50, 19], scheme="count")
    assert p.head == (0,) and p.medium == (1, 2) and p.tail == (3,)


def test_synth_deterministic():
    a = ltdata.synth_generate(3, 5, image_size=8, seed=4)
    b = ltdata.synth_generate(3, 5, image_size=8, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = ltdata.synth_generate(3, 5, image_size=8, seed=4, split="test")
    assert not np.array_equal(a.images, c.images)


def _nearest_mean_accuracy(train, test):
    k = train.num_classes
    flat = train.images.reshape(len(train), -1)
    means = np.stack([flat[train.labels == c].mean(axis=0) for c in range(k)])
    q = test.images.reshape(len(test), -1)
    d2 = (q * q).sum(1)[:, None] - 2 * q @ means.T + (means * means).sum(1)[None]
    return float((d2.argmin(axis=1) == test.labels).mean())


def test_synth_large_separation_is_separable():
    # enough training samples that centroid estimation noise is small next to the margin
    train = ltdata.synth_generate(10, 400, image_size=16, class_separation=5, seed=1)
    test = ltdata.synth_generate(10, 100, image_size=16, class_separation=5, seed=1, split="test")
    assert _nearest_mean_accuracy(train, test) >= 0.99


def test_synth_zero_separation_is_chance():
    k = 10
    train = ltdata.synth_generate(k, 100, image_size=8, class_separation=0, seed=2)
    test = ltdata.synth_generate(k, 200, image_size=8, class_separation=0, seed=2, split="test")
    # a least-squares linear probe on one-hot targets
    x = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    w, *_ = np.linalg.lstsq(x, np.eye(k)[train.labels], rcond=None)
    xt = np.c_[test.images.reshape(len(test), -1), np.ones(len(test))]
    acc = float(((xt @ w).argmax(axis=1) == test.labels).mean())
    assert abs(acc - 1 / k) <= 0.05


def test_dataset_roundtrip(tmp_path):
    src = ltdata.synth_generate(4, 20, image_size=8, seed=0)
    lt = ltdata.derive_lt(src, 5, seed=0)
    path = tmp_path / "lt.cndk"
    ltdata.save_dataset(path, lt)
    back = ltdata.load_dataset(path)
    np.testing.assert_array_equal(back.images, lt.images)
    np.testing.assert_array_equal(back.labels, lt.labels)
    np.testing.assert_array_equal(back.class_order, lt.class_order)
    assert back.imbalance_ratio == 5.0
