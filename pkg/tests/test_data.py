"""Dataset generation, file round-trips, and the four partition laws."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flaas.data import (
    Dataset,
    Distribution,
    LabeledSample,
    PartitionSpec,
    generate_synthetic,
    load_features,
    partition,
    save_features,
)
from flaas.errors import CapacityError, InvalidInput, ParseError
from flaas.flmath import Hyperparams, evaluate, init_model, train


# --- synthetic generator --------------------------------------------------------


def test_synthetic_shapes_and_balance():
    ds = generate_synthetic(32, 10, 50000, 1000, class_sep=3.0, seed=1)
    assert len(ds.train) == 50000 and len(ds.test) == 1000
    counts = np.bincount([s.label for s in ds.train], minlength=10)
    assert counts.min() >= 4999 and counts.max() <= 5001


def test_synthetic_deterministic():
    a = generate_synthetic(8, 4, 100, 20, 2.0, seed=9)
    b = generate_synthetic(8, 4, 100, 20, 2.0, seed=9)
    assert all(
        np.array_equal(x.features, y.features) and x.label == y.label
        for x, y in zip(a.train + a.test, b.train + b.test)
    )


def test_zero_separation_is_chance_level():
    ds = generate_synthetic(16, 10, 4000, 1000, class_sep=0.0, seed=5)
    model = init_model(16, 32, 10, seed=0)
    trained, _ = train(model, ds.train, Hyperparams(epochs=5, seed=1))
    acc = evaluate(trained, ds.test, Hyperparams()).accuracy
    assert abs(acc - 0.1) <= 0.05


def test_wide_separation_trains_well():
    ds = generate_synthetic(32, 10, 5000, 1000, class_sep=6.0, seed=2)
    model = init_model(32, 32, 10, seed=0)
    trained, _ = train(model, ds.train, Hyperparams(epochs=20, seed=1))
    acc = evaluate(trained, ds.test, Hyperparams()).accuracy
    assert acc >= 0.90


# --- file format ------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(6, 3, 50, 10, 2.0, seed=3)
    path = tmp_path / "ds.txt"
    save_features(ds, path)
    loaded = load_features(path)
    assert loaded.d == 6 and loaded.num_classes == 3
    assert len(loaded.train) == 50 and len(loaded.test) == 10
    for a, b in zip(ds.train + ds.test, loaded.train + loaded.test):
        assert a.label == b.label
        assert np.array_equal(
            a.features.astype(np.float32), b.features.astype(np.float32)
        )


def test_load_rejects_out_of_range_label(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("d=2 C=3 train=2 test=0\n0,1.0,2.0\n3,1.0,2.0\n")
    with pytest.raises(ParseError, match="line 3"):
        load_features(path)


def test_load_rejects_empty_train(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("d=2 C=3 train=0 test=1\n0,1.0,2.0\n")
    with pytest.raises(ParseError, match="no training samples"):
        load_features(path)


def test_load_rejects_malformed_header(tmp_path):
    path = tmp_path / "hdr.txt"
    path.write_text("dims=2 C=3\n")
    with pytest.raises(ParseError, match="line 1"):
        load_features(path)


def test_load_rejects_wrong_row_length(tmp_path):
    path = tmp_path / "row.txt"
    path.write_text("d=3 C=2 train=1 test=0\n0,1.0,2.0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_features(path)


def test_load_rejects_row_count_mismatch(tmp_path):
    path = tmp_path / "count.txt"
    path.write_text("d=2 C=2 train=2 test=1\n0,1.0,2.0\n1,0.5,0.5\n")
    with pytest.raises(ParseError, match="promises 3 rows"):
        load_features(path)


# --- partitioning ------------------------------------------------------------------


def small_dataset(seed=0, n_train=6000):
    return generate_synthetic(4, 10, n_train, 100, 2.0, seed=seed)


def spec_for(dist, seed=0, users=3, spa=50):
    return PartitionSpec(
        distribution=dist, num_users=users, samples_per_app=spa, seed=seed
    )


def assert_disjoint_and_sized(assignment, spa):
    seen = set()
    for key, idxs in assignment.cell_indices.items():
        assert len(idxs) == spa, f"cell {key} has {len(idxs)} samples"
        for i in idxs:
            assert i not in seen, f"sample {i} assigned twice"
            seen.add(i)


def test_iid_cells_cover_all_classes():
    ds = small_dataset()
    assignment = partition(ds, spec_for(Distribution.IID, spa=150))
    assert_disjoint_and_sized(assignment, 150)
    for key, cell in assignment.cells.items():
        labels = {s.label for s in cell}
        assert labels == set(range(10))
        assert assignment.cell_classes[key] == tuple(range(10))


def test_noniid_per_user_consistent_class_sets():
    ds = small_dataset()
    assignment = partition(ds, spec_for(Distribution.NONIID_PER_USER, seed=4))
    assert_disjoint_and_sized(assignment, 50)
    for user in range(3):
        sets = [assignment.cell_classes[(user, app)] for app in ("Red", "Green", "Blue")]
        assert sets[0] == sets[1] == sets[2]
        assert len(sets[0]) == 3
        for app in ("Red", "Green", "Blue"):
            assert {s.label for s in assignment.cells[(user, app)]} <= set(sets[0])


def test_noniid_per_app_overlapping_sets():
    ds = small_dataset()
    assignment = partition(ds, spec_for(Distribution.NONIID_PER_APP_OVERLAPPING, seed=4))
    assert_disjoint_and_sized(assignment, 50)
    for key, classes in assignment.cell_classes.items():
        assert len(classes) == 3
        assert {s.label for s in assignment.cells[key]} <= set(classes)


def test_noniid_per_app_persistent_fixed_split():
    ds = small_dataset()
    for seed in (1, 2, 3):
        assignment = partition(ds, spec_for(Distribution.NONIID_PER_APP_PERSISTENT, seed=seed))
        for user in range(3):
            assert assignment.cell_classes[(user, "Red")] == (0, 1, 2)
            assert assignment.cell_classes[(user, "Green")] == (3, 4, 5)
            assert assignment.cell_classes[(user, "Blue")] == (6, 7, 8, 9)
        union = set()
        for app in ("Red", "Green", "Blue"):
            classes = set(assignment.cell_classes[(0, app)])
            assert not (union & classes)
            union |= classes
        assert union == set(range(10))


def test_pap_requires_three_apps_ten_classes():
    ds = generate_synthetic(4, 6, 2000, 50, 2.0, seed=0)
    with pytest.raises(InvalidInput):
        partition(ds, spec_for(Distribution.NONIID_PER_APP_PERSISTENT))


def test_partition_deterministic():
    ds = small_dataset()
    spec = spec_for(Distribution.NONIID_PER_USER, seed=11)
    a = partition(ds, spec)
    b = partition(ds, spec)
    assert a.cell_indices == b.cell_indices
    assert a.cell_classes == b.cell_classes


def test_partition_capacity_errors():
    ds = generate_synthetic(4, 10, 400, 50, 2.0, seed=0)
    with pytest.raises(CapacityError):
        partition(ds, spec_for(Distribution.IID, users=10, spa=50))


def test_partition_names_starving_class():
    # classes 6..9 hold only 10 samples each, so the Blue cell (60 needed) starves
    rng = np.random.default_rng(0)
    samples = [
        LabeledSample(rng.normal(size=4), cls)
        for cls in range(10)
        for _ in range(40 if cls < 6 else 10)
    ]
    ds = Dataset(4, 10, samples, [])
    with pytest.raises(CapacityError, match=r"class \d is exhausted"):
        partition(ds, spec_for(Distribution.NONIID_PER_APP_PERSISTENT, users=1, spa=60))


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_partition_laws_property(seed):
    ds = small_dataset(seed=seed % 7)
    for dist in Distribution:
        assignment = partition(ds, spec_for(dist, seed=seed))
        assert_disjoint_and_sized(assignment, 50)
