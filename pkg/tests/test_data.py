"""Synthetic mixtures, IDX parsing and leakage-safe split plans."""

import struct

import numpy as np
import pytest

from bitleak import data, netcore
from bitleak.data import (CalibrationSet, Dataset, FormatError, gen_gaussian_mixture, gen_hard_mixture,
                          load_idx, make_split_plan, nearest_centroid_accuracy, save_idx, simplex_means)


def write_idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))
    return path


class TestMixtures:
    def test_simplex_pairwise_distances(self):
        means = simplex_means(10, 32, 3.0)
        d = np.linalg.norm(means[:, None] - means[None], axis=2)
        np.testing.assert_allclose(d[~np.eye(10, dtype=bool)], 3.0, rtol=1e-12)

    def test_simplex_needs_room(self):
        with pytest.raises(ValueError):
            simplex_means(5, 3, 1.0)

    def test_deterministic_bytes(self):
        a = gen_gaussian_mixture(4, 6, 20, 2.0, seed=11)
        b = gen_gaussian_mixture(4, 6, 20, 2.0, seed=11)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert gen_gaussian_mixture(4, 6, 20, 2.0, seed=12).inputs.tobytes() != a.inputs.tobytes()

    def test_balanced_labels(self):
        ds = gen_gaussian_mixture(7, 8, 13, 1.0, seed=0)
        np.testing.assert_array_equal(np.bincount(ds.labels), 13)

    def test_zero_separation_is_chance(self):
        ds = gen_gaussian_mixture(4, 8, 100, 0.0, seed=1)
        plan = make_split_plan(ds, 0, 1)
        net, _ = netcore.train(netcore.build_mlp(8, 4, (32,), seed=0), ds.subset(plan.target_train),
                               netcore.TrainRecipe(epochs=20))
        assert netcore.evaluate(net, ds.subset(plan.held_out)) <= 0.25 + 0.05

    def test_nearest_centroid_oracle_at_easy_separation(self):
        # the oracle that motivates the easy task's separation
        ds = data.gen_easy_mixture(seed=0)
        plan = make_split_plan(ds, 0, 0)
        assert nearest_centroid_accuracy(ds.subset(plan.target_train), ds.subset(plan.held_out)) >= 0.85

    def test_hard_two_class_degenerate_call(self):
        hard = gen_hard_mixture(2, 4, 10, seed=3)
        plain = gen_gaussian_mixture(2, 4, 10, data.HARD_SEP, seed=3)
        np.testing.assert_array_equal(hard.inputs, plain.inputs)
        assert hard.classes == 2

    @pytest.mark.parametrize("kwargs", [dict(k=1, d=2), dict(k=2, d=0)])
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(ValueError):
            gen_gaussian_mixture(n_per_class=5, sep=1.0, **kwargs)

    def test_dataset_label_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), [0, 3], "x", 3)


class TestIdx:
    def test_hand_decoded_bytes(self, tmp_path):
        img = write_idx(tmp_path / "img", 0x803, (2, 2, 2), [0, 255, 0, 255, 255, 0, 255, 0])
        lab = write_idx(tmp_path / "lab", 0x801, (2,), [3, 1])
        ds = load_idx(img, lab)
        np.testing.assert_array_equal(ds.inputs, [[0, 1, 0, 1], [1, 0, 1, 0]])
        np.testing.assert_array_equal(ds.labels, [3, 1])

    def test_bad_magic_names_offset(self, tmp_path):
        img = write_idx(tmp_path / "img", 0x0, (1, 1, 1), [0])
        lab = write_idx(tmp_path / "lab", 0x801, (1,), [0])
        with pytest.raises(FormatError, match="offset 0") as err:
            load_idx(img, lab)
        assert err.value.offset == 0

    def test_empty_label_file(self, tmp_path):
        img = write_idx(tmp_path / "img", 0x803, (1, 1, 1), [7])
        (tmp_path / "lab").write_bytes(b"")
        with pytest.raises(FormatError):
            load_idx(img, tmp_path / "lab")

    def test_truncated_payload(self, tmp_path):
        img = write_idx(tmp_path / "img", 0x803, (2, 2, 2), [1, 2, 3])
        lab = write_idx(tmp_path / "lab", 0x801, (2,), [0, 1])
        with pytest.raises(FormatError, match="truncated"):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img = write_idx(tmp_path / "img", 0x803, (2, 1, 1), [1, 2])
        lab = write_idx(tmp_path / "lab", 0x801, (3,), [0, 1, 1])
        with pytest.raises(FormatError):
            load_idx(img, lab)

    def test_round_trip_value_exact(self, tmp_path):
        ds = gen_gaussian_mixture(3, 6, 10, 2.0, seed=4)
        unit = Dataset(data.to_unit_bytes(ds.inputs), ds.labels, "u", 3)
        save_idx(unit, tmp_path / "i", tmp_path / "l", shape=(2, 3))
        back = load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(back.inputs, unit.inputs)
        np.testing.assert_array_equal(back.labels, unit.labels)

    def test_header_is_big_endian(self, tmp_path):
        unit = Dataset(np.array([[0.0, 1.0]]), [0], "u", 1)
        save_idx(unit, tmp_path / "i", tmp_path / "l")
        raw = (tmp_path / "i").read_bytes()
        assert raw[:4] == b"\x00\x00\x08\x03"
        assert raw[4:8] == b"\x00\x00\x00\x01"
        assert raw[-2:] == b"\x00\xff"


class TestSplitPlan:
    def test_sizes(self):
        ds = gen_gaussian_mixture(2, 2, 50, 1.0, seed=0)
        plan = make_split_plan(ds, 16, 0)
        assert len(plan.target_train) == 50 and len(plan.calibration) == 16
        assert set(plan.calibration) <= set(plan.target_train)

    def test_odd_population_floor(self):
        ds = Dataset(np.zeros((7, 1)), np.zeros(7, dtype=int), "z", 1)
        assert len(make_split_plan(ds, 1, 0).target_train) == 3

    def test_calibration_too_large(self):
        ds = gen_gaussian_mixture(2, 2, 10, 1.0, seed=0)
        with pytest.raises(ValueError):
            make_split_plan(ds, 11, 0)

    def test_fixed_across_methods(self):
        ds = gen_gaussian_mixture(3, 4, 30, 2.0, seed=2)
        plan = make_split_plan(ds, 20, 5)
        a, b = CalibrationSet.from_plan(ds, plan), CalibrationSet.from_plan(ds, plan)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(make_split_plan(ds, 20, 5).calibration, plan.calibration)

    def test_no_leakage_scan(self):
        ds = gen_gaussian_mixture(2, 2, 50, 1.0, seed=0)
        for seed in range(10_000):
            plan = make_split_plan(ds, 16, seed)
            assert not np.intersect1d(plan.calibration, plan.held_out).size
            assert not np.intersect1d(plan.target_train, plan.held_out).size

    def test_rejects_leaky_plan(self):
        with pytest.raises(ValueError):
            data.SplitPlan(np.arange(4), np.array([0, 1]), np.array([2]), 0)

    def test_membership_bits(self):
        ds = gen_gaussian_mixture(2, 2, 10, 1.0, seed=0)
        plan = make_split_plan(ds, 4, 1)
        bits = plan.membership()
        assert bits.sum() == 10
        assert all(plan.is_member(i) == bits[i] for i in range(20))

    def test_calibration_provenance_check(self):
        calib = CalibrationSet(np.zeros((2, 1)), np.array([1, 9]))
        with pytest.raises(ValueError):
            calib.check_no_leakage([1, 2, 3])
