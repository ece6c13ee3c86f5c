import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudostrata.core import (LABEL_NAMES, LABELS, REQUIRED_PAIRS, AffineCost, CostSpec, Dataset,
                               DatasetError, RewardMatrix, StratumLabel, label_policy_order, read_csv,
                               responds, validate_dataset, write_csv)

from conftest import make_dataset


class TestStratumLabel:
    def test_order_and_names(self):
        assert [int(g) for g in label_policy_order()] == [0, 1, 2, 3]
        assert LABEL_NAMES == ("00", "01", "10", "11")

    @pytest.mark.parametrize("text", ["00", "01", "10", "11"])
    def test_round_trip(self, text):
        g = StratumLabel.parse(text)
        assert str(g) == text
        assert f"{g}" == text
        assert StratumLabel.from_pair(g.s0, g.s1) is g
        assert StratumLabel.parse(int(g)) is g

    @pytest.mark.parametrize("bad", ["2", "012", "ab", "1 0", True])
    def test_rejects_garbage(self, bad):
        with pytest.raises(ValueError):
            StratumLabel.parse(bad)

    def test_potential_responses(self):
        assert (StratumLabel.S10.s0, StratumLabel.S10.s1) == (1, 0)
        assert (StratumLabel.S01.s0, StratumLabel.S01.s1) == (0, 1)

    def test_responding_pairs(self):
        pairs = {(z, g) for z in (0, 1) for g in LABELS if responds(z, g)}
        assert pairs == set(REQUIRED_PAIRS)


class TestDataset:
    def test_shapes_and_readonly(self):
        d = make_dataset(50, a_dim=2, c_dim=3)
        assert (d.n, d.a_dim, d.c_dim) == (50, 2, 3)
        assert d.x.shape == (50, 5)
        assert d.a_names == ("a_1", "a_2")
        with pytest.raises(ValueError):
            d.y[0] = 1.0

    def test_take_and_rows(self):
        d = make_dataset(20)
        sub = d.take([3, 3, 7])
        assert sub.n == 3
        np.testing.assert_array_equal(sub.y, d.y[[3, 3, 7]])
        rebuilt = Dataset.from_rows(d.rows())
        np.testing.assert_array_equal(rebuilt.x, d.x)

    def test_length_mismatch(self):
        with pytest.raises(DatasetError):
            Dataset([0, 1], [0], [0.0, 0.0], [[0.0], [0.0]], [[0.0], [0.0]])

    def test_split_x(self):
        d = make_dataset(5, a_dim=2, c_dim=1)
        a, c = d.split_x(d.x)
        np.testing.assert_array_equal(a, d.a)
        np.testing.assert_array_equal(c, d.c)


class TestValidation:
    def test_clean_dataset(self, small_data):
        rep = validate_dataset(small_data)
        assert rep.ok and rep.errors == []

    def test_idempotent_and_non_mutating(self, small_data):
        before = small_data.y.copy()
        r1, r2 = validate_dataset(small_data), validate_dataset(small_data)
        assert (r1.errors, r1.warnings) == (r2.errors, r2.warnings)
        np.testing.assert_array_equal(small_data.y, before)

    def test_revenue_without_response(self):
        d = make_dataset(30)
        y = d.y.copy()
        y[np.flatnonzero(d.s == 0)[0]] = 1.0
        rep = validate_dataset(Dataset(d.z, d.s, y, d.a, d.c))
        assert any("revenue without response" in e for e in rep.errors)
        with pytest.raises(DatasetError):
            rep.raise_if_fatal()

    def test_degenerate_arm(self):
        d = make_dataset(40)
        s = np.where(d.z == 1, 1, d.s)
        y = np.where(s == 1, 1.0, 0.0)
        rep = validate_dataset(Dataset(d.z, s, y, d.a, d.c))
        assert any("degenerate response arm" in e for e in rep.errors)

    def test_missing_arm_and_nonbinary(self):
        d = make_dataset(10)
        rep = validate_dataset(Dataset(np.ones(10), d.s, d.y, d.a, d.c))
        assert "control arm absent" in rep.errors
        rep = validate_dataset(Dataset(d.z, d.s * 2, d.y, d.a, d.c))
        assert "response s must be 0/1" in rep.errors

    def test_negative_revenue_is_warning(self):
        d = make_dataset(30)
        y = np.where(d.s == 1, -1.0, 0.0)
        rep = validate_dataset(Dataset(d.z, d.s, y, d.a, d.c))
        assert rep.ok and rep.warnings


class TestCsv:
    def test_round_trip(self, tmp_path):
        d = make_dataset(25, a_dim=2, c_dim=1)
        path = tmp_path / "d.csv"
        write_csv(path, d)
        back = read_csv(path)
        np.testing.assert_array_equal(back.z, d.z)
        np.testing.assert_array_equal(back.y, d.y)
        np.testing.assert_array_equal(back.x, d.x)
        assert back.a_names == d.a_names and back.c_names == d.c_names

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("z,s,y,a_1,c_1\n1,1,2.0,0.1,0.2\n0,0,,0.3,0.1\n")
        with pytest.raises(DatasetError, match="missing field"):
            read_csv(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("z,y,a_1\n1,0,0.5\n")
        with pytest.raises(DatasetError, match="'s'"):
            read_csv(path)

    def test_column_override(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("z,s,y,u,v,w\n1,1,2.0,0.1,0.2,0.3\n0,0,0,0.3,0.1,0.5\n")
        d = read_csv(path, a_cols=["v"], c_cols=["u", "w"])
        assert d.a_names == ("v",) and d.c_names == ("u", "w")
        np.testing.assert_array_equal(d.c[1], [0.3, 0.5])
        with pytest.raises(DatasetError, match="overlap"):
            read_csv(path, a_cols=["u"], c_cols=["u"])


class TestSpecs:
    def test_affine_cost(self):
        c = AffineCost(1.0, (2.0, -1.0))
        np.testing.assert_allclose(c(np.array([[1.0, 1.0], [0.0, 2.0]])), [2.0, -1.0])
        with pytest.raises(ValueError):
            c(np.ones((2, 3)))

    def test_cost_spec_round_trip(self):
        spec = CostSpec(AffineCost(0.5, (0.1,)), AffineCost())
        assert CostSpec.from_dict(spec.to_dict()) == spec
        assert CostSpec.from_dict(None) == CostSpec.zero()

    def test_reward_matrix(self):
        e = np.arange(16.0).reshape(4, 4)
        e[0, 1] = np.nan
        rm = RewardMatrix(e)
        assert rm["10", "11"] == 11.0
        back = RewardMatrix.from_dict(rm.to_dict())
        np.testing.assert_array_equal(back.entries, rm.entries)
        assert back.undefined[0, 1]
        with pytest.raises(ValueError):
            RewardMatrix(np.full((4, 4), np.inf))
        with pytest.raises(ValueError):
            RewardMatrix(np.eye(3))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=16, max_size=16))
    def test_reward_matrix_serialisation(self, vals):
        rm = RewardMatrix(np.array(vals).reshape(4, 4))
        np.testing.assert_array_equal(RewardMatrix.from_dict(rm.to_dict()).entries, rm.entries)
