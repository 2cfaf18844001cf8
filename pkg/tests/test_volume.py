import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voxel2vec.volume import (DescriptorError, QuantizedVolume, Volume, VolumeDescriptor,
                              VolumeError, gen_abc_flow, load_raw_volume, quantize, symbolize,
                              symbolize_collection, write_raw_volume)


def _descriptor(tmp_path, dims, dtype, payload: bytes, byte_order="little"):
    (tmp_path / "a.raw").write_bytes(payload)
    return VolumeDescriptor(dims, dtype, byte_order, {"a": "a.raw"}, base_dir=tmp_path)


class TestLoadRaw:
    def test_float32_read_back(self, tmp_path):
        d = _descriptor(tmp_path, (2, 2, 1), "float32", np.arange(4, dtype="<f4").tobytes())
        v = load_raw_volume(d, "a")
        assert v.min == 0 and v.max == 3
        assert v.data.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]

    def test_size_mismatch(self, tmp_path):
        d = _descriptor(tmp_path, (2, 2, 2), "float32", np.arange(4, dtype="<f4").tobytes())
        with pytest.raises(DescriptorError):
            load_raw_volume(d, "a")

    def test_uint8_bytes(self, tmp_path):
        # oracle: the two bytes 0x00 0xff are the values 0 and 255
        d = _descriptor(tmp_path, (2, 1, 1), "uint8", b"\x00\xff")
        assert load_raw_volume(d, "a").data.ravel().tolist() == [0.0, 255.0]

    def test_big_endian_uint16(self, tmp_path):
        d = _descriptor(tmp_path, (2, 1, 1), "uint16", b"\x01\x00\x00\x02", byte_order="big")
        assert load_raw_volume(d, "a").data.ravel().tolist() == [256.0, 2.0]

    def test_missing_file(self, tmp_path):
        d = VolumeDescriptor((1, 1, 1), variables={"a": "nope.raw"}, base_dir=tmp_path)
        with pytest.raises(OSError):
            load_raw_volume(d, "a")

    def test_unknown_variable(self, tmp_path):
        d = _descriptor(tmp_path, (1, 1, 1), "uint8", b"\x00")
        with pytest.raises(DescriptorError):
            load_raw_volume(d, "b")

    def test_x_fastest_layout(self, tmp_path):
        arr = np.arange(24, dtype=np.float64).reshape(4, 3, 2)  # nz=4, ny=3, nx=2
        write_raw_volume(arr, tmp_path / "a.raw", "float64")
        d = VolumeDescriptor((2, 3, 4), "float64", variables={"a": "a.raw"}, base_dir=tmp_path)
        v = load_raw_volume(d, "a")
        assert v.dims == (2, 3, 4)
        assert v.data[1, 2, 0] == arr[1, 2, 0]

    def test_descriptor_round_trip(self, tmp_path):
        child = VolumeDescriptor((2, 2, 2), variables={"s": "t0/s.raw"}, time_step=0.0)
        d = VolumeDescriptor((2, 2, 2), variables={}, time_steps=[child])
        d.save(tmp_path / "d.json")
        back = VolumeDescriptor.load(tmp_path / "d.json")
        assert back.to_dict() == d.to_dict()
        assert [label for label, _ in back.members()] == ["0"]

    def test_children_inherit_dims(self, tmp_path):
        doc = {"dims": [2, 1, 1], "dtype": "uint8", "ensemble": {"m": {"variables": {"a": "a.raw"}}}}
        (tmp_path / "d.json").write_text(json.dumps(doc))
        d = VolumeDescriptor.load(tmp_path / "d.json")
        assert d.ensemble["m"].dims == (2, 1, 1)
        assert d.ensemble["m"].dtype == "uint8"

    def test_bad_dims(self):
        with pytest.raises(VolumeError):
            VolumeDescriptor((0, 1, 1))


class TestQuantize:
    def test_closed_form_bins(self):
        q = quantize(Volume.from_array(np.array([0.0, 0.5, 1.0])), 4)
        assert q.levels.ravel().tolist() == [0, 2, 3]

    def test_constant_volume(self):
        q = quantize(Volume.from_array(np.full((2, 2, 2), 7.0)), 5)
        assert np.all(q.levels == 0)
        q1 = quantize(Volume.from_array(np.full((2, 2, 2), 7.0)), 1)
        assert np.all(q1.levels == 0)

    def test_bad_R(self):
        v = Volume.from_array(np.array([0.0, 1.0]))
        with pytest.raises(VolumeError):
            quantize(v, 0)
        with pytest.raises(VolumeError):
            quantize(v, 1)

    def test_uniform_occupancy(self):
        rng = np.random.default_rng(3)
        T, R = 200_000, 32
        q = quantize(Volume.from_array(rng.random(T)), R)
        occ = np.bincount(q.levels.ravel(), minlength=R)
        # binomial oracle: each bin has mean T/R and sd sqrt(T p (1 - p))
        p = 1.0 / R
        sd = math.sqrt(T * p * (1 - p))
        assert np.all(np.abs(occ - T * p) <= 5 * sd)

    def test_global_bounds(self):
        v = Volume.from_array(np.array([0.25, 0.5]))
        q = quantize(v, 4, bounds=(0.0, 1.0))
        assert q.levels.ravel().tolist() == [1, 2]

    @given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e6, 1e6)),
           st.integers(2, 300))
    def test_monotone_and_in_range(self, data, R):
        q = quantize(Volume.from_array(data), R).levels.ravel()
        assert q.min() >= 0 and q.max() < R
        order = np.argsort(data, kind="stable")
        assert np.all(np.diff(q[order]) >= 0)


class TestSymbolize:
    def test_dense_univariate(self):
        q = QuantizedVolume((4, 1, 1), np.array([[[2, 0, 1, 3]]]), 4)
        table, sv = symbolize([q])
        assert table.size == 4
        # first-occurrence order
        assert table.combos[:, 0].tolist() == [2, 0, 1, 3]
        assert sv.ids.ravel().tolist() == [0, 1, 2, 3]

    def test_two_variables(self):
        a = QuantizedVolume((2, 1, 1), np.array([[[0, 1]]]), 2)
        b = QuantizedVolume((2, 1, 1), np.array([[[0, 1]]]), 2)
        table, sv = symbolize([a, b])
        assert table.size == 2
        assert {tuple(r) for r in table.combos} == {(0, 0), (1, 1)}
        assert table.labels() == ["0_0", "1_1"]

    def test_dim_mismatch(self):
        a = QuantizedVolume((2, 1, 1), np.zeros((1, 1, 2), dtype=np.int64), 2)
        b = QuantizedVolume((1, 2, 1), np.zeros((1, 2, 1), dtype=np.int64), 2)
        with pytest.raises(VolumeError):
            symbolize([a, b])

    def test_abc_counting(self):
        s1 = gen_abc_flow(dims=(64, 64, 64))[3]
        table, sv = symbolize([quantize(s1, 256)])
        assert table.size <= 256
        assert table.total == 64 ** 3
        # counting oracle: distinct levels of the quantized grid
        levels = quantize(s1, 256).levels
        assert table.size == np.unique(levels).size
        assert np.array_equal(np.sort(table.frequencies), np.sort(np.bincount(levels.ravel())[np.unique(levels)]))

    def test_wide_keys(self):
        # 8 variables at R=300 do not fit in an int64 key
        rng = np.random.default_rng(0)
        qs = [QuantizedVolume((5, 1, 1), rng.integers(0, 300, (1, 1, 5)), 300) for _ in range(8)]
        table, sv = symbolize(qs)
        assert np.array_equal(sv.levels().reshape(5, 8), np.stack([q.levels.ravel() for q in qs], 1))

    def test_encode_onto_table(self):
        q = QuantizedVolume((3, 1, 1), np.array([[[1, 0, 1]]]), 2)
        table, sv = symbolize([q])
        other = table.encode([QuantizedVolume((2, 1, 1), np.array([[[0, 1]]]), 2)])
        assert other.ids.ravel().tolist() == [1, 0]
        with pytest.raises(VolumeError):
            table.encode([QuantizedVolume((1, 1, 1), np.array([[[5]]]), 6)])

    @settings(max_examples=50)
    @given(st.integers(1, 3), st.integers(2, 6), st.data())
    def test_inverse_lookup_and_permutation(self, nvar, R, data):
        shape = (2, 3, 4)
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        levels = [rng.integers(0, R, shape) for _ in range(nvar)]
        qs = [QuantizedVolume((4, 3, 2), lv, R) for lv in levels]
        table, sv = symbolize(qs)
        assert np.array_equal(sv.levels(), np.stack(levels, axis=-1))
        assert table.total == sv.size
        assert np.array_equal(sv.counts(), table.frequencies)
        assert table.size <= min(R ** nvar, sv.size)
        # voxel reordering changes ids but not the multiset of frequencies
        perm = rng.permutation(sv.size)
        qs2 = [QuantizedVolume((4, 3, 2), lv.ravel()[perm].reshape(shape), R) for lv in levels]
        table2, _ = symbolize(qs2)
        freq = {tuple(c): f for c, f in zip(table.combos, table.frequencies)}
        freq2 = {tuple(c): f for c, f in zip(table2.combos, table2.frequencies)}
        assert freq == freq2

    def test_collection_shares_table(self):
        a = Volume.from_array(np.array([0.0, 1.0]))
        b = Volume.from_array(np.array([2.0, 3.0]))
        table, (sa, sb) = symbolize_collection([[a], [b]], 4)
        assert sa.table is sb.table
        # global bounds [0, 3]: values 0, 1, 2, 3 fall into levels 0, 1, 2, 3
        assert table.combos[:, 0].tolist() == [0, 1, 2, 3]
        assert sb.ids.ravel().tolist() == [2, 3]


class TestABC:
    def test_origin(self):
        vx, vy, vz, s1 = gen_abc_flow(math.sqrt(3), math.sqrt(2), 1.0, t=0, dims=(4, 4, 4))
        assert vx.data[0, 0, 0] == 1.0
        assert vy.data[0, 0, 0] == pytest.approx(math.sqrt(3), abs=1e-15)
        assert vz.data[0, 0, 0] == pytest.approx(math.sqrt(2), abs=1e-15)
        # hand arithmetic: sqrt(1 + 3 + 2)
        assert s1.data[0, 0, 0] == pytest.approx(math.sqrt(6), abs=1e-15)

    @pytest.mark.parametrize("variant", ["faithful", "symmetric"])
    @pytest.mark.parametrize("t", [10.0, 20.0, 30.0])
    def test_time_term_vanishes(self, variant, t):
        base = gen_abc_flow(t=0.0, dims=(8, 8, 8), variant=variant)
        other = gen_abc_flow(t=t, dims=(8, 8, 8), variant=variant)
        for a, b in zip(base, other):
            assert np.array_equal(a.data, b.data)

    def test_t_and_t_plus_20(self):
        for t in (10.0, 40.0):
            a = gen_abc_flow(t=t, dims=(6, 6, 6))
            b = gen_abc_flow(t=t + 20, dims=(6, 6, 6))
            assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_variants_differ_off_multiples(self):
        f = gen_abc_flow(t=5.0, dims=(8, 8, 8), variant="faithful")
        s = gen_abc_flow(t=5.0, dims=(8, 8, 8), variant="symmetric")
        assert np.array_equal(f[0].data, s[0].data)
        assert not np.array_equal(f[1].data, s[1].data)

    def test_grid_dims(self):
        vx = gen_abc_flow(dims=(5, 6, 7))[0]
        assert vx.dims == (5, 6, 7) and vx.data.shape == (7, 6, 5)

    def test_bad_dims_and_variant(self):
        with pytest.raises(VolumeError):
            gen_abc_flow(dims=(0, 4, 4))
        with pytest.raises(VolumeError):
            gen_abc_flow(variant="other")
