import numpy as np
import pytest

from spikebar.container import read_container, write_container
from spikebar.crossbar import (AdcModel, CrossbarConfig, PROGRAM_MAGIC,
                               PROGRAM_VERSION, adc_sample, bitline_mac,
                               cell_level_conv, ideal_adc_bits, program,
                               program_from_entries, program_shared_column,
                               program_split_columns, program_to_entries,
                               shift_add, simulate_matvec)
from spikebar.quant import QuantizedTensor
from spikebar.tensor_ops import grouped_conv


def random_wq(rng, n_in, n_out, bits=4):
    ql = 2 ** (bits - 1) - 1
    vals = rng.integers(-ql - 1, ql + 1, size=(n_in, n_out))
    return QuantizedTensor(vals, 0.1, bits)


def cfg(mapping, xbar=32, nb=4, adc=None):
    return CrossbarConfig(xbar=xbar, nb_w=nb, mapping=mapping,
                          adc=adc or AdcModel("sa1"))


class TestProgramming:
    def test_positive_weight_planes_shared(self):
        wq = QuantizedTensor(np.array([[3]]), 0.1, 4)
        prog = program_shared_column(wq, cfg("shared"))
        arr = prog.arrays[0]
        # plane columns LSB-first on the positive row; negative row all off
        np.testing.assert_array_equal(arr.cells[0], [1, 1, 0, 0])
        assert not arr.cells[1].any()

    def test_negative_weight_planes_shared(self):
        wq = QuantizedTensor(np.array([[-1]]), 0.1, 4)
        prog = program_shared_column(wq, cfg("shared"))
        arr = prog.arrays[0]
        assert not arr.cells[0].any()
        np.testing.assert_array_equal(arr.cells[1], [1, 0, 0, 0])

    def test_split_mapping_uses_column_rails(self):
        wq = QuantizedTensor(np.array([[-1]]), 0.1, 4)
        prog = program_split_columns(wq, cfg("split"))
        arr = prog.arrays[0]
        assert arr.cells.shape[0] == 1
        np.testing.assert_array_equal(arr.cells[0], [0, 0, 0, 0, 1, 0, 0, 0])
        np.testing.assert_array_equal(arr.col_sign[:4], [1, 1, 1, 1])
        np.testing.assert_array_equal(arr.col_sign[4:], [-1, -1, -1, -1])

    @pytest.mark.parametrize("mapping", ["shared", "split"])
    def test_reconstruction_property(self, mapping):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n_in = int(rng.integers(1, 70))
            n_out = int(rng.integers(1, 40))
            wq = random_wq(rng, n_in, n_out)
            prog = program(wq, cfg(mapping))
            np.testing.assert_array_equal(prog.reconstruct(), wq.values)

    def test_eight_bit_weights(self):
        rng = np.random.default_rng(1)
        wq = random_wq(rng, 20, 6, bits=8)
        prog = program(wq, cfg("split", nb=8))
        np.testing.assert_array_equal(prog.reconstruct(), wq.values)

    def test_wrong_width_rejected(self):
        wq = QuantizedTensor(np.array([[1]]), 0.1, 8)
        with pytest.raises(ValueError):
            program(wq, cfg("shared", nb=4))


class TestBitlineMac:
    def test_zero_spikes_zero_current(self):
        rng = np.random.default_rng(2)
        prog = program(random_wq(rng, 8, 4), cfg("split"))
        arr = prog.arrays[0]
        assert not bitline_mac(arr, np.zeros(arr.wordlines, dtype=int)).any()

    def test_one_hot_selects_row(self):
        rng = np.random.default_rng(3)
        prog = program(random_wq(rng, 8, 4), cfg("split"))
        arr = prog.arrays[0]
        for r in range(arr.wordlines):
            spikes = np.zeros(arr.wordlines, dtype=int)
            spikes[r] = 1
            np.testing.assert_array_equal(bitline_mac(arr, spikes),
                                          arr.cells[r].astype(np.int64))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for mapping in ("shared", "split"):
            prog = program(random_wq(rng, 16, 5), cfg(mapping))
            arr = prog.arrays[0]
            spikes = rng.integers(0, 2, size=arr.wordlines)
            want = np.zeros(arr.cells.shape[1], dtype=np.int64)
            for r in range(arr.cells.shape[0]):
                s = spikes[r // arr.rows_per_input]
                for c in range(arr.cells.shape[1]):
                    want[c] += int(s) * int(arr.row_sign[r]) * int(arr.cells[r, c])
            np.testing.assert_array_equal(bitline_mac(arr, spikes), want)

    def test_length_mismatch(self):
        rng = np.random.default_rng(5)
        prog = program(random_wq(rng, 8, 4), cfg("split"))
        with pytest.raises(Exception):
            bitline_mac(prog.arrays[0], np.zeros(3, dtype=int))


class TestAdcSample:
    def test_sign_table(self):
        out = adc_sample(np.array([-3, 0, 5]), AdcModel("sa1"), "shared")
        np.testing.assert_array_equal(out, [-1, 0, 1])

    def test_heaviside_table(self):
        out = adc_sample(np.array([-3, 0, 5]), AdcModel("sa1"), "split")
        np.testing.assert_array_equal(out, [0, 0, 1])

    def test_hp_full_scale_is_exact(self):
        # 5-bit over [0, 32]: 32 -> code 31 -> 31 * 32/31 == 32
        out = adc_sample(np.array([32]), AdcModel("hp", bits=5), "split", full_scale=32)
        assert out[0] == pytest.approx(32.0)

    def test_hp_rounding_steps(self):
        model = AdcModel("hp", bits=5)
        step = 32 / 31
        for v in [0, 1, 7, 15, 30]:
            out = adc_sample(np.array([float(v)]), model, "split", full_scale=32)
            code = np.floor(np.abs(v / step) + 0.5)
            assert out[0] == pytest.approx(code * step)

    def test_hp_clamps_above_full_scale(self):
        out = adc_sample(np.array([100.0]), AdcModel("hp", bits=5), "split", full_scale=32)
        assert out[0] == pytest.approx(32.0)

    def test_ideal_is_identity(self):
        x = np.array([-7, 0, 13])
        np.testing.assert_array_equal(adc_sample(x, AdcModel("ideal"), "shared"), x)

    def test_one_bit_bound(self):
        rng = np.random.default_rng(6)
        x = rng.integers(-100, 100, size=50)
        assert np.abs(adc_sample(x, AdcModel("sa1"), "shared")).max() <= 1
        assert np.abs(adc_sample(x, AdcModel("sa1"), "split")).max() <= 1


class TestShiftAdd:
    def test_lsb_first_weights(self):
        assert shift_add([np.array([1]), np.array([1]), np.array([0]), np.array([0])])[0] == 3

    def test_single_plane_identity(self):
        np.testing.assert_array_equal(shift_add([np.array([4, 5])]), [4, 5])


class TestIdealAdcBits:
    @pytest.mark.parametrize("n_wl,sb,want", [(64, 1, 6), (32, 1, 5), (128, 1, 7)])
    def test_formula(self, n_wl, sb, want):
        assert ideal_adc_bits(n_wl, sb) == want

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            ideal_adc_bits(48)


class TestSimulateMatvec:
    @pytest.mark.parametrize("mapping", ["shared", "split"])
    @pytest.mark.parametrize("xbar", [32, 64, 128])
    def test_ideal_pipeline_equals_direct_mvm(self, mapping, xbar):
        rng = np.random.default_rng(hash((mapping, xbar)) % 2 ** 32)
        for _ in range(20):
            n_in = int(rng.integers(1, xbar * 2))
            n_out = int(rng.integers(1, 20))
            wq = random_wq(rng, n_in, n_out)
            prog = program(wq, cfg(mapping, xbar=xbar))
            spikes = rng.integers(0, 2, size=n_in)
            got = simulate_matvec(prog, spikes, adc=AdcModel("ideal"))
            np.testing.assert_array_equal(got, spikes @ wq.values)

    def test_mapping_equivalence_of_sign_information(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            wq = random_wq(rng, 12, 4)
            spikes = rng.integers(0, 2, size=12)
            shared = program(wq, cfg("shared"))
            split = program(wq, cfg("split"))
            arr_sh, arr_sp = shared.arrays[0], split.arrays[0]
            mac_sh = bitline_mac(arr_sh, spikes)
            mac_sp = bitline_mac(arr_sp, spikes)
            for c in range(arr_sh.cells.shape[1]):
                pos = mac_sp[np.flatnonzero((arr_sp.col_out == arr_sh.col_out[c])
                                            & (arr_sp.col_plane == arr_sh.col_plane[c])
                                            & (arr_sp.col_sign == 1))[0]]
                neg = mac_sp[np.flatnonzero((arr_sp.col_out == arr_sh.col_out[c])
                                            & (arr_sp.col_plane == arr_sh.col_plane[c])
                                            & (arr_sp.col_sign == -1))[0]]
                assert np.sign(mac_sh[c]) == np.sign(pos - neg)

    def test_split_zero_input_gives_zero_ps(self):
        rng = np.random.default_rng(8)
        wq = random_wq(rng, 16, 8)
        prog = program(wq, cfg("split"))
        out = simulate_matvec(prog, np.zeros(16, dtype=int))
        assert not out.any()


class TestCellLevelConv:
    def test_ideal_equals_integer_conv(self):
        rng = np.random.default_rng(9)
        x = rng.integers(0, 2, size=(1, 4, 6, 6))
        w = rng.integers(-7, 8, size=(8, 4, 3, 3))
        wq = QuantizedTensor(w, 0.1, 4)
        for mapping in ("shared", "split"):
            got = cell_level_conv(x, wq, cfg(mapping), adc=AdcModel("ideal"))
            np.testing.assert_array_equal(got, grouped_conv(x, w))

    def test_sa1_outputs_are_plane_bounded(self):
        rng = np.random.default_rng(10)
        x = rng.integers(0, 2, size=(1, 4, 6, 6))
        w = rng.integers(-7, 8, size=(8, 4, 3, 3))
        wq = QuantizedTensor(w, 0.1, 4)
        out = cell_level_conv(x, wq, cfg("shared"))
        # shift-add of four +-1 planes is bounded by 15 per group
        assert np.abs(out).max() <= 15 * 4


class TestDumpLoad:
    def test_program_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        wq = random_wq(rng, 40, 12)
        prog = program(wq, cfg("split"))
        meta, arrays = program_to_entries(prog, prefix="l0_")
        path = tmp_path / "prog.sbx"
        write_container(path, PROGRAM_MAGIC, PROGRAM_VERSION,
                        {"layers": [meta]}, arrays)
        version, got_meta, got_arrays = read_container(path, PROGRAM_MAGIC,
                                                       PROGRAM_VERSION)
        loaded = program_from_entries(got_meta["layers"][0], got_arrays, prefix="l0_")
        np.testing.assert_array_equal(loaded.reconstruct(), wq.values)
        for a, b in zip(prog.arrays, loaded.arrays):
            np.testing.assert_array_equal(a.cells, b.cells)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        write_container(path, b"SBXPROG1", 1, {}, {})
        with pytest.raises(Exception, match="magic"):
            read_container(path, b"WRONGMAG", 1)

    def test_future_version_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        write_container(path, b"SBXPROG1", 9, {}, {})
        with pytest.raises(Exception, match="version"):
            read_container(path, b"SBXPROG1", 1)
