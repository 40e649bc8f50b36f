from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from potqat.checkpoint import Checkpoint
from potqat.errors import DimensionError
from potqat.model import ModelConfig, model_init
from potqat.qat import QatConfig, calibrate_ptq, export_pot4, prepare, to_checkpoint
from potqat.quant import PackedPotTensor, make_code, pack_codes
from potqat.shift import (BENCH_HEADER, bench_csv, bench_matmul, model_size_bytes, oracle_matmul, shift_matmul,
                          shift_matmul_reference, size_report, synthetic_size_report, ulp_distance)

from oracles import matmul_loops


def identity_times_two(n):
    codes = np.zeros((n, n), dtype=np.uint8)
    codes[np.arange(n), np.arange(n)] = make_code(False, 1)
    return PackedPotTensor((n, n), 1.0, pack_codes(codes))


def test_identity_times_two():
    x = np.random.default_rng(0).standard_normal((5, 6)).astype(np.float32)
    assert np.array_equal(shift_matmul(x, identity_times_two(6)), 2 * x)


def test_all_zero_codes_give_zero():
    W = PackedPotTensor((4, 3), 0.5, bytes(6))
    assert not shift_matmul(np.ones((2, 4), np.float32), W).any()


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        shift_matmul(np.ones((2, 3), np.float32), identity_times_two(4))


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.sampled_from([7, 9, 11, 15]),
       st.integers(0, 2**32 - 1))
def test_matches_dequantize_then_multiply_within_2_ulp(m, k, n, levels, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, k)).astype(np.float32)
    W = PackedPotTensor.from_array(rng.standard_normal((k, n)).astype(np.float32), levels)
    assert ulp_distance(shift_matmul(x, W), oracle_matmul(x, W)).max() <= 2


def test_reference_kernel_agrees_and_multiplies_only_by_scale():
    rng = np.random.default_rng(1)
    m, k, n = 3, 7, 4
    x = rng.standard_normal((m, k))
    W = PackedPotTensor.from_array(rng.standard_normal((k, n)).astype(np.float32), 15)
    ops = Counter()
    out = shift_matmul_reference(x.tolist(), W, ops)
    expect = matmul_loops(x.tolist(), W.dequantize(np.float64).tolist())
    np.testing.assert_allclose(out, expect, rtol=1e-12)
    nonzero = int(np.count_nonzero(W.unpack() & 0b0111))
    # weights are applied by exponent addition; the only multiplies are one per output by the scale
    assert ops["mul"] == m * n
    assert ops["ldexp"] == m * nonzero
    assert ops["add"] == m * nonzero


def test_weight_path_never_multiplies_in_the_reference_kernel():
    class CountingFloat(float):
        muls = 0

        def __mul__(self, other):
            CountingFloat.muls += 1
            return CountingFloat(float(self) * other)

        __rmul__ = __mul__

    W = PackedPotTensor.from_array(np.random.default_rng(2).standard_normal((6, 5)).astype(np.float32), 15)
    x = [[CountingFloat(v) for v in row] for row in np.random.default_rng(3).standard_normal((2, 6))]
    shift_matmul_reference(x, W)
    # ldexp turns the activation into a plain float, so none of its products are on the weight path
    assert CountingFloat.muls == 0


def test_ulp_distance():
    a = np.float32(1.0)
    assert ulp_distance(a, np.nextafter(a, np.float32(2))) == 1
    assert ulp_distance(np.float32(0.0), np.float32(-0.0)) == 0
    assert ulp_distance(np.float32(-1e-45), np.float32(1e-45)) == 2


# -- size accounting ------------------------------------------------------------

def test_synthetic_124m_accounting():
    f32 = synthetic_size_report(124_000_000)
    assert f32.float_bytes == 496_000_000
    assert f32.code_bytes == 62_000_000 and f32.total_bytes == 62_000_004
    assert f32.saving == pytest.approx(0.875, abs=1e-7)
    lines = "\n".join(f32.lines())
    assert "496.000 MB" in lines and "62.000 MB" in lines and "87.5000%" in lines


def test_desk_model_saving_is_exactly_seven_eighths():
    cfg = ModelConfig(vocab_size=65, n_layer=4, n_head=4, n_embd=128, block_size=128)
    pm = calibrate_ptq(prepare(cfg, model_init(cfg, 0), QatConfig()))
    packed = export_pot4(to_checkpoint(pm))
    rep = size_report(packed, "pot4")
    assert rep.quantized_tensors == 17
    assert rep.code_bytes * 8 == rep.quantized_params * 4
    assert rep.quantized_saving == 0.875
    assert rep.other_bytes == 4 * (rep.param_count - rep.quantized_params)
    assert model_size_bytes(packed, "f32") == 4 * rep.param_count
    assert model_size_bytes(packed, "pot4") == rep.code_bytes + 4 * 17 + rep.other_bytes


def test_float_checkpoint_accounts_matmul_weights():
    cfg = ModelConfig(vocab_size=10, n_layer=1, n_head=1, n_embd=4, block_size=4)
    p = model_init(cfg, 0)
    rep = size_report(Checkpoint(cfg.to_dict(), {k: v.data for k, v in p.items()}))
    assert rep.quantized_tensors == 5


# -- bench ----------------------------------------------------------------------

def test_bench_report_well_formed():
    rows = bench_matmul([(4, 8, 8), (3, 5, 7)], repeats=1)
    text = bench_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == BENCH_HEADER == "m,k,n,float_ns,shift_ns,ratio"
    assert len(lines) == 3
    for line, size in zip(lines[1:], [(4, 8, 8), (3, 5, 7)]):
        f = line.split(",")
        assert tuple(int(v) for v in f[:3]) == size
        assert int(f[3]) > 0 and int(f[4]) > 0 and float(f[5]) > 0
    assert all(r.max_ulp <= 2 for r in rows)


def test_bench_rejects_bad_sizes():
    with pytest.raises(ValueError):
        bench_matmul([(0, 2, 2)])
    with pytest.raises(ValueError):
        bench_matmul([(1, 2, 2)], repeats=0)
