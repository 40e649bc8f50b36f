import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from potqat.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from potqat.errors import FormatError
from potqat.model import ModelConfig, model_init, param_count
from potqat.quant import PackedPotTensor


def small_ckpt():
    cfg = ModelConfig(vocab_size=9, n_layer=1, n_head=2, n_embd=8, block_size=8)
    p = model_init(cfg, 0)
    tensors = {k: v.data for k, v in p.items()}
    tensors["lm_head.weight"] = PackedPotTensor.from_array(tensors["lm_head.weight"], 15)
    return Checkpoint(cfg.to_dict(), tensors, {"iter": 3, "val_loss": 1.5, "note": "ünï"})


def test_roundtrip_and_resave_byte_identical(tmp_path):
    ck = small_ckpt()
    n = save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", back)
    a, b = (tmp_path / "a.ckpt").read_bytes(), (tmp_path / "b.ckpt").read_bytes()
    assert a == b and len(a) == n
    assert back.meta == ck.meta and back.config == ck.config
    for k, v in ck.tensors.items():
        w = back.tensors[k]
        if isinstance(v, PackedPotTensor):
            assert w == v
        else:
            assert w.tobytes() == v.tobytes() and w.shape == v.shape


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                  elements=st.floats(width=32, allow_nan=False)),
       st.sampled_from([7, 11, 15]))
def test_bit_exact_for_arbitrary_tensors(w, levels):
    ck = Checkpoint({"k": 1}, {"f": w, "p": PackedPotTensor.from_array(np.nan_to_num(w, posinf=1, neginf=-1), levels)})
    back = from_bytes(to_bytes(ck))
    assert back.tensors["f"].tobytes() == w.tobytes()
    assert back.tensors["p"] == ck.tensors["p"]
    assert to_bytes(back) == to_bytes(ck)


def test_f32_file_size_is_four_bytes_per_param_plus_header(tmp_path):
    cfg = ModelConfig(vocab_size=65, n_layer=2, n_head=2, n_embd=32, block_size=32)
    p = model_init(cfg, 0)
    ck = Checkpoint(cfg.to_dict(), {k: v.data for k, v in p.items()})
    size = save_checkpoint(tmp_path / "f.ckpt", ck)
    overhead = size - 4 * param_count(p)
    assert 0 < overhead < 2000


def test_pot4_section_size():
    w = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    base = len(to_bytes(Checkpoint({}, {})))
    blob = to_bytes(Checkpoint({}, {"w": PackedPotTensor.from_array(w)}))
    header = 4 + 1 + 3 + 2 * 4  # name length + name, dtype/levels/ndim, dims
    assert len(blob) - base == header + 4 + (35 + 1) // 2


def _header_len(blob):
    # magic, version, config, meta, count
    pos = 6
    for _ in range(2):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4 + n
    return pos + 4


def test_bad_magic_version_and_truncation():
    blob = to_bytes(small_ckpt())
    with pytest.raises(FormatError, match="magic.*offset 0"):
        from_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(FormatError, match="version.*offset 5"):
        from_bytes(blob[:5] + b"\x02" + blob[6:])
    for cut in (3, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError, match="offset"):
            from_bytes(blob[:cut])
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(blob + b"\0")


def test_bad_dtype_and_codes_report_offsets():
    blob = bytearray(to_bytes(Checkpoint({}, {"w": PackedPotTensor.from_array(np.ones((2, 2), np.float32))})))
    start = _header_len(blob)
    dtype_at = start + 4 + 1
    bad = bytearray(blob)
    bad[dtype_at] = 7
    with pytest.raises(FormatError, match=f"dtype.*offset {dtype_at}"):
        from_bytes(bytes(bad))
    bad = bytearray(blob)
    bad[-1] = 0b1000_1000  # negative-zero codes
    with pytest.raises(FormatError, match=f"offset {len(blob) - 2}"):
        from_bytes(bytes(bad))
    bad = bytearray(blob)
    bad[dtype_at + 1] = 8  # even level count
    with pytest.raises(FormatError, match="level"):
        from_bytes(bytes(bad))


def test_corrupt_json_rejected():
    blob = bytearray(to_bytes(Checkpoint({"a": 1}, {})))
    blob[11] = ord("{")  # {"a":1} -> {{a":1}
    with pytest.raises(FormatError, match="config"):
        from_bytes(bytes(blob))
