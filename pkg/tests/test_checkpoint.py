import json
import os
import struct

import numpy as np
import pytest

from elasticnn import checkpoint as C
from elasticnn import elastic as E
from elasticnn import graph as G
from elasticnn import zoo
from elasticnn.errors import DataError


@pytest.fixture(scope="module")
def stacked():
    m = zoo.build("tinynet", seed=2, dtype=np.float64)
    G.forward(m, np.random.default_rng(0).normal(size=(8, 3, 16, 16)), "train")
    res = E.iterative_pipeline(m, 3, 0.2)
    return m, C.Checkpoint(res.stack.model, res.stack, {"note": "x", "data": {"n": 8}}, [{"epoch": 0, "loss": 1.5}])


class TestRoundTrip:
    def test_bytes_identical(self, stacked):
        _, ck = stacked
        data = C.to_bytes(ck)
        assert C.to_bytes(C.from_bytes(data)) == data

    def test_semantics(self, stacked, tmp_path):
        orig, ck = stacked
        path = tmp_path / "s.ecnn"
        C.save(ck, path)
        back = C.load(path)
        assert E.models_equal(back.model, ck.model)
        assert back.level == 3 and back.depth == 3
        assert back.config == ck.config and back.history == ck.history
        assert back.arch.to_dict() == orig.arch.to_dict()
        for a, b in zip(back.stack.records, ck.stack.records):
            for ga, gb in zip(a.groups, b.groups):
                np.testing.assert_array_equal(ga.dropped, gb.dropped)
                for sa, sb in zip(ga.slices, gb.slices):
                    assert sa.values.dtype == sb.values.dtype and sa.values.tobytes() == sb.values.tobytes()
        assert E.models_equal(back.stack.switch_capacity(0), orig)

    def test_plain_model(self, tmp_path):
        m = zoo.build("tinynet")
        C.save(C.Checkpoint(m), tmp_path / "m.ecnn")
        back = C.load(tmp_path / "m.ecnn")
        assert back.stack is None and back.level == 0
        assert E.models_equal(back.model, m)

    def test_layout(self, stacked):
        _, ck = stacked
        header, payload = C.split_file(C.to_bytes(ck))
        offset = 0
        for row in header["tensors"]:
            assert row["offset"] == offset
            n = int(np.prod(row["shape"], dtype=np.int64)) * np.dtype(row["dtype"]).itemsize
            assert row["length"] == n
            offset += n
        assert offset == len(payload)

    def test_little_endian_payload(self):
        m = G.ModelGraph((1, 1, 1), 2)
        m.add_conv("c", "input", 1, 1, 1, dtype=np.float64)
        m.params["c.weight"].data[...] = 1.0
        _, payload = C.split_file(C.to_bytes(C.Checkpoint(m)))
        assert payload == struct.pack("<d", 1.0)

    def test_stack_model_mismatch(self, stacked):
        _, ck = stacked
        with pytest.raises(ValueError):
            C.Checkpoint(ck.model.copy(), ck.stack)

    def test_atomic_write_leaves_no_temp(self, stacked, tmp_path):
        C.save(stacked[1], tmp_path / "a.ecnn")
        assert os.listdir(tmp_path) == ["a.ecnn"]


class TestCorruption:
    def _bytes(self):
        return C.to_bytes(C.Checkpoint(zoo.build("tinynet")))

    def test_bad_magic(self):
        with pytest.raises(DataError, match="magic"):
            C.from_bytes(b"XXXXX\n" + self._bytes()[6:])

    @pytest.mark.parametrize("cut", [8, 40])
    def test_truncated_header(self, cut):
        with pytest.raises(DataError, match="truncated"):
            C.from_bytes(self._bytes()[:cut])

    def test_truncated_payload(self):
        with pytest.raises(DataError, match="truncated"):
            C.from_bytes(self._bytes()[:-3])

    def test_trailing_bytes(self):
        with pytest.raises(DataError, match="trailing"):
            C.from_bytes(self._bytes() + b"\0")

    def test_overlapping_offsets(self):
        header, payload = C.split_file(self._bytes())
        header["tensors"][1]["offset"] -= 4
        text = json.dumps(header).encode()
        with pytest.raises(DataError, match="expected"):
            C.from_bytes(C.MAGIC + struct.pack("<Q", len(text)) + text + payload)

    def test_wrong_tensor_shape(self):
        header, payload = C.split_file(self._bytes())
        row = next(r for r in header["tensors"] if r["name"] == "param/fc.weight")
        row["shape"] = [row["shape"][1], row["shape"][0] + 1]
        text = json.dumps(header).encode()
        with pytest.raises(DataError):
            C.from_bytes(C.MAGIC + struct.pack("<Q", len(text)) + text + payload)
