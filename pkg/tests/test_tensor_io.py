"""Raw tensor file format: roundtrips and corruption handling."""

import numpy as np
import pytest

from zslvit.errors import FormatError
from zslvit.tensor_io import MAGIC, read_tensor, write_tensor


class TestRoundTrip:
    def test_ranks_roundtrip_bitexact(self, tmp_path):
        rng = np.random.default_rng(0)
        for i, shape in enumerate([(), (7,), (3, 5), (2, 3, 4)]):
            arr = rng.normal(size=shape)
            p = tmp_path / f"t{i}.zvt"
            write_tensor(p, arr)
            back = read_tensor(p)
            assert back.shape == arr.shape
            assert np.array_equal(back, np.asarray(arr, dtype=np.float64))

    def test_header_layout(self, tmp_path):
        p = tmp_path / "t.zvt"
        write_tensor(p, np.zeros((3, 5)))
        blob = p.read_bytes()
        assert blob[:8] == MAGIC
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:20], "little") == 3
        assert int.from_bytes(blob[20:28], "little") == 5
        assert len(blob) == 28 + 15 * 8

    def test_writes_are_deterministic(self, tmp_path):
        arr = np.random.default_rng(1).normal(size=(4, 4))
        a, b = tmp_path / "a.zvt", tmp_path / "b.zvt"
        write_tensor(a, arr)
        write_tensor(b, arr)
        assert a.read_bytes() == b.read_bytes()


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.zvt"
        write_tensor(p, np.zeros(3))
        blob = bytearray(p.read_bytes())
        blob[:8] = b"NOTMAGIC"
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            read_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.zvt"
        write_tensor(p, np.zeros((4, 4)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError, match="payload"):
            read_tensor(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "t.zvt"
        p.write_bytes(MAGIC + b"\x05")
        with pytest.raises(FormatError):
            read_tensor(p)
