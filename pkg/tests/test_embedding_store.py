import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seic.embedding_store import (
    MAGIC,
    EmbeddingMatrix,
    extract_embeddings,
    normalize_rows,
    read_embeddings,
    write_embeddings,
)
from seic.encoders import identity_gateway
from seic.embedding_store import EncoderGateway
from seic.errors import DimMismatchError, EncoderError, FormatError, ZeroRowError


class TestNormalizeRows:
    def test_three_four_five(self):
        out = normalize_rows(EmbeddingMatrix.from_array([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-7)
        assert out.normalized

    def test_unit_row_unchanged(self):
        out = normalize_rows(EmbeddingMatrix.from_array([[1.0, 0.0]]))
        assert out.data.tolist() == [[1.0, 0.0]]

    def test_random_rows_unit_norm(self, rng):
        m = EmbeddingMatrix.from_array(rng.standard_normal((100, 17)) * 5)
        norms = np.linalg.norm(normalize_rows(m).data.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1) <= 1e-5)

    def test_ids_preserved(self):
        m = EmbeddingMatrix([[1.0, 1.0], [2.0, 0.0]], ["a", "b"])
        assert normalize_rows(m).ids == ["a", "b"]

    def test_zero_row_named(self):
        m = EmbeddingMatrix([[1.0, 0.0], [0.0, 0.0]], ["ok", "dead"])
        with pytest.raises(ZeroRowError, match="dead"):
            normalize_rows(m)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (6, 5), elements=st.floats(-100, 100, width=32)))
    def test_idempotent(self, data):
        data = data.copy()
        data[:, 0] += 1000.0  # keep rows away from zero
        once = normalize_rows(EmbeddingMatrix.from_array(data))
        twice = normalize_rows(once)
        assert np.array_equal(once.data, twice.data)


class TestPersistence:
    def test_roundtrip_small(self, tmp_path):
        m = EmbeddingMatrix([[1.5, -2.0], [0.0, 3.25], [7.0, 8.0]], ["x", "y", "z"])
        write_embeddings(m, tmp_path / "m.emb")
        back = read_embeddings(tmp_path / "m.emb")
        assert np.array_equal(back.data, m.data) and back.ids == m.ids

    def test_roundtrip_large_bit_exact(self, tmp_path, rng):
        m = EmbeddingMatrix.from_array(rng.standard_normal((1000, 512)))
        write_embeddings(m, tmp_path / "big.emb")
        back = read_embeddings(tmp_path / "big.emb")
        assert back.data.tobytes() == m.data.tobytes()
        assert float(np.max(np.abs(back.data - m.data))) == 0.0

    def test_layout(self, tmp_path):
        m = EmbeddingMatrix([[1.0, 2.0]], ["only"])
        write_embeddings(m, tmp_path / "m.emb")
        raw = (tmp_path / "m.emb").read_bytes()
        assert raw[:8] == MAGIC == b"SEICEMB1"
        assert struct.unpack_from("<II", raw, 8) == (1, 2)
        assert struct.unpack_from("<2f", raw, 16) == (1.0, 2.0)
        (n,) = struct.unpack_from("<I", raw, 24)
        assert raw[28 : 28 + n].startswith(b'{"ids": ["only"]')

    def test_bad_magic(self, tmp_path):
        write_embeddings(EmbeddingMatrix([[1.0]], ["a"]), tmp_path / "m.emb")
        raw = bytearray((tmp_path / "m.emb").read_bytes())
        raw[0:8] = b"NOTMAGIC"
        (tmp_path / "m.emb").write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_embeddings(tmp_path / "m.emb")

    def test_truncated(self, tmp_path, rng):
        write_embeddings(EmbeddingMatrix.from_array(rng.standard_normal((10, 4))), tmp_path / "m.emb")
        raw = (tmp_path / "m.emb").read_bytes()
        (tmp_path / "t.emb").write_bytes(raw[:60])
        with pytest.raises(FormatError):
            read_embeddings(tmp_path / "t.emb")

    def test_manifest_count_mismatch(self, tmp_path):
        payload = b'{"ids": ["a"]}'
        raw = MAGIC + struct.pack("<II", 2, 1) + struct.pack("<2f", 1, 2) + struct.pack("<I", len(payload)) + payload
        (tmp_path / "m.emb").write_bytes(raw)
        with pytest.raises(DimMismatchError):
            read_embeddings(tmp_path / "m.emb")

    def test_concurrent_reads(self, tmp_path, rng):
        m = EmbeddingMatrix.from_array(rng.standard_normal((50, 8)))
        write_embeddings(m, tmp_path / "m.emb")
        results = []
        threads = [threading.Thread(target=lambda: results.append(read_embeddings(tmp_path / "m.emb"))) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(np.array_equal(r.data, m.data) for r in results)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
    def test_roundtrip_property(self, tmp_path_factory, data):
        path = tmp_path_factory.mktemp("rt") / "m.emb"
        m = EmbeddingMatrix.from_array(data)
        write_embeddings(m, path)
        assert read_embeddings(path).data.tobytes() == m.data.tobytes()


class TestExtract:
    def test_batching_invariance(self, rng):
        items = rng.standard_normal((4, 6))
        gw = identity_gateway(6)
        a = extract_embeddings(gw, items, batch_size=1)
        b = extract_embeddings(gw, items, batch_size=4)
        assert np.array_equal(a.data, b.data)
        assert a.normalized and a.ids == ["0", "1", "2", "3"]

    def test_rows_follow_input_order(self, rng):
        items = rng.standard_normal((5, 3))
        out = extract_embeddings(identity_gateway(3), items, batch_size=2)
        np.testing.assert_allclose(out.data, items / np.linalg.norm(items, axis=1, keepdims=True), atol=1e-6)

    def test_empty_items(self):
        with pytest.raises(EncoderError):
            extract_embeddings(identity_gateway(3), [], batch_size=2)

    def test_constant_encoder(self):
        gw = EncoderGateway(lambda b: np.tile([2.0, 0.0, 1.0], (len(b), 1)), None, "const", 3)
        out = extract_embeddings(gw, list(range(7)), batch_size=3)
        assert np.all(out.data == out.data[0])
        np.testing.assert_allclose(out.data[0], np.array([2, 0, 1]) / np.sqrt(5), atol=1e-7)

    def test_failure_names_batch_range(self):
        def boom(batch):
            if 4 in batch:
                raise RuntimeError("bad image")
            return np.ones((len(batch), 2))

        gw = EncoderGateway(boom, None, "flaky", 2)
        with pytest.raises(EncoderError, match=r"\[4, 6\)"):
            extract_embeddings(gw, list(range(8)), batch_size=2)

    def test_wrong_dim(self):
        gw = EncoderGateway(lambda b: np.ones((len(b), 3)), None, "liar", 4)
        with pytest.raises(EncoderError):
            extract_embeddings(gw, [1, 2], batch_size=2)

    def test_text_ids_default_to_strings(self):
        out = extract_embeddings(identity_gateway(8), ["cat", "dog"], modality="text")
        assert out.ids == ["cat", "dog"]
