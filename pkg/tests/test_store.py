import struct

import numpy as np
import pytest

from mdkd.corpus import BOS, EOS, ParallelCorpus, SentencePair
from mdkd.errors import ConfigError, FingerprintMismatch
from mdkd.losses import SoftTargets
from mdkd.model import forward
from mdkd.store import MAGIC, SoftTargetStore, build_soft_target_store, read_store, write_store

from conftest import tiny_model

FP = bytes(range(8))


def random_store(n: int, V: int = 12, K: int = 4, seed: int = 0) -> SoftTargetStore:
    rng = np.random.default_rng(seed)
    store = SoftTargetStore(V, K, FP)
    for i in range(n):
        T = int(rng.integers(1, 8))
        ids = np.stack([rng.choice(V, K, replace=False) for _ in range(T)])
        p = rng.dirichlet(np.ones(K), size=T)
        store.entries[i] = SoftTargets(ids, p)
    return store


class TestRoundTrip:
    def test_thousand_sentences_f32_exact(self, tmp_path):
        store = random_store(1000)
        write_store(store, tmp_path / "s.kdst")
        back = read_store(tmp_path / "s.kdst", FP)
        assert (back.vocab_size, back.k, back.fingerprint, len(back)) == (12, 4, FP, 1000)
        for i, st in store.entries.items():
            np.testing.assert_array_equal(back[i].ids, st.ids)
            np.testing.assert_array_equal(back[i].probs, st.probs.astype(np.float32).astype(np.float64))
            np.testing.assert_allclose(back[i].probs, st.probs, rtol=2 ** -23)

    def test_sparse_indices_sorted_on_disk(self, tmp_path):
        store = random_store(3)
        store.entries = {7: store.entries[0], 2: store.entries[1]}
        write_store(store, tmp_path / "s.kdst")
        back = read_store(tmp_path / "s.kdst")
        assert list(back.entries) == [2, 7]
        assert 7 in back and 0 not in back

    def test_empty_store(self, tmp_path):
        write_store(SoftTargetStore(5, 2, FP), tmp_path / "s.kdst")
        assert len(read_store(tmp_path / "s.kdst")) == 0
        assert (tmp_path / "s.kdst").stat().st_size == 32

    def test_header_fields(self, tmp_path):
        write_store(random_store(2, V=9, K=3), tmp_path / "s.kdst")
        magic, version, V, K, fp, count = struct.unpack_from("<4sIII8sQ", (tmp_path / "s.kdst").read_bytes())
        assert (magic, version, V, K, fp, count) == (MAGIC, 1, 9, 3, FP, 2)


class TestCorruption:
    def test_wrong_fingerprint(self, tmp_path):
        write_store(random_store(5), tmp_path / "s.kdst")
        with pytest.raises(FingerprintMismatch):
            read_store(tmp_path / "s.kdst", b"\xff" * 8)

    def test_corrupted_fingerprint_bytes(self, tmp_path):
        path = tmp_path / "s.kdst"
        write_store(random_store(5), path)
        data = bytearray(path.read_bytes())
        data[16] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(FingerprintMismatch):
            read_store(path, FP)

    def test_vocab_size_check(self):
        with pytest.raises(FingerprintMismatch):
            random_store(1).check_vocab(FP, vocab_size=13)

    @pytest.mark.parametrize("cut", [1, 8, 40])
    def test_truncated(self, tmp_path, cut):
        path = tmp_path / "s.kdst"
        write_store(random_store(5), path)
        path.write_bytes(path.read_bytes()[:-cut])
        with pytest.raises(ConfigError):
            read_store(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "s.kdst"
        write_store(random_store(2), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ConfigError):
            read_store(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "s.kdst"
        write_store(random_store(2), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(ConfigError):
            read_store(path)

    def test_unnormalised_rows_rejected(self, tmp_path):
        store = random_store(2)
        store.entries[1] = SoftTargets(store.entries[1].ids, store.entries[1].probs * 0.5)
        write_store(store, tmp_path / "s.kdst")
        with pytest.raises(ConfigError, match="sum to one"):
            read_store(tmp_path / "s.kdst")

    def test_mixed_k_rejected(self, tmp_path):
        store = random_store(1, K=4)
        store.entries[1] = SoftTargets(np.zeros((1, 2), dtype=int), np.full((1, 2), 0.5))
        with pytest.raises(ConfigError):
            write_store(store, tmp_path / "s.kdst")


class TestBuild:
    def corpus(self):
        return ParallelCorpus([
            SentencePair((4, 5, EOS), (BOS, 4, EOS)),
            SentencePair((3, EOS), (BOS, 5, 5, 4, EOS)),
        ])

    def test_matches_teacher_forward(self):
        p = tiny_model(seed=2)
        store = build_soft_target_store(p, self.corpus(), 3, FP, batch_size=1)
        for i, pair in enumerate(self.corpus()):
            d = forward(p, pair.source, pair.target)
            st = store[i]
            assert st.ids.shape == (len(pair.target) - 1, 3)
            for t in range(len(d)):
                top = np.sort(d[t])[::-1][:3]
                np.testing.assert_allclose(st.probs[t], top / top.sum(), atol=1e-12)
                np.testing.assert_allclose(d[t][st.ids[t]], top, atol=1e-15)

    def test_k_one_is_certain(self):
        store = build_soft_target_store(tiny_model(), self.corpus(), 1, FP)
        for st in store.entries.values():
            np.testing.assert_array_equal(st.probs, 1.0)

    def test_full_k_is_exact_distribution(self):
        p = tiny_model(seed=4)
        store = build_soft_target_store(p, self.corpus(), 6, FP)
        pair = self.corpus()[1]
        np.testing.assert_allclose(store[1].dense(6), forward(p, pair.source, pair.target), atol=1e-12)

    def test_batch_size_irrelevant(self):
        p = tiny_model()
        a = build_soft_target_store(p, self.corpus(), 2, FP, batch_size=1)
        b = build_soft_target_store(p, self.corpus(), 2, FP, batch_size=64)
        for i in a.entries:
            np.testing.assert_array_equal(a[i].ids, b[i].ids)
            np.testing.assert_allclose(a[i].probs, b[i].probs, atol=1e-14)

    @pytest.mark.parametrize("k", [0, 7])
    def test_k_out_of_range(self, k):
        with pytest.raises(ConfigError):
            build_soft_target_store(tiny_model(), self.corpus(), k, FP)
