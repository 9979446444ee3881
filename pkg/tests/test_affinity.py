import numpy as np
import pytest

from maskpipe.affinity import build_affinity_graph, cls_affinity, patch_affinity
from maskpipe.formats import FeaturePack
from testutil import make_pack, naive_cls_affinity, naive_patch_affinity


def pack_from(q, k, patch_size=1):
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    n = k.shape[1]
    return FeaturePack("t", 1 * patch_size, n * patch_size, patch_size, 1, n, q, k)


class TestClsAffinity:
    def test_zero_query(self):
        pack = pack_from(np.zeros((2, 3)), np.random.RandomState(0).randn(2, 5, 3))
        assert np.array_equal(cls_affinity(pack), np.zeros(5))

    def test_identity_rows(self):
        pack = pack_from([[1.0, 0.0]], [[[1.0, 0.0], [0.0, 1.0]]])
        assert np.array_equal(cls_affinity(pack), [1.0, 0.0])

    def test_two_head_average(self):
        # head 0 dots: (2, 4); head 1 dots: (0, 2) -> mean (1, 3)
        q = [[2.0], [1.0]]
        k = [[[1.0], [2.0]], [[0.0], [2.0]]]
        assert np.array_equal(cls_affinity(pack_from(q, k)), [1.0, 3.0])


class TestPatchAffinity:
    def test_identity_keys(self):
        pack = pack_from([[0.0, 0.0]], [np.eye(2)])
        assert np.array_equal(patch_affinity(pack), np.eye(2))

    def test_known_rows(self):
        k = [[[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]]]
        expected = [[1, 1, 0], [1, 2, 2], [0, 2, 4]]
        assert np.array_equal(patch_affinity(pack_from([[0.0, 0.0]], k)), expected)

    def test_symmetry_exact(self):
        pack = make_pack(np.random.RandomState(5), grid_h=4, grid_w=5)
        a = patch_affinity(pack)
        assert np.array_equal(a, a.T)

    def test_diagonal_non_negative(self):
        pack = make_pack(np.random.RandomState(9))
        assert (np.diag(patch_affinity(pack)) >= 0).all()


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_loops(self, seed):
        pack = make_pack(np.random.RandomState(seed))
        np.testing.assert_allclose(cls_affinity(pack), naive_cls_affinity(pack),
                                   rtol=1e-5, atol=0)
        np.testing.assert_allclose(patch_affinity(pack), naive_patch_affinity(pack),
                                   rtol=1e-5, atol=0)

    def test_duplicating_heads_is_a_no_op(self):
        # integer-valued features make the head average exact, so doubling
        # the heads must reproduce both outputs bit for bit
        rng = np.random.RandomState(3)
        q = rng.randint(-3, 4, size=(2, 4)).astype(np.float32)
        k = rng.randint(-3, 4, size=(2, 6, 4)).astype(np.float32)
        single = FeaturePack("s", 2, 3, 1, 2, 3, q, k)
        double = FeaturePack("d", 2, 3, 1, 2, 3,
                             np.concatenate([q, q]), np.concatenate([k, k]))
        assert np.array_equal(cls_affinity(single), cls_affinity(double))
        assert np.array_equal(patch_affinity(single), patch_affinity(double))

    def test_graph_bundle(self):
        pack = make_pack(np.random.RandomState(2))
        graph = build_affinity_graph(pack)
        assert graph.a_cls.shape == (pack.n_patches,)
        assert graph.a_patch.shape == (pack.n_patches, pack.n_patches)
