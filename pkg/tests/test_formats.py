import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskpipe.errors import CorruptionError, EmptyMaskError, FormatError, ValidationError
from maskpipe.formats import (
    FeaturePack,
    ObjectCandidate,
    candidate_from_mask,
    decode_rle,
    encode_rle,
    read_feature_pack,
    read_kmeans_sidecar,
    read_loss_container,
    read_manifest,
    read_map_index,
    read_pgm,
    rle_area,
    rle_bbox,
    write_feature_pack,
    write_kmeans_sidecar,
    write_loss_container,
    write_manifest,
    write_map_index,
    write_pgm,
)
from testutil import make_pack, random_mask


class TestFeaturePack:
    def test_round_trip_identity(self, tmp_path):
        rng = np.random.RandomState(7)
        for i in range(200):
            pack = make_pack(rng, image_id=f"p{i}", with_embed=bool(i % 2))
            path = tmp_path / f"p{i}.mdfp"
            write_feature_pack(pack, path)
            assert read_feature_pack(path) == pack

    def test_reference_bytes(self, tmp_path):
        # heads=2, N=4 (2x2 grid), head_dim=3: 6 + 24 = 30 payload floats
        q = np.arange(6, dtype=np.float32).reshape(2, 3)
        k = np.arange(6, 30, dtype=np.float32).reshape(2, 4, 3)
        pack = FeaturePack("ref", 4, 4, 2, 2, 2, q, k)
        path = tmp_path / "ref.mdfp"
        write_feature_pack(pack, path)

        # independently assembled reference bytes
        expected = b"MDFP" + struct.pack("<9I", 1, 4, 4, 2, 2, 2, 2, 3, 0)
        for value in range(30):
            expected += struct.pack("<f", float(value))
        assert path.read_bytes() == expected

        reread = read_feature_pack(path)
        assert reread.q_cls.tobytes() == q.tobytes()
        assert reread.k_patch.tobytes() == k.tobytes()

    def test_truncated_payload(self, tmp_path):
        pack = make_pack(np.random.RandomState(0), image_id="t")
        path = tmp_path / "t.mdfp"
        write_feature_pack(pack, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CorruptionError):
            read_feature_pack(path)

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "x.mdfp"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError):
            read_feature_pack(path)
        path.write_bytes(b"MDFP" + struct.pack("<I", 9) + b"\x00" * 36)
        with pytest.raises(FormatError):
            read_feature_pack(path)

    def test_minimal_pack_size(self, tmp_path):
        pack = FeaturePack("m", 1, 1, 1, 1, 1, np.zeros((1, 1)), np.zeros((1, 1, 1)))
        path = tmp_path / "m.mdfp"
        write_feature_pack(pack, path)
        # magic + version + 8 header fields + 2 payload floats
        assert path.stat().st_size == 4 + 4 + 8 * 4 + 2 * 4

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            FeaturePack("bad", 8, 8, 4, 2, 2, np.zeros((1, 2)), np.zeros((1, 3, 2)))

    def test_image_size_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            FeaturePack("bad", 9, 8, 4, 2, 2, np.zeros((1, 2)), np.zeros((1, 4, 2)))

    def test_non_finite_rejected(self):
        q = np.zeros((1, 2))
        q[0, 0] = np.nan
        with pytest.raises(ValidationError):
            FeaturePack("bad", 8, 8, 4, 2, 2, q, np.zeros((1, 4, 2)))

    def test_deterministic_bytes(self, tmp_path):
        pack = make_pack(np.random.RandomState(3), image_id="d", with_embed=True)
        a, b = tmp_path / "a.mdfp", tmp_path / "b.mdfp"
        write_feature_pack(pack, a)
        write_feature_pack(pack, b)
        assert a.read_bytes() == b.read_bytes()

    def test_no_partial_file_on_invalid_pack(self, tmp_path):
        pack = make_pack(np.random.RandomState(1), image_id="v")
        pack.grid_h = pack.grid_h + 1  # break the grid invariant after construction
        path = tmp_path / "v.mdfp"
        with pytest.raises(ValidationError):
            write_feature_pack(pack, path)
        assert not path.exists()


class TestRLE:
    def test_all_zero(self):
        assert encode_rle(np.zeros((2, 2)))["counts"] == [4]

    def test_all_one(self):
        assert encode_rle(np.ones((2, 2)))["counts"] == [0, 4]

    def test_single_pixel_column_major(self):
        mask = np.zeros((2, 2), dtype=np.uint8)
        mask[0, 1] = 1
        # column-major traversal: (0,0) (1,0) (0,1) (1,1) -> 0 0 1 0
        assert encode_rle(mask)["counts"] == [2, 1, 1]

    def test_count_sum_mismatch(self):
        with pytest.raises(FormatError):
            decode_rle({"size": [2, 2], "counts": [3]})

    def test_negative_count(self):
        with pytest.raises(FormatError):
            decode_rle({"size": [2, 2], "counts": [-1, 5]})

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
    def test_decode_encode_identity(self, h, w, seed):
        mask = random_mask(np.random.RandomState(seed), h, w)
        assert np.array_equal(decode_rle(encode_rle(mask)), mask)

    def test_decode_encode_identity_200_masks(self):
        rng = np.random.RandomState(77)
        for _ in range(200):
            mask = random_mask(rng, rng.randint(1, 65), rng.randint(1, 65),
                               p=rng.uniform(0.05, 0.95))
            assert np.array_equal(decode_rle(encode_rle(mask)), mask)

    def test_area_and_bbox_from_runs(self):
        rng = np.random.RandomState(11)
        for _ in range(50):
            mask = random_mask(rng, rng.randint(1, 20), rng.randint(1, 20))
            if not mask.any():
                continue
            rle = encode_rle(mask)
            assert rle_area(rle) == int(mask.sum())
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            expected = (int(cols[0]), int(rows[0]),
                        int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
            assert rle_bbox(rle) == expected

    def test_bbox_of_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            rle_bbox(encode_rle(np.zeros((3, 3))))


class TestManifest:
    def _record(self, image_id="a", score=0.5, label=None):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1:3, 1:3] = 1
        return candidate_from_mask(image_id, mask, score=score, label=label)

    def test_round_trip_sorted(self, tmp_path):
        records = [self._record("b", 0.9, 2), self._record("a", 0.2), self._record("b", 0.5, 1)]
        path = tmp_path / "m.jsonl"
        write_manifest(records, path)
        back = read_manifest(path)
        assert [r.image_id for r in back] == ["a", "b", "b"]
        assert [r.score for r in back] == [0.2, 0.9, 0.5]  # stable within image
        assert back[1].label == 2

    def test_bbox_must_be_tight(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1, 1] = 1
        rle = encode_rle(mask)
        with pytest.raises(ValidationError):
            ObjectCandidate("a", 0.5, (0, 0, 4, 4), rle)

    def test_score_and_label_ranges(self):
        mask = np.ones((2, 2), dtype=np.uint8)
        with pytest.raises(ValidationError):
            candidate_from_mask("a", mask, score=1.5)
        with pytest.raises(ValidationError):
            candidate_from_mask("a", mask, score=0.5, label=0)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image_id": "a"}\n')
        with pytest.raises(FormatError, match="bad.jsonl:1"):
            read_manifest(path)


class TestPGM:
    def test_round_trip(self, tmp_path):
        labels = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = tmp_path / "m.pgm"
        write_pgm(labels, path)
        assert np.array_equal(read_pgm(path), labels)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.pgm"
        write_pgm(np.zeros((2, 3), dtype=np.uint8), path)
        assert path.read_bytes() == b"P5\n3 2\n255\n" + b"\x00" * 6

    def test_invalid_header(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 12)
        with pytest.raises(FormatError):
            read_pgm(path)

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 3)
        with pytest.raises(CorruptionError):
            read_pgm(path)

    def test_value_range_enforced(self, tmp_path):
        with pytest.raises(ValidationError):
            write_pgm(np.full((2, 2), 300), tmp_path / "x.pgm")

    def test_index_round_trip(self, tmp_path):
        index = {"b": "b.pgm", "a": "a.pgm"}
        path = tmp_path / "index.json"
        write_map_index(index, path)
        assert read_map_index(path) == index


class TestSidecars:
    def test_kmeans_round_trip(self, tmp_path):
        centroids = np.random.RandomState(0).randn(3, 5).astype(np.float32)
        path = tmp_path / "model.mdkm"
        write_kmeans_sidecar(centroids, path)
        assert np.array_equal(read_kmeans_sidecar(path), centroids)
        assert path.read_bytes()[:4] == b"MDKM"

    def test_loss_container_round_trip(self, tmp_path):
        rng = np.random.RandomState(1)
        logits = rng.randn(6, 4).astype(np.float32)
        targets = rng.randint(0, 4, size=6)
        path = tmp_path / "case.mdlc"
        write_loss_container(logits, targets, path)
        back_logits, back_targets = read_loss_container(path)
        assert np.array_equal(back_logits, logits.astype(np.float64))
        assert np.array_equal(back_targets, targets)

    def test_loss_container_target_range(self, tmp_path):
        with pytest.raises(ValidationError):
            write_loss_container(np.zeros((2, 3)), np.array([0, 3]), tmp_path / "x.mdlc")
