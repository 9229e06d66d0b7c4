from __future__ import annotations

import struct

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from aeot_gan.core import RngStream
from aeot_gan.datasets import IdxFormatError, load_idx, load_idx_labels, make_dataset


def idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    return struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + payload


class TestSynthetic:
    def test_gaussian_mixture(self, rng):
        ds = make_dataset("gaussian-mixture", {"k": 3, "per_mode": 1000, "sigma": 0.05}, rng)
        assert len(ds) == 3000 and ds.points.dim == 2
        assert len(ds.modes.centers) == 3
        assert np.bincount(ds.labels).tolist() == [1000, 1000, 1000]

    def test_segments_are_separated(self, rng):
        ds = make_dataset("segments", {}, rng)
        assert len(ds.modes.centers) == 3
        pts = ds.points.points
        for a in range(3):
            for b in range(a + 1, 3):
                gap = cdist(pts[ds.labels == a], pts[ds.labels == b]).min()
                assert gap > 6 * 0.01

    def test_segments_need_a_real_gap(self, rng):
        with pytest.raises(ValueError):
            make_dataset("segments", {"gap": 0.05, "sigma": 0.01}, rng)

    def test_two_rings(self, rng):
        ds = make_dataset("two-rings", {"per_mode": 200}, rng)
        assert len(ds) == 400 and len(ds.modes.centers) == 2

    def test_same_seed_same_bytes(self, tmp_path):
        paths = []
        for k in range(2):
            ds = make_dataset("gaussian-mixture", {"per_mode": 50}, RngStream(seed=42))
            paths.append(tmp_path / f"d{k}.csv")
            ds.points.to_csv(paths[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError, match="unknown dataset kind"):
            make_dataset("spiral", {}, rng)


class TestIdx:
    def test_images(self, tmp_path):
        path = tmp_path / "img.idx"
        path.write_bytes(idx_bytes(0x803, (2, 2, 2), bytes([0, 255, 51, 102, 255, 0, 0, 0])))
        pc = load_idx(path)
        assert len(pc) == 2 and pc.dim == 4
        np.testing.assert_allclose(pc.points[0], [0.0, 1.0, 0.2, 0.4])
        assert pc.points[1, 0] == 1.0

    def test_labels(self, tmp_path):
        path = tmp_path / "lab.idx"
        path.write_bytes(idx_bytes(0x801, (3,), bytes([7, 1, 9])))
        assert load_idx_labels(path).tolist() == [7, 1, 9]
        assert load_idx(path).points[:, 0].tolist() == [7.0, 1.0, 9.0]

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(idx_bytes(0x805, (1, 1, 1), b"\x00"))
        with pytest.raises(IdxFormatError) as err:
            load_idx(path)
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(idx_bytes(0x803, (2, 2, 2), bytes(5)))
        with pytest.raises(IdxFormatError) as err:
            load_idx(path)
        assert err.value.offset == 16 + 5

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "hdr.idx"
        path.write_bytes(struct.pack(">I", 0x803) + b"\x00\x00")
        with pytest.raises(IdxFormatError):
            load_idx(path)

    def test_labels_reader_rejects_images(self, tmp_path):
        path = tmp_path / "img.idx"
        path.write_bytes(idx_bytes(0x803, (1, 1, 1), b"\x01"))
        with pytest.raises(IdxFormatError):
            load_idx_labels(path)
