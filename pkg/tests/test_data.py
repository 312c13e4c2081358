import numpy as np
import pytest
from PIL import Image

from lgcafuse.data import (
    ManifestEntry,
    extract_patches,
    filter_patch,
    load_image,
    manifest_pairs,
    read_manifest,
    save_image,
    validate_manifest,
    write_manifest,
    write_patch_cache,
)
from lgcafuse.errors import ImageDecodeError, ImageFormatError, ManifestError


def ramp256():
    idx = np.arange(256, dtype=np.int32)
    return ((idx[:, None] * 256 + idx[None, :]) % 256).astype(np.uint8)


class TestLoadImage:
    def test_pgm_pixel_order(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255]))
        img = load_image(p)
        np.testing.assert_array_equal(img, [[0, 85], [170, 255]])

    def test_ppm_is_interleaved_rgb(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n1 2\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        img = load_image(p)
        assert img.shape == (2, 1, 3)
        np.testing.assert_array_equal(img[0, 0], [255, 0, 0])

    def test_png_roundtrip_gray_and_rgb(self, tmp_path, rng):
        gray = rng.integers(0, 256, size=(9, 7), dtype=np.uint8)
        rgb = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        save_image(gray, tmp_path / "g.png")
        save_image(rgb, tmp_path / "c.png")
        np.testing.assert_array_equal(load_image(tmp_path / "g.png"), gray)
        np.testing.assert_array_equal(load_image(tmp_path / "c.png"), rgb)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "absent.png")

    def test_16bit_png_rejected(self, tmp_path):
        p = tmp_path / "deep.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(p)
        with pytest.raises(ImageFormatError):
            load_image(p)

    def test_16bit_pgm_rejected(self, tmp_path):
        p = tmp_path / "deep.pgm"
        p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
        with pytest.raises(ImageFormatError):
            load_image(p)

    def test_unknown_format_rejected(self, tmp_path):
        p = tmp_path / "t.png"
        p.write_bytes(b"this is not an image at all, promise")
        with pytest.raises(ImageFormatError):
            load_image(p)

    def test_truncated_png_rejected(self, tmp_path, rng):
        p = tmp_path / "ok.png"
        save_image(rng.integers(0, 256, size=(64, 64), dtype=np.uint8), p)
        blob = p.read_bytes()
        (tmp_path / "cut.png").write_bytes(blob[: len(blob) - 40])
        with pytest.raises(ImageDecodeError):
            load_image(tmp_path / "cut.png")


class TestPatches:
    def test_sixteen_tiles_match_subarrays(self):
        img = ramp256()
        ps = extract_patches(img, tau=0.0)
        assert len(ps) == 16 and ps.discarded == 0
        for tile, (r, c) in zip(ps.patches, ps.coords):
            np.testing.assert_array_equal(tile, img[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64])

    def test_tiles_partition_source_exactly(self):
        img = ramp256()
        ps = extract_patches(img, tau=0.0)
        rebuilt = np.zeros_like(img)
        counts = np.zeros_like(img, dtype=np.int32)
        for tile, (r, c) in zip(ps.patches, ps.coords):
            rebuilt[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64] = tile
            counts[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64] += 1
        np.testing.assert_array_equal(rebuilt, img)
        assert np.all(counts == 1)

    def test_corners_line_up(self):
        img = ramp256()
        ps = extract_patches(img, tau=0.0)
        by_coord = dict(zip(ps.coords, ps.patches))
        assert by_coord[(0, 0)][0, 0] == img[0, 0]
        assert by_coord[(3, 3)][-1, -1] == img[255, 255]

    def test_black_image_fully_filtered(self):
        ps = extract_patches(np.zeros((256, 256), dtype=np.uint8))
        assert len(ps) == 0 and ps.discarded == 16

    def test_wrong_size_rejected(self):
        with pytest.raises(ValueError):
            extract_patches(np.zeros((128, 128), dtype=np.uint8))
        with pytest.raises(ValueError):
            extract_patches(np.zeros((256, 256, 3), dtype=np.uint8))

    def test_filter_boundary_is_inclusive(self):
        patch = np.zeros((64, 64), dtype=np.uint8)
        patch[:32] = 10  # SD exactly 5.0
        assert filter_patch(patch, tau=5.0)
        assert not filter_patch(np.full((64, 64), 7, dtype=np.uint8), tau=5.0)

    def test_high_contrast_patch_kept(self, rng):
        patch = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
        assert filter_patch(patch, tau=5.0)

    def test_filter_monotone_in_tau(self, rng):
        img = rng.integers(0, 40, size=(256, 256), dtype=np.uint8)
        counts = [len(extract_patches(img, tau=t)) for t in (0.0, 2.0, 5.0, 8.0, 20.0)]
        assert counts == sorted(counts, reverse=True)

    def test_patch_cache_naming(self, tmp_path):
        img = ramp256()
        ps = extract_patches(img, tau=0.0, source="scan.png")
        written = write_patch_cache(ps, tmp_path)
        assert (tmp_path / "scan_0_0.png") in written
        assert len(written) == 16
        np.testing.assert_array_equal(load_image(tmp_path / "scan_2_1.png"), ps.patches[9])


class TestManifest:
    def entries(self):
        return [
            ManifestEntry(path="a_mr.png", role="MR", pair_id="p1", split="test"),
            ManifestEntry(path="a_ct.png", role="CT", pair_id="p1", split="test"),
            ManifestEntry(path="b_mr.png", role="MR", pair_id="p2", split="train"),
            ManifestEntry(path="b_pet.png", role="PET", pair_id="p2", split="train"),
        ]

    def test_roundtrip_exact(self, tmp_path):
        path = tmp_path / "m.json"
        write_manifest(self.entries(), path)
        assert read_manifest(path) == self.entries()

    def test_missing_partner_rejected_naming_pair(self):
        with pytest.raises(ManifestError, match="p9"):
            validate_manifest([ManifestEntry(path="x.png", role="MR", pair_id="p9")])

    def test_duplicate_role_rejected(self):
        with pytest.raises(ManifestError, match="p1"):
            validate_manifest([
                ManifestEntry(path="x.png", role="MR", pair_id="p1"),
                ManifestEntry(path="y.png", role="MR", pair_id="p1"),
            ])

    def test_unknown_role_rejected(self):
        with pytest.raises(ManifestError):
            validate_manifest([
                ManifestEntry(path="x.png", role="XR", pair_id="p1"),
                ManifestEntry(path="y.png", role="CT", pair_id="p1"),
            ])

    def test_hundred_pairs_load_as_hundred_groups(self, tmp_path):
        entries = []
        for i in range(100):
            entries.append(ManifestEntry(path=f"{i}_mr.png", role="MR", pair_id=f"p{i:03d}", split="test"))
            entries.append(ManifestEntry(path=f"{i}_ct.png", role="CT", pair_id=f"p{i:03d}", split="test"))
        path = tmp_path / "big.json"
        write_manifest(entries, path)
        pairs = manifest_pairs(read_manifest(path), split="test")
        assert len(pairs) == 100
        assert all(mr.role == "MR" for _, mr, _ in pairs)

    def test_pairs_require_an_mr_entry(self):
        entries = [
            ManifestEntry(path="x.png", role="CT", pair_id="p1", split="test"),
            ManifestEntry(path="y.png", role="PET", pair_id="p1", split="test"),
        ]
        validate_manifest(entries)  # pairing itself is fine
        with pytest.raises(ManifestError, match="MR"):
            manifest_pairs(entries, split="test")

    def test_split_filter(self):
        pairs = manifest_pairs(self.entries(), split="train")
        assert [pid for pid, _, _ in pairs] == ["p2"]
