"""Image loading/saving, patch-dataset construction and dataset manifests.

Images are uint8 numpy arrays: (h, w) grayscale or (h, w, 3) interleaved RGB.
Only 8-bit PNG and binary PGM/PPM are accepted; higher bit depths are
rejected rather than silently down-converted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError, ImageFormatError, ManifestError

ROLES = ("MR", "CT", "SPECT", "PET")
SOURCE_SIZE = 256
PATCH_SIZE = 64
DEFAULT_SD_THRESHOLD = 5.0

_ACCEPTED_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM and PPM both as "PPM"
_ACCEPTED_MODES = {"L", "RGB"}


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG/PGM/PPM into a uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        img = Image.open(path)
        fmt = img.format
        if fmt not in _ACCEPTED_FORMATS:
            raise ImageFormatError(f"{path}: unsupported format {fmt!r} (need PNG or PGM/PPM)")
        if img.mode not in _ACCEPTED_MODES:
            raise ImageFormatError(
                f"{path}: unsupported mode {img.mode!r}; only 8-bit grayscale or RGB is accepted")
        img.load()
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a recognizable image ({exc})") from exc
    except OSError as exc:
        raise ImageDecodeError(f"{path}: decode failed ({exc})") from exc
    return np.asarray(img, dtype=np.uint8)


def save_image(arr: np.ndarray, path) -> None:
    """Lossless 8-bit image write; format follows the file extension."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise ValueError(f"save_image needs a uint8 (h, w) or (h, w, 3) array, got {arr.dtype} {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


# -- patch extraction ---------------------------------------------------------


def patch_std(patch: np.ndarray) -> float:
    return float(np.std(patch.astype(np.float64)))


def filter_patch(patch: np.ndarray, tau: float = DEFAULT_SD_THRESHOLD) -> bool:
    """Keep a tile iff its pixel standard deviation reaches tau."""
    return patch_std(patch) >= tau


@dataclass
class PatchSet:
    source: str
    patches: list[np.ndarray]           # kept 64x64 uint8 tiles
    coords: list[tuple[int, int]]       # tile (row, col) of each kept patch
    discarded: int

    def __len__(self) -> int:
        return len(self.patches)


def extract_patches(img: np.ndarray, tau: float = DEFAULT_SD_THRESHOLD,
                    source: str = "") -> PatchSet:
    """Tile a 256x256 grayscale image into sixteen 64x64 patches, filtered.

    Tiles are non-overlapping and ordered row-major; together they partition
    the image exactly.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.shape != (SOURCE_SIZE, SOURCE_SIZE):
        raise ValueError(f"extract_patches needs a {SOURCE_SIZE}x{SOURCE_SIZE} grayscale image, got {img.shape}")
    kept, coords, discarded = [], [], 0
    for r in range(SOURCE_SIZE // PATCH_SIZE):
        for c in range(SOURCE_SIZE // PATCH_SIZE):
            tile = img[r * PATCH_SIZE:(r + 1) * PATCH_SIZE, c * PATCH_SIZE:(c + 1) * PATCH_SIZE]
            if filter_patch(tile, tau):
                kept.append(tile.copy())
                coords.append((r, c))
            else:
                discarded += 1
    return PatchSet(source=source, patches=kept, coords=coords, discarded=discarded)


def write_patch_cache(ps: PatchSet, out_dir) -> list[Path]:
    """Optional on-disk cache: one PNG per kept tile, named <src>_<row>_<col>.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(ps.source).stem or "patch"
    written = []
    for tile, (r, c) in zip(ps.patches, ps.coords):
        p = out_dir / f"{stem}_{r}_{c}.png"
        save_image(tile, p)
        written.append(p)
    return written


# -- manifests ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    role: str
    pair_id: str
    split: str = "train"


def validate_manifest(entries: list[ManifestEntry]) -> None:
    """Every pair id must appear exactly twice, with two distinct roles."""
    groups: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        if e.role not in ROLES:
            raise ManifestError(f"pair '{e.pair_id}': unknown role {e.role!r} (expected one of {ROLES})")
        groups.setdefault(e.pair_id, []).append(e)
    for pid, group in groups.items():
        if len(group) != 2:
            raise ManifestError(f"pair '{pid}' has {len(group)} entries, expected exactly 2")
        if group[0].role == group[1].role:
            raise ManifestError(f"pair '{pid}' has two '{group[0].role}' entries; roles must differ")


def write_manifest(entries: list[ManifestEntry], path) -> None:
    validate_manifest(entries)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([asdict(e) for e in entries], fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such manifest: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        entries = [ManifestEntry(**item) for item in raw]
    except (json.JSONDecodeError, TypeError) as exc:
        raise ManifestError(f"{path}: cannot parse manifest ({exc})") from exc
    validate_manifest(entries)
    return entries


def manifest_pairs(entries: list[ManifestEntry], split: str | None = None
                   ) -> list[tuple[str, ManifestEntry, ManifestEntry]]:
    """Group validated entries into (pair_id, mr_entry, other_entry) triples."""
    groups: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        if split is None or e.split == split:
            groups.setdefault(e.pair_id, []).append(e)
    out = []
    for pid in sorted(groups):
        group = groups[pid]
        if len(group) != 2:
            raise ManifestError(f"pair '{pid}' is incomplete within split {split!r}")
        mr = [e for e in group if e.role == "MR"]
        if not mr:
            raise ManifestError(f"pair '{pid}' has no MR entry; fusion needs one grayscale MR source")
        other = group[0] if group[1] is mr[0] else group[1]
        out.append((pid, mr[0], other))
    return out
