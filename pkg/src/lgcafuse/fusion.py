"""Fusing a registered source pair through a trained autoencoder.

Gray path: normalize both sources to [-1, 1], encode, build channel-l1
activity maps, 3x3 block-average them, normalize into per-site weight maps,
blend the encodings, decode, map back to [0, 255].  Color path: the color
source is converted to YUV, only its luminance is fused, and the original
chrominance is reattached before the inverse color matrix.

Both color matrices are applied exactly as configured even though they are
not mutual inverses; the round-trip deviation is characterized in the tests
rather than hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import reflect_index
from .errors import DataError
from .model import CAEModel
from .tensor import Tensor, no_grad

RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.169, -0.331, 0.5],
    [0.5, -0.419, -0.081],
])

YUV_TO_RGB = np.array([
    [1.0, 0.0, 1.14],
    [1.0, -0.39, 0.58],
    [1.0, 2.03, 0.0],
])


# -- value-range plumbing -----------------------------------------------------


def unit_from_pixels(img: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float64 [0, 1]."""
    return np.asarray(img, dtype=np.float64) / 255.0


def pixels_from_unit(u: np.ndarray) -> np.ndarray:
    """float [0, 1] -> uint8, clamped, round half away from zero."""
    return np.floor(np.clip(u, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def model_from_unit(u: np.ndarray) -> np.ndarray:
    """[0, 1] luminance -> [-1, 1] model range (float32)."""
    return (2.0 * u - 1.0).astype(np.float32)


def unit_from_model(m: np.ndarray) -> np.ndarray:
    """[-1, 1] model output -> [0, 1], clamped."""
    return (np.clip(m, -1.0, 1.0) + 1.0) / 2.0


# -- color space --------------------------------------------------------------


def rgb_to_yuv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact matrix application on an (h, w, 3) image in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"rgb_to_yuv needs an (h, w, 3) image, got {rgb.shape}")
    yuv = rgb @ RGB_TO_YUV.T
    return yuv[..., 0], yuv[..., 1], yuv[..., 2]


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact matrix application, then clamp to [0, 1]."""
    yuv = np.stack([y, u, v], axis=-1).astype(np.float64)
    return np.clip(yuv @ YUV_TO_RGB.T, 0.0, 1.0)


# -- fusion rule --------------------------------------------------------------


def activity_map(e: Tensor) -> np.ndarray:
    """Per-site l1 norm across channels of a single encoding (1, C, h, w).

    Accumulated in float64: the maps are tiny and the downstream weight
    normalization benefits from the headroom.
    """
    if e.shape[0] != 1:
        raise ValueError(f"activity_map takes a single encoding, got batch {e.shape[0]}")
    return np.abs(e.data[0]).sum(axis=0, dtype=np.float64)


def block_average(am: np.ndarray) -> np.ndarray:
    """3x3 mean filter with reflect padding; shape-preserving."""
    am = np.asarray(am, dtype=np.float64)
    h, w = am.shape
    ridx = reflect_index(h, 1)
    cidx = reflect_index(w, 1)
    padded = am[ridx[:, None], cidx[None, :]]
    out = np.zeros_like(am)
    for u in range(3):
        for v in range(3):
            out += padded[u:u + h, v:v + w]
    return out / 9.0


def weight_maps(fam_p: np.ndarray, fam_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise normalization; featureless sites (0/0) split evenly."""
    if fam_p.shape != fam_q.shape:
        raise ValueError(f"weight_maps: shape mismatch {fam_p.shape} vs {fam_q.shape}")
    denom = fam_p + fam_q
    flat = denom == 0
    safe = np.where(flat, 1.0, denom)
    w_p = np.where(flat, 0.5, fam_p / safe)
    w_q = np.where(flat, 0.5, fam_q / safe)
    return w_p, w_q


def fuse_encoded(e_p: Tensor, e_q: Tensor, w_p: np.ndarray, w_q: np.ndarray) -> Tensor:
    """Blend two encodings with spatial weights broadcast over channels."""
    if e_p.shape != e_q.shape:
        raise ValueError(f"fuse_encoded: encoding shapes differ, {e_p.shape} vs {e_q.shape}")
    if w_p.shape != e_p.shape[2:] or w_q.shape != e_p.shape[2:]:
        raise ValueError(
            f"fuse_encoded: weight maps {w_p.shape} do not match encoding sites {e_p.shape[2:]}")
    wp = w_p.astype(e_p.dtype)[None, None]
    wq = w_q.astype(e_q.dtype)[None, None]
    return Tensor(e_p.data * wp + e_q.data * wq)


# -- whole-pair pipeline -------------------------------------------------------


@dataclass
class SourcePair:
    """A pre-registered pair: p grayscale, q grayscale or RGB, equal sizes."""

    p: np.ndarray
    q: np.ndarray
    pair_id: str = ""


@dataclass
class FusionResult:
    fused: np.ndarray                  # uint8, (h, w) or (h, w, 3)
    activity_p: np.ndarray
    activity_q: np.ndarray
    weight_p: np.ndarray
    weight_q: np.ndarray
    fused_luminance: np.ndarray        # [0, 1] float, pre color conversion
    chroma_u: np.ndarray | None = None
    chroma_v: np.ndarray | None = None


def _validate_pair(pair: SourcePair) -> bool:
    p, q = np.asarray(pair.p), np.asarray(pair.q)
    if p.ndim != 2:
        raise DataError(f"pair '{pair.pair_id}': first source must be grayscale, got shape {p.shape}")
    if q.ndim == 3 and q.shape[2] != 3:
        raise DataError(f"pair '{pair.pair_id}': second source must be gray or RGB, got shape {q.shape}")
    if q.ndim not in (2, 3):
        raise DataError(f"pair '{pair.pair_id}': second source has shape {q.shape}")
    if p.shape != q.shape[:2]:
        raise DataError(
            f"pair '{pair.pair_id}': sources are {p.shape} vs {q.shape[:2]}, must be equal size")
    if p.shape[0] % 8 or p.shape[1] % 8:
        raise DataError(f"pair '{pair.pair_id}': dims {p.shape} must be divisible by 8")
    return q.ndim == 3


def _encode_unit(model: CAEModel, unit: np.ndarray) -> Tensor:
    return model.encode(Tensor(model_from_unit(unit)[None, None]))


def fuse_pair(model: CAEModel, pair: SourcePair) -> FusionResult:
    """Full fusion of one registered pair on a frozen model."""
    is_color = _validate_pair(pair)
    with no_grad():
        p_unit = unit_from_pixels(pair.p)
        u = v = None
        if is_color:
            y, u, v = rgb_to_yuv(unit_from_pixels(pair.q))
            q_unit = y
        else:
            q_unit = unit_from_pixels(pair.q)

        e_p = _encode_unit(model, p_unit)
        e_q = _encode_unit(model, q_unit)
        am_p, am_q = activity_map(e_p), activity_map(e_q)
        w_p, w_q = weight_maps(block_average(am_p), block_average(am_q))
        fused_code = fuse_encoded(e_p, e_q, w_p, w_q)
        decoded = model.decode(fused_code)
        fused_unit = unit_from_model(decoded.data[0, 0])

        if is_color:
            fused_img = pixels_from_unit(yuv_to_rgb(fused_unit, u, v))
        else:
            fused_img = pixels_from_unit(fused_unit)

    return FusionResult(
        fused=fused_img,
        activity_p=am_p,
        activity_q=am_q,
        weight_p=w_p,
        weight_q=w_q,
        fused_luminance=fused_unit,
        chroma_u=u,
        chroma_v=v,
    )


def reconstruct_image(model: CAEModel, gray: np.ndarray) -> np.ndarray:
    """Autoencode one grayscale image: normalize, encode, decode, denormalize."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise DataError(f"reconstruct needs a grayscale image, got shape {gray.shape}")
    if gray.shape[0] % 8 or gray.shape[1] % 8:
        raise DataError(f"reconstruct: dims {gray.shape} must be divisible by 8")
    with no_grad():
        x = Tensor(model_from_unit(unit_from_pixels(gray))[None, None])
        out = model.reconstruct(x)
    return pixels_from_unit(unit_from_model(out.data[0, 0]))
