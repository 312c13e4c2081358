"""Quantitative fusion metrics: EN, SD, SF, MI, SCD and the edge index Qabf.

All metrics operate on 8-bit grayscale images.  Float inputs are quantized
(round, clamp to [0, 255]) and color inputs reduced to luminance first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import RGB_TO_YUV

# sigmoid-model constants of the edge preservation index
QABF_GAMMA_G = 0.9994
QABF_KAPPA_G = -15.0
QABF_SIGMA_G = 0.5
QABF_GAMMA_A = 0.9879
QABF_KAPPA_A = -22.0
QABF_SIGMA_A = 0.8

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def as_metric_image(img: np.ndarray) -> np.ndarray:
    """Quantize to uint8; color images are reduced to luminance first."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr.astype(np.float64) @ RGB_TO_YUV[0]
    if arr.ndim != 2:
        raise ValueError(f"metrics need a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.round(arr.astype(np.float64)), 0, 255).astype(np.uint8)


def entropy(img: np.ndarray) -> float:
    """Shannon entropy in bits over the 256-bin histogram."""
    img = as_metric_image(img)
    if img.size == 0:
        raise ValueError("entropy of an empty image is undefined")
    hist = np.bincount(img.ravel(), minlength=256)
    p = hist[hist > 0] / img.size
    return float(-(p * np.log2(p)).sum())


def std_dev(img: np.ndarray) -> float:
    """Population standard deviation of pixel values."""
    img = as_metric_image(img)
    if img.size == 0:
        raise ValueError("std_dev of an empty image is undefined")
    return float(np.std(img.astype(np.float64)))


def spatial_frequency(img: np.ndarray) -> float:
    """sqrt(RF^2 + CF^2) with squared differences averaged over all M*N pixels."""
    img = as_metric_image(img).astype(np.float64)
    m, n = img.shape
    if m < 2 or n < 2:
        raise ValueError(f"spatial_frequency needs at least 2x2 pixels, got {m}x{n}")
    rf2 = np.sum((img[:, 1:] - img[:, :-1]) ** 2) / (m * n)
    cf2 = np.sum((img[1:, :] - img[:-1, :]) ** 2) / (m * n)
    return float(np.sqrt(rf2 + cf2))


def mutual_information_pair(a: np.ndarray, b: np.ndarray) -> float:
    """I(A;B) in bits from the 256x256 joint histogram."""
    a, b = as_metric_image(a), as_metric_image(b)
    if a.shape != b.shape:
        raise ValueError(f"mutual information needs equal shapes, got {a.shape} vs {b.shape}")
    joint = np.bincount(
        (a.ravel().astype(np.int64) << 8) | b.ravel().astype(np.int64), minlength=65536
    ).reshape(256, 256)
    pxy = joint / a.size
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    outer = px[:, None] * py[None, :]
    return float((pxy[nz] * np.log2(pxy[nz] / outer[nz])).sum())


def mutual_information(fused: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """Raw sum I(F;P) + I(F;Q)."""
    return mutual_information_pair(fused, p) + mutual_information_pair(fused, q)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; zero-variance arguments contribute 0."""
    a = a.astype(np.float64).ravel() - a.mean()
    b = b.astype(np.float64).ravel() - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float((a * b).sum() / denom)


def scd(fused: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """Sum of the correlations of differences: r(F-Q, P) + r(F-P, Q)."""
    f = as_metric_image(fused).astype(np.float64)
    pp = as_metric_image(p).astype(np.float64)
    qq = as_metric_image(q).astype(np.float64)
    if f.shape != pp.shape or f.shape != qq.shape:
        raise ValueError(f"scd needs equal shapes, got {f.shape}, {pp.shape}, {qq.shape}")
    return _pearson(f - qq, pp) + _pearson(f - pp, qq)


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edge strength and orientation with replicate-padding Sobel taps."""
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    sx = np.zeros_like(img)
    sy = np.zeros_like(img)
    for u in range(3):
        for v in range(3):
            win = padded[u:u + h, v:v + w]
            sx += _SOBEL_X[u, v] * win
            sy += _SOBEL_Y[u, v] * win
    g = np.sqrt(sx * sx + sy * sy)
    alpha = np.where(sx == 0, np.pi / 2, np.arctan(np.divide(sy, sx, out=np.zeros_like(sy), where=sx != 0)))
    return g, alpha


def _edge_preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(
            g_src > g_f,
            np.divide(g_f, g_src, out=np.zeros_like(g_f), where=g_src > 0),
            np.divide(g_src, g_f, out=np.zeros_like(g_src), where=g_f > 0),
        )
    angle = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    q_g = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (ratio - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (angle - QABF_SIGMA_A)))
    return q_g * q_a


def q_abf(fused: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """Sobel-based edge preservation index in [0, 1].

    Per-pixel strength and orientation preservation of each source relative
    to the fused image pass through the sigmoid model, weighted by source
    edge strength.  Zero total edge energy in both sources gives 0.
    """
    f = as_metric_image(fused).astype(np.float64)
    pa = as_metric_image(p).astype(np.float64)
    pb = as_metric_image(q).astype(np.float64)
    if f.shape != pa.shape or f.shape != pb.shape:
        raise ValueError(f"q_abf needs equal shapes, got {f.shape}, {pa.shape}, {pb.shape}")
    if f.shape[0] < 3 or f.shape[1] < 3:
        raise ValueError(f"q_abf needs at least 3x3 pixels, got {f.shape}")
    g_a, al_a = _sobel(pa)
    g_b, al_b = _sobel(pb)
    g_f, al_f = _sobel(f)
    denom = (g_a + g_b).sum()
    if denom == 0:
        return 0.0
    q_af = _edge_preservation(g_a, al_a, g_f, al_f)
    q_bf = _edge_preservation(g_b, al_b, g_f, al_f)
    return float((q_af * g_a + q_bf * g_b).sum() / denom)


@dataclass
class MetricReport:
    pair_id: str
    en: float
    sd: float
    sf: float
    q_abf: float
    mi: float
    scd: float

    COLUMNS = ("EN", "SD", "SF", "Q_ABF", "MI", "SCD")

    def values(self) -> tuple[float, ...]:
        return (self.en, self.sd, self.sf, self.q_abf, self.mi, self.scd)


def compute_metrics(fused: np.ndarray, p: np.ndarray, q: np.ndarray,
                    pair_id: str = "") -> MetricReport:
    """All six metrics for one fused image against its two sources."""
    return MetricReport(
        pair_id=pair_id,
        en=entropy(fused),
        sd=std_dev(fused),
        sf=spatial_frequency(fused),
        q_abf=q_abf(fused, p, q),
        mi=mutual_information(fused, p, q),
        scd=scd(fused, p, q),
    )
