"""Quantitative evaluation: PSNR, centroid-chamfer geometry drift and
edit color statistics, plus the CSV/console report over a dataset."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError, SizeError

PSNR_CLAMP_DB = 99.0

# D65 reference white for CIE Lab
_LAB_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])


def psnr(pred, gt) -> float:
    """Mean-over-views PSNR in dB; identical inputs clamp to 99 dB."""
    if isinstance(pred, np.ndarray):
        pred, gt = [pred], [np.asarray(gt)]
    pred = [np.asarray(p, dtype=np.float64) for p in pred]
    gt = [np.asarray(g, dtype=np.float64) for g in gt]
    if len(pred) != len(gt):
        raise ShapeError("view count mismatch", (len(pred),), (len(gt),))
    vals = []
    for p, g in zip(pred, gt):
        if p.shape != g.shape:
            raise ShapeError("image shape mismatch", p.shape, g.shape)
        mse = float(np.mean((p - g) ** 2))
        vals.append(PSNR_CLAMP_DB if mse <= 10 ** (-PSNR_CLAMP_DB / 10.0) else 10.0 * np.log10(1.0 / mse))
    return float(np.mean(vals))


def geometry_drift(a, b) -> float:
    """Symmetric chamfer distance (mean nearest-neighbor distance) between
    two centroid clouds, in world units."""
    pa = np.asarray(a if isinstance(a, np.ndarray) else a.centroids, dtype=np.float64)
    pb = np.asarray(b if isinstance(b, np.ndarray) else b.centroids, dtype=np.float64)
    if pa.size == 0 or pb.size == 0:
        raise SizeError("geometry_drift needs non-empty point sets")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Linear RGB in [0,1] -> CIE Lab (D65)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = rgb @ _RGB2XYZ.T
    t = xyz / _LAB_WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def delta_e_cie76(rgb_a: np.ndarray, rgb_b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(rgb_to_lab(rgb_a) - rgb_to_lab(rgb_b), axis=-1)


def rgb_to_hue_deg(rgb: np.ndarray) -> np.ndarray:
    """Hue angle in [0, 360); gray pixels map to 0."""
    rgb = np.asarray(rgb, dtype=np.float64)
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    hue = np.zeros_like(mx)
    safe = delta > 1e-12
    rmax = safe & (mx == r)
    gmax = safe & (mx == g) & ~rmax
    bmax = safe & ~rmax & ~gmax
    hue[rmax] = ((g - b)[rmax] / delta[rmax]) % 6.0
    hue[gmax] = (b - r)[gmax] / delta[gmax] + 2.0
    hue[bmax] = (r - g)[bmax] / delta[bmax] + 4.0
    return hue * 60.0


def circular_mean_hue_deg(hues: np.ndarray, weights: np.ndarray | None = None) -> float:
    ang = np.radians(np.asarray(hues, dtype=np.float64))
    w = np.ones_like(ang) if weights is None else np.asarray(weights, dtype=np.float64)
    s = float(np.sum(w * np.sin(ang)))
    c = float(np.sum(w * np.cos(ang)))
    return float(np.degrees(np.arctan2(s, c)) % 360.0)


def _default_foreground(before: np.ndarray, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    return np.any(np.abs(before - np.asarray(background)) > 2.0 / 255.0, axis=-1)


def edit_color_shift(before, after, foreground_masks=None):
    """Foreground CIE76 dE mean plus a 36-bin hue histogram of the edited views.

    `before`/`after` are lists of (H, W, 3) images; masks default to
    not-white-background pixels of the before views.
    """
    before = [np.asarray(b, dtype=np.float64) for b in before]
    after = [np.asarray(a, dtype=np.float64) for a in after]
    if len(before) != len(after):
        raise ShapeError("view count mismatch", (len(before),), (len(after),))
    if foreground_masks is None:
        foreground_masks = [_default_foreground(b) for b in before]
    des, hues = [], []
    for b, a, m in zip(before, after, foreground_masks):
        if b.shape != a.shape:
            raise ShapeError("image shape mismatch", b.shape, a.shape)
        if not m.any():
            continue
        des.append(delta_e_cie76(b[m], a[m]))
        hues.append(rgb_to_hue_deg(a[m]))
    if not des:
        return 0.0, np.zeros(36), 0.0
    des = np.concatenate(des)
    hues = np.concatenate(hues)
    hist, _ = np.histogram(hues, bins=36, range=(0.0, 360.0))
    hist = hist.astype(np.float64)
    if hist.sum() > 0:
        hist = hist / hist.sum()
    return float(des.mean()), hist, circular_mean_hue_deg(hues)


def hue_histogram_entropy(hist: np.ndarray) -> float:
    p = np.asarray(hist, dtype=np.float64)
    p = p[p > 0]
    if p.size == 0:
        return 0.0
    p = p / p.sum()
    return float(-(p * np.log(p)).sum())


# -- report -----------------------------------------------------------------------


@dataclass
class EvalRow:
    asset_id: str
    split: str
    recon_psnr_db: float
    prompt: str = ""
    edit_delta_e: float = float("nan")
    edit_mean_hue_deg: float = float("nan")
    geometry_drift: float = float("nan")
    wall_clock_s: float = float("nan")
    encoder_passes: int = 0
    denoiser_passes: int = 0
    decoder_passes: int = 0


@dataclass
class EvalReport:
    config_fingerprint: str
    rows: list[EvalRow] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        def agg(vals):
            vals = [v for v in vals if np.isfinite(v)]
            return float(np.mean(vals)) if vals else float("nan")

        return {
            "mean_recon_psnr_db": agg([r.recon_psnr_db for r in self.rows]),
            "mean_edit_delta_e": agg([r.edit_delta_e for r in self.rows]),
            "mean_geometry_drift": agg([r.geometry_drift for r in self.rows]),
            "mean_wall_clock_s": agg([r.wall_clock_s for r in self.rows]),
        }

    CSV_FIELDS = ("asset_id", "split", "recon_psnr_db", "prompt", "edit_delta_e",
                  "edit_mean_hue_deg", "geometry_drift", "wall_clock_s",
                  "encoder_passes", "denoiser_passes", "decoder_passes")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("schema", "1"))
        writer.writerow(("config_fingerprint", self.config_fingerprint))
        writer.writerow(self.CSV_FIELDS)
        for r in self.rows:
            writer.writerow([getattr(r, f) for f in self.CSV_FIELDS])
        for key, val in self.aggregate().items():
            writer.writerow(("aggregate", key, val))
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'asset':<12} {'split':<6} {'psnr':>7} {'prompt':<28} {'dE':>7} {'hue':>6} {'drift':>9} {'sec':>6}"]
        for r in self.rows:
            lines.append(f"{r.asset_id:<12} {r.split:<6} {r.recon_psnr_db:>7.2f} {r.prompt:<28.28} "
                         f"{r.edit_delta_e:>7.2f} {r.edit_mean_hue_deg:>6.1f} {r.geometry_drift:>9.5f} "
                         f"{r.wall_clock_s:>6.2f}")
        agg = self.aggregate()
        lines.append("-" * len(lines[0]))
        lines.append("  ".join(f"{k}={v:.4f}" for k, v in agg.items()))
        return "\n".join(lines)
