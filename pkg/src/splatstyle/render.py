"""Differentiable pinhole rasterization of Gaussian splats.

Splats are projected with the EWA approximation (perspective Jacobian,
0.3 px^2 low-pass floor on the 2-d covariance) and alpha-composited
front to back. The whole pathway is a single custom autodiff op with a
hand-derived vectorized backward covering all 14 splat channels.

Conventions: the extrinsic matrix maps world to camera space, the
camera looks along +z, and pixel (ix, iy) samples the image plane at
exactly (ix, iy). Gradients are exactly zero outside the 3-sigma
elliptical footprint and for culled splats (documented discontinuity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .ad.tensor import Tensor, _make
from .errors import ShapeError
from .splats import CH_COLOR, CH_LOGSCALE, CH_POS, CH_QUAT, SplatSet

COV_FLOOR = 0.3        # px^2 anti-aliasing dilation on the 2-d covariance diagonal
ALPHA_MAX = 0.999      # per-splat alpha clamp
CUTOFF_Q = 4.5         # 0.5 * 3^2: 3-sigma elliptical footprint


@dataclass
class Camera:
    """Pinhole view: world-to-camera extrinsic plus intrinsics in pixels."""

    extrinsic: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.extrinsic.shape != (4, 4):
            raise ShapeError("extrinsic must be 4x4", self.extrinsic.shape)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not self.near < self.far:
            raise ValueError(f"need near < far, got {self.near} >= {self.far}")
        rot = self.extrinsic[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
            raise ValueError("extrinsic rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]


def look_at_camera(position, target, up=(0.0, 1.0, 0.0), fov_deg: float = 50.0,
                   width: int = 64, height: int = 64, near: float = 0.05,
                   far: float = 100.0) -> Camera:
    """Camera at `position` looking at `target`, y-up world, upright image."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - position
    z = z / np.linalg.norm(z)
    if abs(np.dot(z, up) / np.linalg.norm(up)) > 0.999:
        up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ position
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(ext, fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height, near=near, far=far)


@dataclass
class RenderTarget:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray   # (H, W) in [0, 1]


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rot_grad_to_quat(gr: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Pull a (N, 3, 3) rotation-matrix gradient back to (N, 4) quaternion space."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.empty((q.shape[0], 4), dtype=q.dtype)
    g[:, 0] = 2 * (-gr[:, 0, 1] * z + gr[:, 0, 2] * y + gr[:, 1, 0] * z
                   - gr[:, 1, 2] * x - gr[:, 2, 0] * y + gr[:, 2, 1] * x)
    g[:, 1] = 2 * (gr[:, 0, 1] * y + gr[:, 0, 2] * z + gr[:, 1, 0] * y
                   - 2 * gr[:, 1, 1] * x - gr[:, 1, 2] * w + gr[:, 2, 0] * z
                   + gr[:, 2, 1] * w - 2 * gr[:, 2, 2] * x)
    g[:, 2] = 2 * (-2 * gr[:, 0, 0] * y + gr[:, 0, 1] * x + gr[:, 0, 2] * w
                   + gr[:, 1, 0] * x + gr[:, 1, 2] * z - gr[:, 2, 0] * w
                   + gr[:, 2, 1] * z - 2 * gr[:, 2, 2] * y)
    g[:, 3] = 2 * (-2 * gr[:, 0, 0] * z - gr[:, 0, 1] * w + gr[:, 0, 2] * x
                   + gr[:, 1, 0] * w - 2 * gr[:, 1, 1] * z + gr[:, 1, 2] * y
                   + gr[:, 2, 0] * x + gr[:, 2, 1] * y)
    return g


class _Projected:
    """Per-splat forward intermediates kept for the backward pass."""

    __slots__ = ("live", "idx", "q", "qn", "rot", "scale", "sigma", "a_mat", "p_cam",
                 "mean2d", "m2", "cov2d", "depth")


def _project(data: np.ndarray, cam: Camera) -> _Projected:
    """Vectorized EWA projection of live (in-frustum) splats, float64."""
    d = data.astype(np.float64)
    rot_w = cam.rotation
    p_cam = d[:, CH_POS] @ rot_w.T + cam.translation
    live = (p_cam[:, 2] > cam.near) & (p_cam[:, 2] < cam.far)
    idx = np.nonzero(live)[0]

    st = _Projected()
    st.live = live
    st.idx = idx
    d = d[idx]
    p_cam = p_cam[idx]
    tx, ty, tz = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    q = d[:, CH_QUAT]
    qnorm = np.linalg.norm(q, axis=1, keepdims=True)
    qnorm = np.maximum(qnorm, 1e-12)
    qn = q / qnorm
    rot = _quat_to_rot(qn)
    scale = np.exp(d[:, CH_LOGSCALE])
    # Sigma = R diag(s^2) R^T
    rs = rot * scale[:, None, :]
    sigma = rs @ np.swapaxes(rs, 1, 2)

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * tx / tz**2
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * ty / tz**2
    a_mat = jac @ rot_w
    cov2d = a_mat @ sigma @ np.swapaxes(a_mat, 1, 2)
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    m2 = np.empty_like(cov2d)
    m2[:, 0, 0] = cov2d[:, 1, 1] / det
    m2[:, 1, 1] = cov2d[:, 0, 0] / det
    m2[:, 0, 1] = m2[:, 1, 0] = -cov2d[:, 0, 1] / det

    st.q, st.qn, st.rot, st.scale, st.sigma = q, qn, rot, scale, sigma
    st.a_mat, st.p_cam, st.m2, st.cov2d = a_mat, p_cam, m2, cov2d
    st.mean2d = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)
    st.depth = tz
    return st


def project_gaussian(splat_row: np.ndarray, cam: Camera):
    """Project one splat; returns (mean2d, cov2d, depth) or None when culled."""
    st = _project(np.asarray(splat_row, dtype=np.float64).reshape(1, -1), cam)
    if st.idx.size == 0:
        return None
    return st.mean2d[0].copy(), st.cov2d[0].copy(), float(st.depth[0])


class _PairState:
    """Flattened (splat, pixel) pair data in composite order."""

    __slots__ = ("sid", "pid", "dx", "dy", "gauss", "alpha", "unclamped", "trans",
                 "weight", "seg_id", "n_pix")


def _build_pairs(st: _Projected, opac: np.ndarray, cam: Camera, dtype,
                 cutoff_q: float = CUTOFF_Q) -> _PairState | None:
    n = st.idx.size
    if n == 0:
        return None
    if np.isfinite(cutoff_q):
        a, b, dd = st.cov2d[:, 0, 0], st.cov2d[:, 0, 1], st.cov2d[:, 1, 1]
        mid = 0.5 * (a + dd)
        lam = mid + np.sqrt(np.maximum((0.5 * (a - dd)) ** 2 + b**2, 0.0))
        radius = np.sqrt(2.0 * cutoff_q) * np.sqrt(np.maximum(lam, 1e-12))
    else:
        radius = np.full(n, cam.width + cam.height, dtype=np.float64)

    x0 = np.maximum(np.floor(st.mean2d[:, 0] - radius), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(st.mean2d[:, 0] + radius), cam.width - 1).astype(np.int64)
    y0 = np.maximum(np.floor(st.mean2d[:, 1] - radius), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(st.mean2d[:, 1] + radius), cam.height - 1).astype(np.int64)
    w_box = x1 - x0 + 1
    h_box = y1 - y0 + 1
    on = (w_box > 0) & (h_box > 0) & (x0 <= x1) & (y0 <= y1)
    counts = np.where(on, w_box * h_box, 0)
    total = int(counts.sum())
    if total == 0:
        return None

    sid = np.repeat(np.arange(n), counts)  # index into the live-splat arrays
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    lw = np.repeat(w_box, counts)
    px = np.repeat(x0, counts) + local % lw
    py = np.repeat(y0, counts) + local // lw

    dx = (px - st.mean2d[sid, 0]).astype(dtype)
    dy = (py - st.mean2d[sid, 1]).astype(dtype)
    m2s = st.m2[sid].astype(dtype)
    qf = 0.5 * (m2s[:, 0, 0] * dx * dx + 2 * m2s[:, 0, 1] * dx * dy + m2s[:, 1, 1] * dy * dy)
    keep = qf <= cutoff_q
    if not keep.any():
        return None
    sid, px, py, dx, dy, qf = sid[keep], px[keep], py[keep], dx[keep], dy[keep], qf[keep]

    gauss = np.exp(-qf)
    raw = opac[sid].astype(dtype) * gauss
    alpha = np.minimum(raw, np.asarray(ALPHA_MAX, dtype=dtype))

    # Composite order: per pixel, front (small depth) to back; ties by original index.
    order_rank = np.empty(n, dtype=np.int64)
    order_rank[np.lexsort((st.idx, st.depth))] = np.arange(n)
    pid = py * cam.width + px
    perm = np.lexsort((order_rank[sid], pid))

    ps = _PairState()
    ps.sid = sid[perm]
    ps.pid = pid[perm]
    ps.dx = dx[perm]
    ps.dy = dy[perm]
    ps.gauss = gauss[perm]
    ps.alpha = alpha[perm]
    ps.unclamped = (raw[perm] < ALPHA_MAX)
    first = np.empty(ps.pid.size, dtype=bool)
    first[0] = True
    first[1:] = ps.pid[1:] != ps.pid[:-1]
    ps.seg_id = np.cumsum(first) - 1
    lt = np.log1p(-ps.alpha)
    cs = np.cumsum(lt)
    seg_first = np.nonzero(first)[0]
    base = (cs - lt)[seg_first]
    ps.trans = np.exp((cs - lt) - np.repeat(base, np.diff(np.append(seg_first, ps.pid.size))))
    ps.weight = ps.alpha * ps.trans
    ps.n_pix = cam.width * cam.height
    return ps


def _composite(ps: _PairState | None, colors: np.ndarray, background: np.ndarray,
               cam: Camera, dtype) -> np.ndarray:
    h, w = cam.height, cam.width
    img = np.empty((h, w, 4), dtype=dtype)
    if ps is None:
        img[:, :, :3] = background
        img[:, :, 3] = 0.0
        return img
    acc = np.stack([np.bincount(ps.pid, weights=ps.weight * colors[ps.sid, ch],
                                minlength=ps.n_pix) for ch in range(3)], axis=1)
    alpha_sum = np.bincount(ps.pid, weights=ps.weight, minlength=ps.n_pix)
    out = acc + (1.0 - alpha_sum)[:, None] * background[None, :]
    img[:, :, :3] = out.reshape(h, w, 3).astype(dtype)
    img[:, :, 3] = alpha_sum.reshape(h, w).astype(dtype)
    return img


def _backward_pairs(ps: _PairState, st: _Projected, data: np.ndarray, colors: np.ndarray,
                    background: np.ndarray, g_img: np.ndarray, cam: Camera) -> np.ndarray:
    """Chain image gradients back to the (N, 14) splat tensor."""
    n_live = st.idx.size
    grad = np.zeros_like(data, dtype=np.float64)
    g_rgb = g_img[:, :, :3].reshape(-1, 3).astype(np.float64)
    g_a = g_img[:, :, 3].reshape(-1).astype(np.float64)

    # alpha channel of the output: d(bg term)/d(alpha_sum) couples to rgb too
    g_alpha_sum = g_a - g_rgb @ background.astype(np.float64)

    gc_pair = g_rgb[ps.pid]                                   # (M, 3)
    w64 = ps.weight.astype(np.float64)
    t64 = ps.trans.astype(np.float64)
    a64 = ps.alpha.astype(np.float64)

    # dL/dw_i from this pair's own color term plus the alpha-sum pathway
    dL_dw = (gc_pair * colors[ps.sid].astype(np.float64)).sum(axis=1) + g_alpha_sum[ps.pid]
    # color grads: dC/dc = w
    for ch in range(3):
        np.add.at(grad[:, CH_COLOR][:, ch], st.idx[ps.sid], w64 * gc_pair[:, ch])

    # transmittance pathway: dL/d log(1 - alpha_j) = sum_{i > j, same pixel} dL/dw_i * w_i
    u = dL_dw * w64
    csu = np.cumsum(u)
    seg_first = np.nonzero(np.r_[True, ps.seg_id[1:] != ps.seg_id[:-1]])[0]
    base = (csu - u)[seg_first]
    prefix_incl = csu - np.repeat(base, np.diff(np.append(seg_first, u.size)))
    totals = np.bincount(ps.seg_id, weights=u)
    suffix_after = totals[ps.seg_id] - prefix_incl

    dL_da = t64 * dL_dw - suffix_after / (1.0 - a64)
    dL_da = dL_da * ps.unclamped  # alpha clamp blocks gradient when saturated

    opac = data[st.idx, 13].astype(np.float64)
    g64 = ps.gauss.astype(np.float64)
    np.add.at(grad[:, 13], st.idx[ps.sid], g64 * dL_da)
    dL_dG = opac[ps.sid] * dL_da
    dL_dqf = -g64 * dL_dG

    m2s = st.m2[ps.sid]
    dx64 = ps.dx.astype(np.float64)
    dy64 = ps.dy.astype(np.float64)
    ddx = dL_dqf * (m2s[:, 0, 0] * dx64 + m2s[:, 0, 1] * dy64)
    ddy = dL_dqf * (m2s[:, 0, 1] * dx64 + m2s[:, 1, 1] * dy64)

    g_mean = np.zeros((n_live, 2))
    np.add.at(g_mean[:, 0], ps.sid, -ddx)
    np.add.at(g_mean[:, 1], ps.sid, -ddy)

    g_m2 = np.zeros((n_live, 2, 2))
    np.add.at(g_m2[:, 0, 0], ps.sid, dL_dqf * 0.5 * dx64 * dx64)
    np.add.at(g_m2[:, 0, 1], ps.sid, dL_dqf * dx64 * dy64)
    np.add.at(g_m2[:, 1, 1], ps.sid, dL_dqf * 0.5 * dy64 * dy64)
    g_m2[:, 1, 0] = 0.0
    # fold the shared off-diagonal into a symmetric gradient
    sym = g_m2.copy()
    sym[:, 0, 1] *= 0.5
    sym[:, 1, 0] = sym[:, 0, 1]

    # inverse: dL/dSigma' = -M2 G M2 (M2 and G symmetric)
    m2 = st.m2
    g_cov = -(m2 @ sym @ m2)

    # Sigma' = A Sigma A^T + floor
    g_amat = (g_cov + np.swapaxes(g_cov, 1, 2)) @ st.a_mat @ st.sigma
    g_sigma = np.swapaxes(st.a_mat, 1, 2) @ g_cov @ st.a_mat

    # A = J R_w: pull back through J to camera-space position
    g_jac = g_amat @ cam.rotation.T
    tx, ty, tz = st.p_cam[:, 0], st.p_cam[:, 1], st.p_cam[:, 2]
    g_pcam = np.zeros((n_live, 3))
    g_pcam[:, 0] += g_jac[:, 0, 2] * (-cam.fx / tz**2)
    g_pcam[:, 1] += g_jac[:, 1, 2] * (-cam.fy / tz**2)
    g_pcam[:, 2] += (g_jac[:, 0, 0] * (-cam.fx / tz**2)
                     + g_jac[:, 1, 1] * (-cam.fy / tz**2)
                     + g_jac[:, 0, 2] * (2 * cam.fx * tx / tz**3)
                     + g_jac[:, 1, 2] * (2 * cam.fy * ty / tz**3))
    # mean2d pathway
    g_pcam[:, 0] += g_mean[:, 0] * cam.fx / tz
    g_pcam[:, 1] += g_mean[:, 1] * cam.fy / tz
    g_pcam[:, 2] += (-g_mean[:, 0] * cam.fx * tx - g_mean[:, 1] * cam.fy * ty) / tz**2

    grad[st.idx[:, None], [0, 1, 2]] += g_pcam @ cam.rotation

    # Sigma = R D R^T with D = diag(exp(2 ls))
    d_diag = st.scale**2
    g_rot = 2.0 * (g_sigma @ (st.rot * d_diag[:, None, :]))
    rtgr = np.swapaxes(st.rot, 1, 2) @ g_sigma @ st.rot
    g_d = np.stack([rtgr[:, 0, 0], rtgr[:, 1, 1], rtgr[:, 2, 2]], axis=1)
    grad[st.idx[:, None], [7, 8, 9]] += g_d * 2.0 * d_diag

    gq_unit = _rot_grad_to_quat(g_rot, st.qn)
    qnorm = np.linalg.norm(st.q, axis=1, keepdims=True)
    qnorm = np.maximum(qnorm, 1e-12)
    gq = (gq_unit - st.qn * (gq_unit * st.qn).sum(axis=1, keepdims=True)) / qnorm
    grad[st.idx[:, None], [3, 4, 5, 6]] += gq
    return grad


def rasterize_tensor(splats: Tensor, cam: Camera, background=(1.0, 1.0, 1.0),
                     cutoff_q: float = CUTOFF_Q) -> Tensor:
    """Render an (N, 14) splat tensor to an (H, W, 4) rgb+alpha tensor.

    cutoff_q bounds each splat's footprint (0.5 * n_sigma^2); passing inf
    renders the exact unwindowed compositing, which is what gradient
    verification uses.
    """
    if splats.ndim != 2 or splats.shape[1] != 14:
        raise ShapeError("rasterize expects an (N, 14) splat tensor", splats.shape)
    dtype = splats.data.dtype
    bg = np.asarray(background, dtype=np.float64)
    data = splats.data
    st = _project(data, cam)
    colors = data[st.idx][:, CH_COLOR].astype(np.float64)
    opac = data[st.idx, 13].astype(np.float64)
    ps = _build_pairs(st, opac, cam, dtype, cutoff_q)
    img = _composite(ps, colors, bg, cam, dtype)

    def bwd(g):
        if ps is None:
            return ((splats, np.zeros_like(data)),)
        gs = _backward_pairs(ps, st, data, colors, bg, np.asarray(g, dtype=np.float64), cam)
        return ((splats, gs.astype(dtype)),)

    return _make(img, (splats,), bwd)


def composite_signature(data: np.ndarray, cam: Camera, cutoff_q: float = CUTOFF_Q) -> bytes:
    """Digest of the discrete composite structure (pair set, order, clamping).

    Two inputs with equal signatures lie on the same smooth piece of the
    rendering function; gradient probes straddling a signature change hit
    a documented discontinuity (footprint edge, depth swap, alpha clamp)
    and are skipped by the checks.
    """
    import hashlib

    st = _project(np.asarray(data, dtype=np.float64), cam)
    opac = data[st.idx, 13].astype(np.float64) if st.idx.size else np.zeros(0)
    ps = _build_pairs(st, opac, cam, np.float64, cutoff_q)
    h = hashlib.blake2b(digest_size=16)
    if ps is not None:
        h.update(st.idx[ps.sid].astype(np.int64).tobytes())
        h.update(ps.pid.astype(np.int64).tobytes())
        h.update(ps.unclamped.astype(np.uint8).tobytes())
    return h.digest()


def rasterize(s: SplatSet, cam: Camera, background=(1.0, 1.0, 1.0)) -> RenderTarget:
    """Non-differentiable convenience wrapper returning a RenderTarget."""
    img = rasterize_tensor(Tensor(s.data), cam, background).data
    return RenderTarget(pixels=np.clip(img[:, :, :3], 0.0, 1.0),
                        alpha=np.clip(img[:, :, 3], 0.0, 1.0))


def render_views(s: SplatSet, cams: list[Camera], background=(1.0, 1.0, 1.0)) -> list[RenderTarget]:
    if not cams:
        raise ValueError("render_views needs at least one camera")
    return [rasterize(s, cam, background) for cam in cams]


# -- PNG io (linear [0,1] <-> 8-bit, no gamma) -------------------------------------


def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
