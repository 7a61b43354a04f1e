"""EWA splatting and alpha compositing of colors and segmentation features.

Rendering follows the usual 3D Gaussian splatting recipe: every Gaussian is
projected to a 2D Gaussian with the local affine approximation of the
perspective map, all splats are sorted front to back by view depth, and each
pixel composites

    C = sum_i c_i a_i prod_{j<i} (1 - a_j),   F = sum_i f_i a_i prod_{j<i} (1 - a_j)

with ``a_i = opacity_i * exp(-0.5 d^T cov2d^-1 d)``.  Colors are composited
over the cloud background, features over zero.

The forward pass records every (pixel, Gaussian, alpha) it blended in a
:class:`ContributionLog`; :func:`rasterize_backward` replays that log to give
exact derivatives with respect to every stored Gaussian parameter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .scene import (
    Camera, FeatureMap, Gaussian, GaussianCloud, normalize_quaternions, quaternion_to_matrix,
    quaternion_to_matrix_jacobian, sigmoid,
)


@dataclass(frozen=True)
class RenderOptions:
    lowpass: float = 0.3
    extent_sigma: float = 3.0
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    transmittance_floor: float = 1e-4


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera (all rows, culled or not)."""

    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    cam_points: np.ndarray
    jacobian: np.ndarray
    cov3d: np.ndarray


@dataclass
class ContributionLog:
    """Pixel-major record of every blended contribution, in front-to-back order.

    Entries for pixel ``p`` live in ``offsets[p]:offsets[p+1]``.
    """

    offsets: np.ndarray
    gaussian: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    clamped: np.ndarray
    final_transmittance: np.ndarray
    n_gaussians: int
    shape: tuple[int, int]

    def __len__(self):
        return len(self.gaussian)

    def weights(self) -> np.ndarray:
        return self.alpha * self.transmittance

    def pixel_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.offsets) - 1), np.diff(self.offsets))


@dataclass
class RenderOutput:
    color: np.ndarray
    features: FeatureMap
    contribution_log: ContributionLog
    projection: Projection = field(repr=False)


def project(cloud: GaussianCloud, cam: Camera, lowpass: float = 0.3, extent_sigma: float = 3.0) -> Projection:
    R = cam.R
    t = cloud.positions @ R.T + cam.t
    cov3d = cloud.covariances()
    n = len(cloud)
    z = t[:, 2]
    visible = z > cam.near
    zs = np.where(visible, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * t[:, 0] / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * t[:, 1] / zs**2
    T = J @ R
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2) + lowpass * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    visible &= det > 0
    det = np.where(visible, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([cam.fx * t[:, 0] / zs + cam.cx, cam.fy * t[:, 1] / zs + cam.cy], axis=1)
    half_tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = half_tr + np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    radius = extent_sigma * np.sqrt(lam_max)
    return Projection(visible, mean2d, cov2d, conic, z, radius, t, J, cov3d)


def project_gaussian(g: Gaussian, cam: Camera, lowpass: float = 0.3) -> Splat2D | None:
    """Project one Gaussian; ``None`` when it sits at or behind the near plane."""
    cloud = GaussianCloud.from_activated(
        g.position[None], g.scale[None], g.rotation[None], [0.5], g.color[None], g.feature[None]
    )
    pr = project(cloud, cam, lowpass)
    if not pr.visible[0]:
        return None
    return Splat2D(pr.mean2d[0], pr.cov2d[0], float(pr.depth[0]), 0)


def depth_order(pr: Projection) -> np.ndarray:
    """Visible Gaussian indices sorted by depth, ties broken by index."""
    idx = np.flatnonzero(pr.visible)
    return idx[np.lexsort((idx, pr.depth[idx]))]


def rasterize(cloud: GaussianCloud, cam: Camera, opts: RenderOptions | None = None) -> RenderOutput:
    opts = opts or RenderOptions()
    cloud.check_finite()
    pr = project(cloud, cam, opts.lowpass, opts.extent_sigma)
    H, W = cam.height, cam.width
    C, F, T, pix, gid, alp, tb, clamp = _kernels.blend_forward(
        depth_order(pr), pr.mean2d, pr.conic, cloud.opacities, pr.radius,
        cloud.colors, cloud.features, cloud.background, H, W,
        opts.alpha_min, opts.alpha_max, opts.transmittance_floor,
    )
    # stable by pixel keeps the depth order within every pixel
    perm = np.argsort(pix, kind="stable")
    offsets = np.zeros(H * W + 1, dtype=np.int64)
    np.cumsum(np.bincount(pix, minlength=H * W), out=offsets[1:])
    log = ContributionLog(offsets, gid[perm], alp[perm], tb[perm], clamp[perm], T, len(cloud), (H, W))
    D = cloud.feature_dim
    fm = FeatureMap(F.reshape(H, W, D), (1.0 - T).reshape(H, W))
    return RenderOutput(C.reshape(H, W, 3), fm, log, pr)


def replay(log: ContributionLog, values: np.ndarray, background=None) -> np.ndarray:
    """Blend per-Gaussian ``values`` (N x K) with the weights stored in ``log``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if len(values) != log.n_gaussians:
        raise ValueError("values do not match the logged cloud size")
    bg = np.zeros(values.shape[1]) if background is None else np.asarray(background, dtype=np.float64)
    out = _kernels.replay(log.offsets, log.gaussian, log.alpha, values, bg)
    return out.reshape(*log.shape, values.shape[1])


def replay_adjoint(log: ContributionLog, grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad * replay(log, values))`` with respect to ``values``."""
    grad = np.ascontiguousarray(grad.reshape(-1, grad.shape[-1]), dtype=np.float64)
    return _kernels.replay_weights_transpose(
        log.offsets, log.gaussian, log.alpha, log.transmittance, grad, log.n_gaussians
    )


@dataclass
class CloudGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    mean2d: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud):
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros_like(cloud.features), np.zeros((n, 2)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions, "log_scales": self.log_scales, "rotations": self.rotations,
            "opacity_logits": self.opacity_logits, "colors": self.colors, "features": self.features,
        }


def rasterize_backward(out: RenderOutput, cloud: GaussianCloud, cam: Camera,
                       grad_color: np.ndarray, grad_features: np.ndarray) -> CloudGradients:
    log, pr = out.contribution_log, out.projection
    if log.n_gaussians != len(cloud):
        raise ValueError(
            f"contribution log was recorded for {log.n_gaussians} Gaussians, cloud has {len(cloud)}"
        )
    H, W = log.shape
    gC = np.ascontiguousarray(grad_color.reshape(H * W, 3), dtype=np.float64)
    gF = np.ascontiguousarray(grad_features.reshape(H * W, -1), dtype=np.float64)
    opac = cloud.opacities
    d_col, d_feat, d_op, d_mean, d_con = _kernels.blend_backward(
        log.offsets, log.gaussian, log.alpha, log.transmittance, log.clamped,
        log.final_transmittance, W, pr.mean2d, pr.conic, opac,
        cloud.colors, cloud.features, cloud.background, gC, gF,
    )
    grads = CloudGradients.zeros_like(cloud)
    grads.colors = d_col
    grads.features = d_feat
    grads.opacity_logits = d_op * opac * (1.0 - opac)
    grads.mean2d = d_mean
    vis = pr.visible
    if not vis.any():
        return grads

    Q = np.stack([pr.conic[:, [0, 1]], pr.conic[:, [1, 2]]], axis=1)[vis]
    dQ = np.empty_like(Q)
    dQ[:, 0, 0] = d_con[vis, 0]
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5 * d_con[vis, 1]
    dQ[:, 1, 1] = d_con[vis, 2]
    d_cov2d = -Q @ dQ @ Q

    Rc = cam.R
    J = pr.jacobian[vis]
    M = Rc @ pr.cov3d[vis] @ Rc.T
    d_M = np.swapaxes(J, 1, 2) @ d_cov2d @ J
    d_J = 2.0 * d_cov2d @ J @ M
    d_cov3d = Rc.T @ d_M @ Rc

    t = pr.cam_points[vis]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    dm = d_mean[vis]
    d_t = np.empty_like(t)
    d_t[:, 0] = d_J[:, 0, 2] * (-fx / tz**2) + dm[:, 0] * fx / tz
    d_t[:, 1] = d_J[:, 1, 2] * (-fy / tz**2) + dm[:, 1] * fy / tz
    d_t[:, 2] = (
        d_J[:, 0, 0] * (-fx / tz**2) + d_J[:, 0, 2] * (2 * fx * tx / tz**3)
        + d_J[:, 1, 1] * (-fy / tz**2) + d_J[:, 1, 2] * (2 * fy * ty / tz**3)
        - dm[:, 0] * fx * tx / tz**2 - dm[:, 1] * fy * ty / tz**2
    )
    grads.positions[vis] = d_t @ Rc

    q_raw = cloud.rotations[vis]
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / q_norm
    Rq = quaternion_to_matrix(q)
    s = cloud.scales[vis]
    Mq = Rq * s[:, None, :]
    d_sym = 0.5 * (d_cov3d + np.swapaxes(d_cov3d, 1, 2))
    d_Mq = 2.0 * d_sym @ Mq
    grads.log_scales[vis] = np.einsum("nki,nki->ni", d_Mq, Rq) * s
    d_Rq = d_Mq * s[:, None, :]
    d_q = np.einsum("nij,nijk->nk", d_Rq, quaternion_to_matrix_jacobian(q))
    grads.rotations[vis] = (d_q - q * np.sum(q * d_q, axis=1, keepdims=True)) / q_norm
    return grads


def screen_gradient_norms(grads: CloudGradients, cam: Camera) -> np.ndarray:
    """Positional gradient norm in normalized device units (the densification statistic)."""
    scaled = grads.mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
    return np.linalg.norm(scaled, axis=1)
