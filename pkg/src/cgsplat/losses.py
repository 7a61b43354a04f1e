"""Training objectives and their analytic gradients.

* :func:`rendering_loss` -- ``(1 - l) * L1 + l * (1 - SSIM)`` on the color image.
* :func:`contrastive_clustering_loss` -- pulls the rendered features of a 2D
  segment towards that segment's centroid and away from the other centroids,
  with a per-segment temperature.
* :func:`spatial_regularization` -- sigmoid penalties asking the K nearest
  Gaussians of a sample to share its feature and the L farthest not to.
* :func:`total_loss` -- weighted sum of whichever terms are active.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import expit, logsumexp

from .scene import FeatureMap, GaussianCloud, SegmentMask

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class ClusterStats:
    segment_id: int
    size: int
    centroid: np.ndarray
    temperature: float


@dataclass
class LossReport:
    value: float
    grad_feature_map: np.ndarray | None = None
    grad_cloud_features: np.ndarray | None = None
    grad_image: np.ndarray | None = None
    term_breakdown: dict[str, float] = field(default_factory=dict)
    clusters: list[ClusterStats] = field(default_factory=list)
    degenerate: bool = False

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError(f"loss value is not finite: {self.value}")


# --- rendering -------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


@lru_cache(maxsize=32)
def _blur_matrix(n: int) -> np.ndarray:
    # reflect-padded 1D Gaussian filter as an explicit matrix so its adjoint is exact
    return correlate1d(np.eye(n), _gaussian_window(), axis=0, mode="reflect")


def _blur(x: np.ndarray) -> np.ndarray:
    H, W = x.shape[:2]
    y = np.tensordot(_blur_matrix(H), x, axes=(1, 0))
    return np.moveaxis(np.tensordot(_blur_matrix(W), y, axes=(1, 1)), 0, 1)


def _blur_adjoint(g: np.ndarray) -> np.ndarray:
    H, W = g.shape[:2]
    y = np.tensordot(_blur_matrix(H), g, axes=(0, 0))
    return np.moveaxis(np.tensordot(_blur_matrix(W), y, axes=(0, 1)), 0, 1)


def ssim(x: np.ndarray, y: np.ndarray, *, return_grad: bool = False):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    mu_x, mu_y = _blur(x), _blur(y)
    e_xx, e_yy, e_xy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (e_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = (e_xx - mu_x**2) + (e_yy - mu_y**2) + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value
    g = np.full_like(smap, 1.0 / smap.size)
    d_mu = g * (2 * mu_y * a2 / (b1 * b2) - 2 * mu_y * a1 / (b1 * b2)
                - smap * 2 * mu_x / b1 + smap * 2 * mu_x / b2)
    d_exy = g * 2 * a1 / (b1 * b2)
    d_exx = -g * smap / b2
    grad = _blur_adjoint(d_mu) + 2 * x * _blur_adjoint(d_exx) + y * _blur_adjoint(d_exy)
    return value, grad


def rendering_loss(rendered: np.ndarray, truth: np.ndarray, lambda_dssim: float = 0.2) -> LossReport:
    if rendered.shape != truth.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {truth.shape}")
    diff = rendered - truth
    l1 = float(np.abs(diff).mean())
    s, d_ssim = ssim(rendered, truth, return_grad=True)
    value = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s)
    grad = (1 - lambda_dssim) * np.sign(diff) / diff.size - lambda_dssim * d_ssim
    return LossReport(value, grad_image=grad, term_breakdown={"l1": l1, "ssim": s})


# --- feature normalization -------------------------------------------------

def l2_normalize_map(fm: FeatureMap, eps: float = 1e-12):
    """Unit-normalize every pixel feature; returns ``(normalized, backward)``.

    ``backward(grad)`` maps a gradient w.r.t. the normalized map to one w.r.t.
    the raw map.  Pixels whose norm is below ``eps`` stay zero and pass no gradient.
    """
    data = fm.data
    norm = np.linalg.norm(data, axis=-1, keepdims=True)
    ok = norm > eps
    safe = np.where(ok, norm, 1.0)
    unit = np.where(ok, data / safe, 0.0)

    def backward(grad: np.ndarray) -> np.ndarray:
        radial = np.sum(unit * grad, axis=-1, keepdims=True)
        return np.where(ok, (grad - unit * radial) / safe, 0.0)

    return FeatureMap(unit, fm.alpha), backward


def _normalize_rows(f: np.ndarray, eps: float = 1e-12):
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    ok = norm > eps
    safe = np.where(ok, norm, 1.0)
    return np.where(ok, f / safe, 0.0), safe, ok


# --- contrastive clustering ------------------------------------------------

def cluster_temperature(features, centroid, epsilon: float = 100.0, floor: float = 1e-2) -> float:
    """Spread of a cluster around its centroid, ``sum ||f - c|| / (N log(N + eps))``, floored."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("cluster must be non-empty")
    n = len(features)
    raw = np.linalg.norm(features - centroid, axis=1).sum() / (n * np.log(n + epsilon))
    return max(float(raw), floor)


def _segments(labels: np.ndarray, min_cluster_size: int):
    """Surviving segments ordered by first occurrence in raster order (ID-value agnostic)."""
    flat = labels.ravel()
    ids, first, counts = np.unique(flat, return_index=True, return_counts=True)
    keep = (ids != 0) & (counts > min_cluster_size)
    ids, first = ids[keep], first[keep]
    return ids[np.argsort(first)]


def contrastive_clustering_loss(
    fm_normalized: FeatureMap,
    mask: SegmentMask,
    min_cluster_size: int = 100,
    *,
    epsilon: float = 100.0,
    temperature_floor: float = 1e-2,
    stop_gradient: bool = True,
    frozen_clusters: list[ClusterStats] | None = None,
) -> LossReport:
    """Segment-wise softmax loss over centroid similarities scaled by temperature.

    With ``stop_gradient`` (the default) centroids and temperatures are treated
    as constants, so the gradient is that of the loss with
    ``frozen_clusters`` fixed at their current values.  Passing
    ``stop_gradient=False`` differentiates through them as well.
    """
    data = fm_normalized.data
    H, W, D = data.shape
    if mask.shape != (H, W):
        raise ValueError(f"mask shape {mask.shape} does not match feature map {(H, W)}")
    labels = mask.labels.ravel()
    feats = data.reshape(-1, D)
    grad = np.zeros_like(feats)

    if frozen_clusters is not None:
        ids = np.array([c.segment_id for c in frozen_clusters])
    else:
        ids = _segments(mask.labels, min_cluster_size)
    if len(ids) < 2:
        return LossReport(0.0, grad_feature_map=grad.reshape(H, W, D), degenerate=True,
                          term_breakdown={"clusters": float(len(ids))})

    members = [np.flatnonzero(labels == i) for i in ids]
    if frozen_clusters is not None:
        clusters = frozen_clusters
    else:
        clusters = []
        for sid, idx in zip(ids, members):
            c = feats[idx].mean(axis=0)
            phi = cluster_temperature(feats[idx], c, epsilon, temperature_floor)
            clusters.append(ClusterStats(int(sid), len(idx), c, phi))
    centroids = np.stack([c.centroid for c in clusters])
    phis = np.array([c.temperature for c in clusters])
    scaled = centroids / phis[:, None]

    k = len(clusters)
    rows = np.concatenate(members)
    owner = np.repeat(np.arange(k), [len(m) for m in members])
    x = feats[rows]
    logits = x @ scaled.T
    lse = logsumexp(logits, axis=1)
    own = logits[np.arange(len(rows)), owner]
    value = float(-(own - lse).sum() / k)

    prob = np.exp(logits - lse[:, None])
    g_logits = prob
    g_logits[np.arange(len(rows)), owner] -= 1.0
    g_logits /= k
    grad[rows] = g_logits @ scaled

    if not stop_gradient:
        d_scaled = g_logits.T @ x
        d_cent = d_scaled / phis[:, None]
        d_phi = -np.sum(d_scaled * centroids, axis=1) / phis**2
        for p, idx in enumerate(members):
            n_p = len(idx)
            grad[idx] += d_cent[p] / n_p
            diff = feats[idx] - centroids[p]
            dist = np.linalg.norm(diff, axis=1)
            raw = dist.sum() / (n_p * np.log(n_p + epsilon))
            if raw > temperature_floor:
                unit = np.where(dist[:, None] > 0, diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
                scale = d_phi[p] / (n_p * np.log(n_p + epsilon))
                grad[idx] += scale * (unit - unit.mean(axis=0))

    return LossReport(value, grad_feature_map=grad.reshape(H, W, D), clusters=clusters,
                      term_breakdown={"clusters": float(k)})


# --- spatial-similarity regularization -------------------------------------

@dataclass
class NeighborPairs:
    samples: np.ndarray
    near: np.ndarray
    far: np.ndarray


def neighbor_pairs(positions: np.ndarray, samples: np.ndarray, K: int, L: int, chunk: int = 512) -> NeighborPairs:
    """K nearest and L farthest Gaussians of each sample (self excluded, ties by index)."""
    samples = np.asarray(samples, dtype=np.int64)
    near = np.empty((len(samples), K), dtype=np.int64)
    far = np.empty((len(samples), L), dtype=np.int64)
    for start in range(0, len(samples), chunk):
        s = samples[start:start + chunk]
        rows = np.arange(len(s))
        d2 = ((positions[s][:, None, :] - positions[None, :, :]) ** 2).sum(-1)
        # stable sorts keep equal distances in index order
        d2[rows, s] = np.inf
        near[start:start + len(s)] = np.argsort(d2, axis=1, kind="stable")[:, :K]
        d2[rows, s] = -np.inf
        far[start:start + len(s)] = np.argsort(-d2, axis=1, kind="stable")[:, :L]
    return NeighborPairs(samples, near, far)


def spatial_regularization(
    cloud: GaussianCloud,
    M: int | None = None,
    K: int = 2,
    L: int = 5,
    lambda_near: float = 0.05,
    lambda_far: float = 0.15,
    rng_seed=None,
    *,
    samples: np.ndarray | None = None,
    neighbors: NeighborPairs | None = None,
) -> LossReport:
    """Sigmoid similarity penalty between each sampled Gaussian and its K nearest / L farthest.

    ``neighbors`` may carry a precomputed table for every Gaussian (valid while
    positions are unchanged); rows for the drawn samples are taken from it.
    """
    n = len(cloud)
    if n <= K + L:
        raise ValueError(f"cloud has {n} Gaussians, need more than K + L = {K + L}")
    if samples is None:
        M = min(1000, n) if M is None else M
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        samples = np.sort(rng.choice(n, size=M, replace=False))
    M = len(samples)
    if neighbors is not None:
        pairs = NeighborPairs(samples, neighbors.near[samples, :K], neighbors.far[samples, :L])
    else:
        pairs = neighbor_pairs(cloud.positions, samples, K, L)
    unit, norm, ok = _normalize_rows(cloud.features)

    src_near = np.repeat(pairs.samples, K)
    dst_near = pairs.near.ravel()
    src_far = np.repeat(pairs.samples, L)
    dst_far = pairs.far.ravel()
    s_near = np.sum(unit[src_near] * unit[dst_near], axis=1)
    s_far = np.sum(unit[src_far] * unit[dst_far], axis=1)
    h_near = expit(1.0 - s_near)
    h_far = expit(s_far)
    near_term = lambda_near / (M * K) * h_near.sum()
    far_term = lambda_far / (M * L) * h_far.sum()

    d_near = -lambda_near / (M * K) * h_near * (1 - h_near)
    d_far = lambda_far / (M * L) * h_far * (1 - h_far)
    d_unit = np.zeros_like(unit)
    np.add.at(d_unit, src_near, d_near[:, None] * unit[dst_near])
    np.add.at(d_unit, dst_near, d_near[:, None] * unit[src_near])
    np.add.at(d_unit, src_far, d_far[:, None] * unit[dst_far])
    np.add.at(d_unit, dst_far, d_far[:, None] * unit[src_far])
    radial = np.sum(unit * d_unit, axis=1, keepdims=True)
    grad = np.where(ok, (d_unit - unit * radial) / norm, 0.0)
    return LossReport(float(near_term + far_term), grad_cloud_features=grad,
                      term_breakdown={"near": float(near_term), "far": float(far_term)})


# --- total -----------------------------------------------------------------

def total_loss(
    rendering: LossReport | None,
    clustering: LossReport | None = None,
    regularization: LossReport | None = None,
    lambda_clustering: float = 1e-6,
    apply_clustering: bool = True,
    apply_regularization: bool = True,
) -> LossReport:
    breakdown = {}
    value = 0.0
    grad_image = grad_fm = grad_feat = None
    if rendering is not None:
        value += rendering.value
        breakdown["rendering"] = rendering.value
        grad_image = rendering.grad_image
    if apply_clustering and clustering is not None:
        value += lambda_clustering * clustering.value
        breakdown["clustering"] = clustering.value
        if clustering.grad_feature_map is not None:
            grad_fm = lambda_clustering * clustering.grad_feature_map
    if apply_regularization and regularization is not None:
        value += regularization.value
        breakdown["regularization"] = regularization.value
        grad_feat = regularization.grad_cloud_features
    breakdown["total"] = value
    return LossReport(value, grad_feature_map=grad_fm, grad_cloud_features=grad_feat,
                      grad_image=grad_image, term_breakdown=breakdown)
