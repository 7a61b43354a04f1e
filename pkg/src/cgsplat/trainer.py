"""Optimization loop: view sampling, loss cadence, Adam steps, densify and prune."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .losses import (
    contrastive_clustering_loss, l2_normalize_map, neighbor_pairs, rendering_loss, spatial_regularization,
    total_loss,
)
from .optim import Adam
from .rasterizer import (
    CloudGradients, RenderOptions, rasterize, rasterize_backward, replay, replay_adjoint,
    screen_gradient_norms,
)
from .scene import Camera, FeatureMap, GaussianCloud, normalize_quaternions, quaternion_to_matrix
from .synthdata import View

log = logging.getLogger(__name__)

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "colors", "features")


def default_learning_rates() -> dict[str, float]:
    return {
        "positions": 1.6e-4, "log_scales": 5e-3, "rotations": 1e-3,
        "opacity_logits": 0.05, "colors": 2.5e-3, "features": 2.5e-3,
    }


@dataclass
class TrainConfig:
    iterations: int = 30000
    clustering_every: int = 50
    regularization_every: int = 100
    learning_rates: dict[str, float] = field(default_factory=default_learning_rates)
    position_lr_final: float = 1.6e-6
    position_lr_max_steps: int = 30000
    densify: bool = True
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    prune_opacity: float = 0.005
    densify_grad_threshold: float = 0.0002
    split_scale_threshold: float = 0.01
    too_large_scale: float = 0.1
    split_factor: float = 1.6
    lambda_dssim: float = 0.2
    lambda_clustering: float = 1e-6
    min_cluster_size: int = 100
    temperature_floor: float = 1e-2
    cluster_epsilon: float = 100.0
    stop_gradient: bool = True
    regularization_samples: int | None = None
    k_near: int = 2
    l_far: int = 5
    lambda_near: float = 0.05
    lambda_far: float = 0.15
    use_regularization: bool = True
    freeze_geometry: bool = False
    rng_seed: int = 0
    render: RenderOptions = field(default_factory=RenderOptions)

    def __post_init__(self):
        for name in ("clustering_every", "regularization_every", "densify_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("prune_opacity", "densify_grad_threshold", "split_scale_threshold", "too_large_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def scene_extent(cameras: list[Camera]) -> float:
    centers = np.stack([c.center for c in cameras])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())


@dataclass
class DensifyReport:
    """``parent[i]`` is the pre-densify row that new row ``i`` came from; ``kind[i]`` says how."""

    parent: np.ndarray
    kind: np.ndarray
    origin: np.ndarray
    pruned: int


def densify_and_prune(cloud: GaussianCloud, cfg: TrainConfig, rng: np.random.Generator,
                      extent: float = 1.0, optimizer: Adam | None = None,
                      hook: Callable | None = None) -> GaussianCloud:
    n = len(cloud)
    avg = np.where(cloud.grad_count > 0, cloud.grad_accum / np.maximum(cloud.grad_count, 1), 0.0)
    max_scale = cloud.scales.max(axis=1) if n else np.zeros(0)
    prune = (cloud.opacities < cfg.prune_opacity) | (max_scale > cfg.too_large_scale * extent)
    hot = (avg > cfg.densify_grad_threshold) & ~prune
    split = hot & (max_scale > cfg.split_scale_threshold * extent)
    clone = hot & ~split
    keep = ~prune & ~split

    kept = np.flatnonzero(keep)
    cloned = np.flatnonzero(clone)
    splitted = np.flatnonzero(split)
    parents = np.concatenate([kept, cloned, np.repeat(splitted, 2)]).astype(np.int64)
    kind = np.array(["keep"] * len(kept) + ["clone"] * len(cloned) + ["split"] * (2 * len(splitted)))
    out = cloud.subset(parents)

    if len(splitted):
        rows = slice(len(kept) + len(cloned), None)
        s = cloud.scales[splitted].repeat(2, axis=0)
        Rq = quaternion_to_matrix(normalize_quaternions(cloud.rotations[splitted])).repeat(2, axis=0)
        offset = np.einsum("nij,nj->ni", Rq, rng.normal(size=s.shape) * s)
        out.positions[rows] = cloud.positions[splitted].repeat(2, axis=0) + offset
        out.log_scales[rows] = np.log(s / cfg.split_factor)

    origin = np.where(kind == "keep", parents, -1)
    out.grad_accum = np.zeros(len(out))
    out.grad_count = np.zeros(len(out))
    if optimizer is not None:
        optimizer.take_rows(origin)
    if hook is not None:
        hook(cloud, out, DensifyReport(parents, kind, origin, int(prune.sum())))
    return out


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list[dict]
    optimizer: Adam


def _position_lr(cfg: TrainConfig, step: int, extent: float) -> float:
    t = np.clip(step / cfg.position_lr_max_steps, 0.0, 1.0)
    lr0 = cfg.learning_rates["positions"] * extent
    lr1 = cfg.position_lr_final * extent
    return float(np.exp(np.log(lr0) * (1 - t) + np.log(lr1) * t))


def train(cloud_init: GaussianCloud, dataset: list[View], cfg: TrainConfig, *,
          log_file=None, densify_hook: Callable | None = None, record_time: bool = True) -> TrainResult:
    """Run the optimization loop on ``dataset`` (views with color images and masks).

    ``log_file`` receives one JSON record per iteration.  ``densify_hook`` is
    called after every densification as ``hook(before, after, report)``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    for i, v in enumerate(dataset):
        if v.mask.shape != v.camera.shape:
            raise ValueError(f"mask of view {i} does not match its camera")
    cloud = cloud_init.copy()
    extent = scene_extent([v.camera for v in dataset])
    params = {k: getattr(cloud, k) for k in PARAM_GROUPS}
    optimizer = Adam(params, cfg.learning_rates)
    rng = np.random.default_rng(cfg.rng_seed)
    order: list[int] = []
    cached: dict[int, object] = {}
    table = None
    if cfg.freeze_geometry and cfg.use_regularization and len(cloud) > cfg.k_near + cfg.l_far:
        table = neighbor_pairs(cloud.positions, np.arange(len(cloud)), cfg.k_near, cfg.l_far)
    records = []

    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        if not order:
            order = list(rng.permutation(len(dataset)))
        vi = int(order.pop(0))
        view = dataset[vi]
        cam = view.camera
        apply_cc = it % cfg.clustering_every == 0
        apply_reg = cfg.use_regularization and it % cfg.regularization_every == 0

        try:
            if cfg.freeze_geometry:
                if vi not in cached:
                    cached[vi] = rasterize(cloud, cam, cfg.render)
                out = cached[vi]
                color = out.color
                fm = FeatureMap(replay(out.contribution_log, cloud.features), out.features.alpha)
            else:
                out = rasterize(cloud, cam, cfg.render)
                color, fm = out.color, out.features

            render = rendering_loss(color, view.image, cfg.lambda_dssim)
            cc = reg = None
            if apply_cc:
                unit, back = l2_normalize_map(fm)
                cc = contrastive_clustering_loss(
                    unit, view.mask, cfg.min_cluster_size, epsilon=cfg.cluster_epsilon,
                    temperature_floor=cfg.temperature_floor, stop_gradient=cfg.stop_gradient,
                )
                cc.grad_feature_map = back(cc.grad_feature_map)
            if apply_reg:
                reg = spatial_regularization(
                    cloud, cfg.regularization_samples, cfg.k_near, cfg.l_far,
                    cfg.lambda_near, cfg.lambda_far, np.random.default_rng([cfg.rng_seed, it]),
                    neighbors=table,
                )
            total = total_loss(render, cc, reg, cfg.lambda_clustering, apply_cc, apply_reg)
        except (ValueError, FloatingPointError) as exc:
            raise type(exc)(f"iteration {it}: {exc}") from exc

        grad_fm = total.grad_feature_map
        grads: dict[str, np.ndarray] = {}
        if cfg.freeze_geometry:
            g_feat = None
            if grad_fm is not None:
                g_feat = replay_adjoint(out.contribution_log, grad_fm)
        else:
            g_fm = grad_fm if grad_fm is not None else np.zeros(fm.data.shape)
            cg: CloudGradients = rasterize_backward(out, cloud, cam, total.grad_image, g_fm)
            grads = {k: v for k, v in cg.as_dict().items() if k != "features"}
            g_feat = cg.features if grad_fm is not None else None
            if cfg.densify and it <= cfg.densify_until:
                seen = np.unique(out.contribution_log.gaussian)
                cloud.grad_accum[seen] += screen_gradient_norms(cg, cam)[seen]
                cloud.grad_count[seen] += 1
        if total.grad_cloud_features is not None:
            g_feat = total.grad_cloud_features if g_feat is None else g_feat + total.grad_cloud_features
        if g_feat is not None:
            grads["features"] = g_feat

        optimizer.lrs["positions"] = _position_lr(cfg, it, extent)
        try:
            new = optimizer.step({k: getattr(cloud, k) for k in PARAM_GROUPS}, grads)
        except FloatingPointError as exc:
            raise FloatingPointError(f"iteration {it}: {exc}") from exc
        for k in grads:
            setattr(cloud, k, new[k])
        if "rotations" in grads:
            cloud.rotations = normalize_quaternions(cloud.rotations)
        if "colors" in grads:
            cloud.colors = np.clip(cloud.colors, 0.0, 1.0)

        if (not cfg.freeze_geometry and cfg.densify and cfg.densify_from <= it <= cfg.densify_until
                and it % cfg.densify_interval == 0):
            cloud = densify_and_prune(cloud, cfg, rng, extent, optimizer, densify_hook)

        rec = {"iteration": it, "view": vi, **total.term_breakdown, "gaussians": len(cloud)}
        if record_time:
            rec["ms"] = round(1000 * (time.perf_counter() - t0), 3)
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
        if it % 500 == 0:
            log.info("iter %d total %.6g gaussians %d", it, total.value, len(cloud))
    return TrainResult(cloud, records, optimizer)
