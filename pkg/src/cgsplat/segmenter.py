"""Object selection from a trained feature field.

A prompt pixel yields a unit "discriminative" feature; cosine similarity of
every rendered pixel feature to it, thresholded at ``t``, gives a 2D mask in
any view.  The same query applied to the per-Gaussian features selects a 3D
object, which :func:`convex_hull_extract` completes with every Gaussian lying
inside the convex hull of the selection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .rasterizer import RenderOptions, rasterize
from .scene import Camera, FeatureMap, GaussianCloud, SegmentMask


class DegenerateQueryError(ValueError):
    """The prompt resolves to a pixel with no rendered feature."""


@dataclass
class SimilarityMap:
    values: np.ndarray


@dataclass
class ObjectSelection3D:
    seed_indices: np.ndarray
    hull_indices: np.ndarray
    degenerate: bool = False


def _unit(v: np.ndarray, eps: float = 1e-12):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > eps, v / np.where(n > eps, n, 1.0), 0.0)


def pick_discriminative_feature(fm: FeatureMap, pixel: tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Unit rendered feature at pixel ``(u, v)`` and whether it was degenerate (zero)."""
    u, v = pixel
    H, W = fm.data.shape[:2]
    if not (0 <= u < W and 0 <= v < H):
        raise IndexError(f"pixel {pixel} outside a {W}x{H} image")
    f = fm.data[v, u]
    n = np.linalg.norm(f)
    if n <= 1e-12:
        return np.zeros_like(f), True
    return f / n, False


def similarity_map(fm: FeatureMap, query: np.ndarray) -> SimilarityMap:
    query = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(query)
    if qn <= 1e-12:
        raise DegenerateQueryError("query feature is zero")
    s = _unit(fm.data) @ (query / qn)
    return SimilarityMap(np.clip(s, -1.0, 1.0))


def object_mask(sc: SimilarityMap, t: float = 0.7) -> np.ndarray:
    return sc.values >= t


def select_gaussians_3d(cloud: GaussianCloud, query: np.ndarray, t: float = 0.7) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(query)
    if qn <= 1e-12:
        raise DegenerateQueryError("query feature is zero")
    return np.flatnonzero(_unit(cloud.features) @ (query / qn) >= t)


def points_in_hull(points: np.ndarray, hull: ConvexHull, tol: float = 1e-9) -> np.ndarray:
    eq = hull.equations
    return np.all(points @ eq[:, :3].T + eq[:, 3] <= tol, axis=1)


def convex_hull_extract(cloud: GaussianCloud, seeds, tol: float = 1e-9) -> ObjectSelection3D:
    seeds = np.unique(np.asarray(seeds, dtype=np.int64))
    pts = cloud.positions[seeds]
    try:
        if len(seeds) < 4:
            raise QhullError("fewer than four seeds")
        hull = ConvexHull(pts)
    except QhullError:
        return ObjectSelection3D(seeds, seeds.copy(), degenerate=True)
    inside = points_in_hull(cloud.positions, hull, tol)
    inside[seeds] = True
    return ObjectSelection3D(seeds, np.flatnonzero(inside))


def resolve_prompt(prompt) -> tuple[int, int]:
    """A prompt is either a ``(u, v)`` pixel or a ``(SegmentMask, segment_id)`` pair."""
    if isinstance(prompt, tuple) and len(prompt) == 2 and isinstance(prompt[0], SegmentMask):
        from .synthdata import prompt_pixel

        px = prompt_pixel(*prompt)
        if px is None:
            raise DegenerateQueryError(f"segment {prompt[1]} is absent from the prompt mask")
        return px
    u, v = prompt
    return int(u), int(v)


def query_feature(cloud: GaussianCloud, ref_cam: Camera, prompt, opts: RenderOptions | None = None) -> np.ndarray:
    pixel = resolve_prompt(prompt)
    fm = rasterize(cloud, ref_cam, opts).features
    q, degenerate = pick_discriminative_feature(fm, pixel)
    if degenerate:
        raise DegenerateQueryError(f"no rendered feature at pixel {pixel}")
    return q


def segment_query(cloud: GaussianCloud, cam: Camera, prompt, t: float = 0.7, *,
                  ref_cam: Camera | None = None, opts: RenderOptions | None = None) -> np.ndarray:
    """Binary mask in ``cam`` for the object under ``prompt`` in ``ref_cam`` (default: ``cam``)."""
    q = query_feature(cloud, ref_cam or cam, prompt, opts)
    fm = rasterize(cloud, cam, opts).features
    return object_mask(similarity_map(fm, q), t)


def segment_queries(cloud: GaussianCloud, cam: Camera, prompts, t: float = 0.7, *,
                    ref_cam: Camera | None = None, opts: RenderOptions | None = None) -> np.ndarray:
    """Label image for several objects at once: pixel gets ``i + 1`` for the best-matching prompt ``i``.

    A pixel claimed by more than one query goes to the one with the highest similarity;
    0 means no query reaches ``t``.
    """
    fm = rasterize(cloud, cam, opts).features
    ref_fm = fm if ref_cam is None else rasterize(cloud, ref_cam, opts).features
    labels = np.zeros(cam.shape, dtype=np.int64)
    best = np.full(cam.shape, -np.inf)
    for i, prompt in enumerate(prompts):
        pixel = resolve_prompt(prompt)
        q, degenerate = pick_discriminative_feature(ref_fm, pixel)
        if degenerate:
            raise DegenerateQueryError(f"no rendered feature at pixel {pixel}")
        s = similarity_map(fm, q).values
        win = (s >= t) & (s > best)
        labels[win] = i + 1
        best[win] = s[win]
    return labels
