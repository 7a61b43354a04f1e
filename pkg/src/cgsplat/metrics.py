"""Mask metrics (IoU, boundary IoU) and the query-over-views evaluation."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .rasterizer import RenderOptions, rasterize
from .scene import Camera, GaussianCloud, SegmentMask
from .segmenter import (
    DegenerateQueryError, object_mask, pick_discriminative_feature, resolve_prompt, similarity_map,
)

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def default_band(shape) -> int:
    return max(1, int(round(0.02 * np.hypot(*shape[:2]))))


def boundary_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Mask pixels within Chebyshev distance ``d`` of the mask's 4-connected boundary."""
    interior = binary_erosion(mask, structure=_CROSS, border_value=0)
    boundary = mask & ~interior
    if not boundary.any():
        return boundary
    return binary_dilation(boundary, structure=np.ones((3, 3), bool), iterations=d) & mask


def boundary_iou(pred, gt, d: int | None = None) -> float:
    pred, gt = _check(pred, gt)
    d = default_band(pred.shape) if d is None else d
    if d < 1:
        raise ValueError("band width must be >= 1")
    return iou(boundary_band(pred, d), boundary_band(gt, d))


@dataclass
class Query:
    object_id: int
    prompt: object
    reference: Camera


@dataclass
class EvalReport:
    iou: list[float]
    biou: list[float]
    object_ids: list[int]
    per_view_iou: list[list[float]] = field(default_factory=list)
    render_ms: list[float] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)

    @property
    def miou(self) -> float:
        return float(np.mean(self.iou)) if self.iou else 0.0

    @property
    def mbiou(self) -> float:
        return float(np.mean(self.biou)) if self.biou else 0.0

    def to_table(self) -> str:
        lines = [f"{'query':>5} {'object':>6} {'IoU':>7} {'BIoU':>7}"]
        for i, (oid, a, b) in enumerate(zip(self.object_ids, self.iou, self.biou)):
            lines.append(f"{i:>5} {oid:>6} {a:7.4f} {b:7.4f}")
        lines.append(f"{'mean':>12} {self.miou:7.4f} {self.mbiou:7.4f}")
        if self.render_ms:
            lines.append(f"render ms per view: {', '.join(f'{t:.1f}' for t in self.render_ms)}")
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        recs = [{"query": i, "object_id": o, "iou": a, "biou": b, "failed": i in self.failed}
                for i, (o, a, b) in enumerate(zip(self.object_ids, self.iou, self.biou))]
        recs.append({"miou": self.miou, "mbiou": self.mbiou, "render_ms": self.render_ms})
        return "".join(json.dumps(r) + "\n" for r in recs)


def evaluate(cloud: GaussianCloud, cameras_test: list[Camera], gt_masks: list[SegmentMask],
             queries: list[Query], t: float = 0.7, *, band: int | None = None,
             opts: RenderOptions | None = None) -> EvalReport:
    """Score every query against every test view; failed queries score 0."""
    if len(cameras_test) != len(gt_masks):
        raise ValueError("need one ground-truth mask per test camera")
    feature_maps, render_ms = [], []
    for cam in cameras_test:
        t0 = time.perf_counter()
        feature_maps.append(rasterize(cloud, cam, opts).features)
        render_ms.append(1000 * (time.perf_counter() - t0))

    ious, bious, failed, per_view = [], [], [], []
    for qi, q in enumerate(queries):
        try:
            pixel = resolve_prompt(q.prompt)
            ref_fm = rasterize(cloud, q.reference, opts).features
            feat, degenerate = pick_discriminative_feature(ref_fm, pixel)
            if degenerate:
                raise DegenerateQueryError(f"no rendered feature at pixel {pixel}")
        except (DegenerateQueryError, IndexError):
            failed.append(qi)
            ious.append(0.0)
            bious.append(0.0)
            per_view.append([0.0] * len(cameras_test))
            continue
        vi, vb = [], []
        for fm, gt in zip(feature_maps, gt_masks):
            pred = object_mask(similarity_map(fm, feat), t)
            truth = gt.labels == q.object_id
            vi.append(iou(pred, truth))
            vb.append(boundary_iou(pred, truth, band))
        ious.append(float(np.mean(vi)))
        bious.append(float(np.mean(vb)))
        per_view.append(vi)
    return EvalReport(ious, bious, [q.object_id for q in queries], per_view, render_ms, failed)
