"""Deterministic synthetic scenes with ground-truth instances and noisy 2D masks.

Objects are blobs of small Gaussians resting on an optional ground plane and
observed by a ring of cameras looking at the scene centroid.  Ground-truth
masks come from the same contribution log used for color; the "automatic"
training masks are produced from them by :func:`corrupt_masks`, which renames
IDs independently per view and can split or drop segments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .rasterizer import RenderOptions, rasterize, replay
from .scene import DEFAULT_FEATURE_DIM, Camera, GaussianCloud, SegmentMask, normalize_quaternions

PALETTE = np.array([
    [0.85, 0.20, 0.20], [0.20, 0.65, 0.25], [0.20, 0.35, 0.85], [0.90, 0.75, 0.15],
    [0.70, 0.25, 0.75], [0.15, 0.75, 0.80], [0.95, 0.50, 0.10], [0.45, 0.30, 0.15],
])


@dataclass
class ObjectSpec:
    center: tuple
    radius: float
    count: int
    color: tuple | None = None


@dataclass
class SceneSpec:
    objects: list[ObjectSpec] = field(default_factory=lambda: default_objects())
    background_plane: bool = True
    plane_radius: float = 3.0
    plane_spacing: float = 0.3
    n_cameras: int = 25
    ring_radius: float = 4.0
    elevation_deg: float = 55.0
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    feature_dim: int = DEFAULT_FEATURE_DIM
    opacity: float = 0.8
    floaters: int = 0
    floater_opacity: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if not self.objects:
            raise ValueError("scene needs at least one object")
        if self.n_cameras < 2:
            raise ValueError("scene needs at least two cameras")
        if self.width < 16 or self.height < 16:
            raise ValueError("image dimensions must be at least 16")


def default_objects(n: int = 3, count: int = 200, radius: float = 0.45, spacing: float = 1.1):
    angles = 2 * np.pi * np.arange(n) / n + np.pi / 2
    return [
        ObjectSpec((spacing * np.cos(a), spacing * np.sin(a), radius), radius, count)
        for a in angles
    ]


@dataclass
class LabeledCloud:
    cloud: GaussianCloud
    instance_id: np.ndarray

    def __post_init__(self):
        self.instance_id = np.asarray(self.instance_id, dtype=np.int64)
        if len(self.instance_id) != len(self.cloud):
            raise ValueError("instance_id must have one entry per Gaussian")


def _random_quaternions(rng, n):
    return normalize_quaternions(rng.normal(size=(n, 4)))


def generate_scene(spec: SceneSpec) -> tuple[LabeledCloud, list[Camera]]:
    rng = np.random.default_rng(spec.rng_seed)
    pos, scl, rot, opa, col, ids = [], [], [], [], [], []
    for k, obj in enumerate(spec.objects, start=1):
        c = np.asarray(obj.center, dtype=np.float64)
        p = c + rng.normal(scale=obj.radius / 2.0, size=(obj.count, 3))
        pos.append(p)
        scl.append(obj.radius * rng.uniform(0.08, 0.16, size=(obj.count, 3)))
        rot.append(_random_quaternions(rng, obj.count))
        opa.append(np.full(obj.count, spec.opacity))
        base = np.asarray(obj.color if obj.color is not None else PALETTE[(k - 1) % len(PALETTE)])
        col.append(np.clip(base + rng.normal(scale=0.03, size=(obj.count, 3)), 0, 1))
        ids.append(np.full(obj.count, k))
    if spec.background_plane:
        r = spec.plane_radius
        g = np.arange(-r, r + 1e-9, spec.plane_spacing)
        xx, yy = np.meshgrid(g, g)
        inside = xx**2 + yy**2 <= r**2
        p = np.stack([xx[inside], yy[inside], np.zeros(inside.sum())], axis=1)
        n = len(p)
        pos.append(p)
        scl.append(np.column_stack([np.full(n, 0.6 * spec.plane_spacing)] * 2 + [np.full(n, 0.01)]))
        rot.append(np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)))
        opa.append(np.full(n, 0.95))
        col.append(np.clip(0.55 + rng.normal(scale=0.05, size=(n, 3)), 0, 1))
        ids.append(np.zeros(n, dtype=np.int64))
    if spec.floaters:
        # faint, poorly observed Gaussians scattered through the object volume
        c = np.array([o.center for o in spec.objects])
        r = max(o.radius for o in spec.objects)
        lo, hi = c.min(axis=0) - 2 * r, c.max(axis=0) + 2 * r
        lo[2] = 0.05
        n = spec.floaters
        pos.append(rng.uniform(lo, hi, size=(n, 3)))
        scl.append(np.full((n, 3), 0.04))
        rot.append(_random_quaternions(rng, n))
        opa.append(np.full(n, spec.floater_opacity))
        col.append(rng.uniform(0, 1, size=(n, 3)))
        ids.append(np.zeros(n, dtype=np.int64))
    n_total = sum(len(p) for p in pos)
    feats = rng.normal(size=(n_total, spec.feature_dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    cloud = GaussianCloud.from_activated(
        np.concatenate(pos), np.concatenate(scl), np.concatenate(rot), np.concatenate(opa),
        np.concatenate(col), feats,
    )
    target = np.mean([o.center for o in spec.objects], axis=0)
    cams = []
    elev = np.radians(spec.elevation_deg)
    for i in range(spec.n_cameras):
        az = 2 * np.pi * i / spec.n_cameras
        eye = target + spec.ring_radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        cams.append(Camera.look_at(eye, target, width=spec.width, height=spec.height, fov_deg=spec.fov_deg))
    return LabeledCloud(cloud, np.concatenate(ids)), cams


def instance_weights(lc: LabeledCloud, cam: Camera, opts: RenderOptions | None = None) -> np.ndarray:
    """Accumulated blending weight per instance (H x W x (max_id + 1)), via the color contribution log."""
    out = rasterize(lc.cloud, cam, opts)
    n_ids = int(lc.instance_id.max()) + 1 if len(lc.instance_id) else 1
    onehot = np.zeros((len(lc.cloud), n_ids))
    onehot[np.arange(len(lc.cloud)), lc.instance_id] = 1.0
    return replay(out.contribution_log, onehot)


def render_gt_masks(lc: LabeledCloud, cam: Camera, *, label_background: bool = False,
                    opts: RenderOptions | None = None) -> SegmentMask:
    """Majority-weight instance labels; 0 where no instance holds more than half the weight.

    With ``label_background`` pixels won by instance 0 (the ground plane) get
    their own ID ``max_id + 1`` instead of 0, the way an automatic segmenter
    would treat a visible table or floor.
    """
    if len(lc.cloud) == 0:
        return SegmentMask(np.zeros(cam.shape, dtype=np.int64))
    w = instance_weights(lc, cam, opts)
    best = np.argmax(w, axis=-1)
    label = np.where(np.take_along_axis(w, best[..., None], -1)[..., 0] > 0.5, best, -1)
    if label_background:
        label = np.where(label == 0, w.shape[-1], label)
    return SegmentMask(np.maximum(label, 0))


def _split_segment(labels, sid, rng, new_id):
    vv, uu = np.nonzero(labels == sid)
    theta = rng.uniform(0, np.pi)
    proj = uu * np.cos(theta) + vv * np.sin(theta)
    proj = proj + rng.uniform(-0.25, 0.25) * (proj.max() - proj.min())
    thr = np.median(proj)
    side = proj > thr
    if side.all() or not side.any():
        side = proj >= thr
    if side.all() or not side.any():
        return labels
    out = labels.copy()
    out[vv[side], uu[side]] = new_id
    return out


def corrupt_masks(masks: list[SegmentMask], rng_seed: int, split_prob: float = 0.0,
                  drop_prob: float = 0.0, merge_prob: float = 0.0) -> list[SegmentMask]:
    """View-independent corruption: split / drop / (optional) merge, then random renaming."""
    for name, p in (("split_prob", split_prob), ("drop_prob", drop_prob), ("merge_prob", merge_prob)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    out = []
    for v, mask in enumerate(masks):
        rng = np.random.default_rng([rng_seed, v])
        labels = mask.labels.copy()
        ids = np.unique(labels[labels > 0])
        if rng.random() < split_prob and len(ids):
            labels = _split_segment(labels, rng.choice(ids), rng, labels.max() + 1)
        ids = np.unique(labels[labels > 0])
        if rng.random() < drop_prob and len(ids):
            labels[labels == rng.choice(ids)] = 0
        ids = np.unique(labels[labels > 0])
        if rng.random() < merge_prob and len(ids) >= 2:
            a, b = rng.choice(ids, size=2, replace=False)
            labels[labels == b] = a
        ids = np.unique(labels[labels > 0])
        fresh = rng.choice(np.arange(1, 65536), size=len(ids), replace=False)
        lut = np.zeros(int(labels.max()) + 1, dtype=np.int64)
        lut[ids] = fresh
        out.append(SegmentMask(lut[labels]))
    return out


def prompt_pixel(mask: SegmentMask, segment_id: int) -> tuple[int, int] | None:
    """The pixel ``(u, v)`` deepest inside a segment (largest distance to its border)."""
    inside = mask.labels == segment_id
    if not inside.any():
        return None
    depth = distance_transform_edt(np.pad(inside, 1))[1:-1, 1:-1]
    v, u = np.unravel_index(np.argmax(depth), depth.shape)
    return int(u), int(v)


@dataclass
class View:
    camera: Camera
    image: np.ndarray
    mask: SegmentMask
    gt_mask: SegmentMask | None = None
    index: int = -1


@dataclass
class SyntheticDataset:
    scene: LabeledCloud
    train: list[View]
    test: list[View]
    spec: SceneSpec


def make_dataset(spec: SceneSpec | None = None, *, test_every: int = 5, split_prob: float = 0.3,
                 drop_prob: float = 0.0, corruption_seed: int | None = None) -> SyntheticDataset:
    """Render a scene from every camera; every ``test_every``-th camera is held out."""
    spec = spec or SceneSpec()
    lc, cams = generate_scene(spec)
    views = []
    for i, cam in enumerate(cams):
        img = rasterize(lc.cloud, cam).color
        gt = render_gt_masks(lc, cam)
        auto = render_gt_masks(lc, cam, label_background=True)
        views.append(View(cam, img, auto, gt, i))
    is_test = [(i % test_every) == test_every // 2 for i in range(len(views))]
    train = [v for v, t in zip(views, is_test) if not t]
    test = [v for v, t in zip(views, is_test) if t]
    seed = spec.rng_seed if corruption_seed is None else corruption_seed
    for v, m in zip(train, corrupt_masks([v.mask for v in train], seed, split_prob, drop_prob)):
        v.mask = m
    for v in test:
        v.mask = v.gt_mask
    return SyntheticDataset(lc, train, test, spec)
