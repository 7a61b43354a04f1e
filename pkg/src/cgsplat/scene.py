"""Scene primitives: Gaussians, clouds, cameras, masks and feature maps.

A :class:`GaussianCloud` stores its primitives as parallel arrays (one row per
Gaussian).  Scales are kept in log domain and opacities as logits so that an
unconstrained optimizer step can never leave the valid range; the activated
values are exposed as properties.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

DEFAULT_FEATURE_DIM = 16


sigmoid = expit


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Scale quaternions (``..., 4`` in wxyz order) to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions in wxyz order, shape ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_to_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for the formula in :func:`quaternion_to_matrix`, shape ``(..., 3, 3, 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (3, 3, 4))
    J[..., 0, 0, :] = np.stack([zero, zero, -4 * y, -4 * z], -1)
    J[..., 0, 1, :] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], -1)
    J[..., 0, 2, :] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], -1)
    J[..., 1, 0, :] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], -1)
    J[..., 1, 1, :] = np.stack([zero, -4 * x, zero, -4 * z], -1)
    J[..., 1, 2, :] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], -1)
    J[..., 2, 0, :] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], -1)
    J[..., 2, 1, :] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], -1)
    J[..., 2, 2, :] = np.stack([zero, -4 * x, -4 * y, zero], -1)
    return J


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (wxyz, w >= 0) for a rotation matrix."""
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def covariances(log_scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Batched ``R diag(s)^2 R^T`` for ``(N, 3)`` log-scales and ``(N, 4)`` quaternions."""
    R = quaternion_to_matrix(normalize_quaternions(quats))
    M = R * np.exp(log_scales)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Gaussian:
    """A single activated primitive (a read-out of one cloud row)."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = normalize_quaternions(self.rotation)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")


def covariance_of(g: Gaussian) -> np.ndarray:
    R = quaternion_to_matrix(g.rotation)
    M = R * g.scale
    return M @ M.T


@dataclass
class GaussianCloud:
    """Parallel-array storage for ``N`` Gaussians.

    ``grad_accum``/``grad_count`` hold the screen-space positional gradient
    statistics consumed by densification; they always have one entry per row.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != n:
            raise ValueError(f"features must have shape (N, D) with N={n}")
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)
        if len(self.grad_accum) != n or len(self.grad_count) != n:
            raise ValueError("gradient statistics must have one entry per Gaussian")

    @classmethod
    def from_activated(cls, positions, scales, rotations, opacities, colors, features, background=None):
        opacities = np.clip(np.asarray(opacities, dtype=np.float64), 1e-6, 1 - 1e-6)
        return cls(
            positions=positions,
            log_scales=np.log(np.asarray(scales, dtype=np.float64)),
            rotations=normalize_quaternions(rotations),
            opacity_logits=logit(opacities),
            colors=colors,
            features=features,
            background=np.zeros(3) if background is None else background,
        )

    @classmethod
    def empty(cls, feature_dim: int = DEFAULT_FEATURE_DIM, background=None):
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
            np.zeros((0, feature_dim)), background=np.zeros(3) if background is None else background,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i], self.scales[i], self.rotations[i],
            float(self.opacities[i]), self.colors[i], self.features[i],
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return covariances(self.log_scales, self.rotations)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.opacity_logits.copy(), self.colors.copy(), self.features.copy(),
            self.background.copy(), self.grad_accum.copy(), self.grad_count.copy(),
        )

    def subset(self, index) -> "GaussianCloud":
        index = np.asarray(index)
        return GaussianCloud(
            self.positions[index], self.log_scales[index], self.rotations[index],
            self.opacity_logits[index], self.colors[index], self.features[index],
            self.background.copy(), self.grad_accum[index], self.grad_count[index],
        )

    def check_finite(self):
        """Raise ``ValueError`` naming the first Gaussian with a non-finite parameter."""
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors", "features"):
            arr = getattr(self, name)
            arr = arr.reshape(len(arr), int(np.prod(arr.shape[1:])))
            bad = ~np.isfinite(arr).all(axis=1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise ValueError(f"non-finite {name} for Gaussian {i}")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation`` (wxyz) and ``translation`` map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        q = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", tuple(float(v) for v in q / np.linalg.norm(q)))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @property
    def R(self) -> np.ndarray:
        return quaternion_to_matrix(np.asarray(self.rotation))

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width, height, fov_deg=50.0, near=0.01):
        """Camera at ``eye`` with its optical axis through ``target`` (x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(
            fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height,
            rotation=tuple(matrix_to_quaternion(R)), translation=tuple(-R @ eye), near=near,
        )


@dataclass
class SegmentMask:
    """Per-pixel segment IDs for one view; 0 marks unlabeled pixels."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2D array")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("segment IDs must be non-negative")
        self.labels = self.labels.astype(np.int64)

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class FeatureMap:
    """Rendered ``H x W x D`` features plus the accumulated opacity per pixel."""

    data: np.ndarray
    alpha: np.ndarray

    @property
    def shape(self):
        return self.data.shape

    @property
    def feature_dim(self) -> int:
        return self.data.shape[-1]
