"""Gaussian primitives stored as a struct of arrays."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..geometry import quat_to_rotmat

MAGIC = b"TGGS1"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(eq=False)
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    log_scales: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


@dataclass(eq=False)
class GaussianSet:
    """N anisotropic Gaussians plus the scene centre and radius they live in."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.radius = float(self.radius)
        if not self.radius > 0 or not np.all(np.isfinite(self.center)):
            raise ValidationError("scene radius must be positive and centre finite")

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls, center=(0.0, 0.0, 0.0), radius=1.0):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), center, radius)

    @classmethod
    def from_gaussians(cls, gaussians, center, radius):
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(center, radius)
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scales for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            center,
            radius,
        )

    def gaussian(self, i):
        return Gaussian(
            self.means[i].copy(),
            self.quats[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    def __iter__(self):
        return (self.gaussian(i) for i in range(len(self)))

    @property
    def alphas(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def rotations(self):
        return quat_to_rotmat(self.quats) if len(self) else np.zeros((0, 3, 3))

    def copy(self):
        return GaussianSet(
            self.means.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            self.center.copy(),
            self.radius,
        )

    def subset(self, index):
        return GaussianSet(
            self.means[index],
            self.quats[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.colors[index],
            self.center,
            self.radius,
        )

    def validate(self):
        """Raise :class:`ValidationError` naming the first non-finite Gaussian."""
        fields = {
            "position": self.means,
            "rotation": self.quats,
            "log_scales": self.log_scales,
            "opacity_logit": self.opacity_logits[:, None],
            "color": self.colors,
        }
        for name, arr in fields.items():
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                i = int(np.argmax(bad))
                raise ValidationError(f"Gaussian {i} has a non-finite {name}")
        bad = ~np.all(np.isfinite(np.exp(self.log_scales)), axis=1) | np.any(np.exp(self.log_scales) <= 0, axis=1)
        if bad.any():
            raise ValidationError(f"Gaussian {int(np.argmax(bad))} has a non-finite scale")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(norms == 0):
            raise ValidationError(f"Gaussian {int(np.argmax(norms == 0))} has a zero quaternion")


def concat(sets, center=None, radius=None):
    """Stack several sets into one; centre/radius default to the first set's."""
    sets = list(sets)
    if not sets:
        raise ValueError("nothing to concatenate")
    return GaussianSet(
        np.concatenate([s.means for s in sets]),
        np.concatenate([s.quats for s in sets]),
        np.concatenate([s.log_scales for s in sets]),
        np.concatenate([s.opacity_logits for s in sets]),
        np.concatenate([s.colors for s in sets]),
        sets[0].center if center is None else center,
        sets[0].radius if radius is None else radius,
    )


def build_covariance(rotation, log_scales):
    """Covariance R diag(s^2) R^T from a quaternion and log-scales.

    Accepts single inputs or batches with a leading dimension.
    """
    R = quat_to_rotmat(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


# ---------------------------------------------------------------------------
# TGGS1 binary: magic, uint32 count, count x 14 float32, centre (3) + radius (1)


def save_gaussians(gs, path):
    n = len(gs)
    body = np.concatenate(
        [gs.means, gs.quats, gs.log_scales, gs.opacity_logits[:, None], gs.colors], axis=1
    ).astype("<f4")
    tail = np.concatenate([gs.center, [gs.radius]]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(body.tobytes())
        fh.write(tail.tobytes())


def load_gaussians(path):
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise ValidationError(f"{path}: not a TGGS1 file")
    (n,) = struct.unpack("<I", buf[5:9])
    expect = 9 + n * 14 * 4 + 16
    if len(buf) != expect:
        raise ValidationError(f"{path}: size {len(buf)} does not match {n} Gaussians")
    body = np.frombuffer(buf[9 : 9 + n * 56], dtype="<f4").reshape(n, 14).astype(np.float64)
    tail = np.frombuffer(buf[9 + n * 56 :], dtype="<f4").astype(np.float64)
    quats = body[:, 3:7]
    if n:
        quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet(body[:, 0:3], quats, body[:, 7:10], body[:, 10], body[:, 11:14], tail[:3], tail[3])
