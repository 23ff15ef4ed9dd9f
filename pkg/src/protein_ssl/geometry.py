"""Backbone geometry: pairwise distances, dihedral angles, RBF features.

Dihedral angles follow the standard biochemical sign convention: looking
along the central bond, the angle from the first plane to the second is
positive clockwise, in (-pi, pi]. phi rotates about N-CA, psi about CA-C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry

DEGENERACY_EPS = 1e-10


def pairwise_distances(structure):
    """Euclidean distances between all CA pairs, exactly symmetric."""
    ca = structure.ca_coordinates()
    diff = ca[:, None, :] - ca[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    upper = np.triu(d, 1)
    return upper + upper.T


def dihedral(p0, p1, p2, p3):
    """Signed dihedral of four points via the two-plane construction."""
    p0, p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2, p3))
    b1 = p1 - p0
    b2 = p2 - p1
    b3 = p3 - p2
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    if np.linalg.norm(n1) < DEGENERACY_EPS or np.linalg.norm(n2) < DEGENERACY_EPS:
        raise DegenerateGeometry("collinear points leave the dihedral undefined")
    b2u = b2 / np.linalg.norm(b2)
    x = float(n1 @ n2)
    y = float(np.cross(b2u, n1) @ n2)
    angle = math.atan2(y, x)
    if angle <= -math.pi:
        angle = math.pi
    return angle


@dataclass(frozen=True)
class DihedralPair:
    """phi/psi for one residue; None marks the undefined chain-end angle."""

    phi: float | None
    psi: float | None


def backbone_dihedrals(structure):
    """Per-residue (phi, psi) pairs.

    phi_i uses C of the previous residue and is undefined at the first
    residue; psi_i uses N of the next residue and is undefined at the last.
    """
    res = structure.residues
    if len(res) < 2:
        raise ValueError("need at least two residues for backbone dihedrals")
    pairs = []
    for i, r in enumerate(res):
        phi = psi = None
        try:
            if i > 0:
                phi = dihedral(res[i - 1].c, r.n, r.ca, r.c)
            if i < len(res) - 1:
                psi = dihedral(r.n, r.ca, r.c, res[i + 1].n)
        except DegenerateGeometry as exc:
            raise DegenerateGeometry(f"residue {i}: {exc}") from exc
        pairs.append(DihedralPair(phi=phi, psi=psi))
    return pairs


def normalize_angle(angle):
    """Map radians in (-pi, pi] to [-1, 1]; None (undefined) maps to 0."""
    if angle is None:
        return 0.0
    if not -math.pi < angle <= math.pi + 1e-12:
        raise ValueError(f"angle {angle} outside (-pi, pi]")
    return angle / math.pi


@dataclass(frozen=True)
class RBFConfig:
    """Gaussian kernel sharpness and center grid for angle featurization."""

    gamma: float
    centers: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        object.__setattr__(self, "centers", centers)
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if centers.ndim != 1 or centers.size < 2:
            raise ValueError("need at least two centers")
        if not np.all(np.diff(centers) > 0):
            raise ValueError("centers must be strictly increasing")

    @property
    def count(self):
        return int(self.centers.size)

    @classmethod
    def uniform(cls, count=16, gamma=10.0):
        return cls(gamma=gamma, centers=np.linspace(-1.0, 1.0, count))


def rbf_expand(x, cfg):
    """Gaussian expansion of a scalar: exp(-gamma * (x - center)^2) per center."""
    return np.exp(-cfg.gamma * (x - cfg.centers) ** 2)
