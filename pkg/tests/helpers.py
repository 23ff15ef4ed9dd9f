"""Shared test utilities and independent oracles.

Everything here is deliberately written without touching the package's
geometry code paths it is used to verify: the chain-growth builder places
atoms with an explicit reference-frame construction, and the brute-force
dihedral locates the torsion by rotating the fourth point about the
central bond until it falls into the first point's half-plane.
"""

from __future__ import annotations

import math

import numpy as np

from protein_ssl.config import TrainConfig
from protein_ssl.geometry import RBFConfig
from protein_ssl.graph_builder import build_graph
from protein_ssl.structure_io import ProteinStructure, Residue

# idealized backbone parameters (Angstroms, degrees)
BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
ANGLE_N_CA_C = math.radians(111.2)
ANGLE_CA_C_N = math.radians(116.2)
ANGLE_C_N_CA = math.radians(121.7)
OMEGA_TRANS = math.pi

AA_CYCLE = "ACDEFGHIKLMNPQRSTVWY"
ONE_TO_THREE = {
    "A": "ALA", "C": "CYS", "D": "ASP", "E": "GLU", "F": "PHE",
    "G": "GLY", "H": "HIS", "I": "ILE", "K": "LYS", "L": "LEU",
    "M": "MET", "N": "ASN", "P": "PRO", "Q": "GLN", "R": "ARG",
    "S": "SER", "T": "THR", "V": "VAL", "W": "TRP", "Y": "TYR",
}


def _unit(v):
    return v / np.linalg.norm(v)


def place_atom(a, b, c, bond_length, bond_angle, torsion):
    """Extend the chain a-b-c by one atom with given internal coordinates."""
    bc = _unit(c - b)
    n = _unit(np.cross(b - a, bc))
    m = np.cross(n, bc)
    d = bond_length * (
        -math.cos(bond_angle) * bc
        + math.sin(bond_angle) * math.cos(torsion) * m
        + math.sin(bond_angle) * math.sin(torsion) * n
    )
    return c + d


def build_chain(phis, psis, structure_id="chain", letters=None):
    """Forward-build backbone coordinates from per-residue torsions.

    ``phis[0]`` and ``psis[-1]`` are ignored (undefined at the chain ends).
    Residue codes follow ``letters`` (one-letter codes, repeated as needed)
    or cycle through the twenty standard amino acids.
    """
    length = len(phis)
    assert len(psis) == length and length >= 2
    letters = letters or AA_CYCLE
    n = [np.array([0.0, 0.0, 0.0])]
    ca = [np.array([BOND_N_CA, 0.0, 0.0])]
    c = [ca[0] + BOND_CA_C * np.array([-math.cos(ANGLE_N_CA_C), math.sin(ANGLE_N_CA_C), 0.0])]
    for i in range(length - 1):
        n.append(place_atom(n[i], ca[i], c[i], BOND_C_N, ANGLE_CA_C_N, psis[i]))
        ca.append(place_atom(ca[i], c[i], n[i + 1], BOND_N_CA, ANGLE_C_N_CA, OMEGA_TRANS))
        c.append(place_atom(c[i], n[i + 1], ca[i + 1], BOND_CA_C, ANGLE_N_CA_C, phis[i + 1]))
    residues = [
        Residue(code=ONE_TO_THREE[letters[i % len(letters)]], n=n[i], ca=ca[i], c=c[i])
        for i in range(length)
    ]
    return ProteinStructure(id=structure_id, residues=residues)


def helix_structure(length, structure_id="helix"):
    """Idealized alpha helix: phi = -57 deg, psi = -47 deg throughout."""
    phi = math.radians(-57.0)
    psi = math.radians(-47.0)
    return build_chain([phi] * length, [psi] * length, structure_id=structure_id)


def rotate_about(v, axis, angle):
    """Rodrigues rotation of vector v about a unit axis."""
    return (
        v * math.cos(angle)
        + np.cross(axis, v) * math.sin(angle)
        + axis * (axis @ v) * (1.0 - math.cos(angle))
    )


def oracle_dihedral(p0, p1, p2, p3, grid=4096):
    """Brute-force torsion: rotate p3 about the central bond by -t until it
    lies in p0's half-plane; the minimizing t is the dihedral. Grid scan
    followed by ternary refinement."""
    p0, p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p0, p1, p2, p3))
    axis = _unit(p2 - p1)
    u = p0 - p1
    u = _unit(u - (u @ axis) * axis)
    w = np.cross(axis, u)
    rel = p3 - p2

    def distance(t):
        q = rotate_about(rel, axis, -t)
        cu = q @ u
        cw = q @ w
        return abs(cw) if cu >= 0 else math.hypot(cw, cu)

    ts = np.linspace(-math.pi, math.pi, grid)
    best = min(ts, key=distance)
    lo, hi = best - 2 * math.pi / grid, best + 2 * math.pi / grid
    for _ in range(120):
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        if distance(m1) <= distance(m2):
            hi = m2
        else:
            lo = m1
    t = (lo + hi) / 2
    if t <= -math.pi:
        t += 2 * math.pi
    return t


def random_rigid_motion(rng):
    """Random proper rotation (det +1) and translation."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q, rng.normal(size=3) * 10.0


def transform_structure(structure, rotation, translation):
    moved = [
        Residue(
            code=r.code,
            n=rotation @ r.n + translation,
            ca=rotation @ r.ca + translation,
            c=rotation @ r.c + translation,
        )
        for r in structure.residues
    ]
    return ProteinStructure(id=structure.id, residues=moved)


def structure_to_pdb_text(structure, chain="A"):
    """Fixed-column PDB writer used purely as a parser test fixture."""
    lines = []
    serial = 1
    for i, res in enumerate(structure.residues, start=1):
        for name, pos in (("N", res.n), ("CA", res.ca), ("C", res.c)):
            lines.append(
                f"ATOM  {serial:5d}  {name:<3s}{res.code:>4s} {chain}{i:4d}    "
                f"{pos[0]:8.3f}{pos[1]:8.3f}{pos[2]:8.3f}  1.00  0.00"
                f"           {name[0]}"
            )
            serial += 1
    lines.append("END")
    return "\n".join(lines) + "\n"


def tiny_config(**overrides):
    """Small but non-trivial defaults for fast training tests."""
    cfg = TrainConfig(
        hidden_dim=8,
        gnn_layers=2,
        seq_dim=6,
        rbf_count=4,
        bins=10,
        batch_size=2,
        epochs=2,
        mask_ratio=0.25,
        seed=7,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


def graph_from_structure(structure, cfg, seq_emb=None):
    rbf = RBFConfig.uniform(cfg.rbf_count, cfg.rbf_gamma)
    if seq_emb is None:
        seq_emb = np.zeros((len(structure), 0))
    return build_graph(structure, seq_emb, cfg.threshold, rbf)
