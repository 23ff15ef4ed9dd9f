"""Residue-graph assembly, angle-feature masking, and the graph cache.

Node feature layout, left to right: sequence-embedding block (seq_dim
columns, may be empty when embeddings are attached at training time), the
phi RBF block, the psi RBF block, and two presence flags (1 when the
corresponding angle is defined). Masking zeroes everything right of the
sequence block for the chosen nodes and appends a mask-indicator column.

Cache layout (little-endian, magic ``SGR1``): id, L, F, seq_dim, rbf
count, node features as float32 row-major, the edge list (i, j, weight as
float64), the float64 distance matrix, per-residue dihedral targets with
presence bytes, and the one-letter sequence.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NoMaskable
from .geometry import backbone_dihedrals, normalize_angle, pairwise_distances, rbf_expand
from .structure_io import ProteinSequence, to_sequence

GRAPH_MAGIC = b"SGR1"


@dataclass
class ProteinGraph:
    """Residue graph with features, weighted edges, and retained targets."""

    id: str
    features: np.ndarray
    seq_dim: int
    rbf_count: int
    edges: list  # (i, j, weight) with i < j; symmetry implied
    distances: np.ndarray
    dihedrals: list
    sequence: ProteinSequence

    @property
    def node_count(self):
        return int(self.features.shape[0])

    @property
    def feature_dim(self):
        return int(self.features.shape[1])

    def angle_block(self):
        return self.features[:, self.seq_dim :]


@dataclass
class MaskedGraph:
    """A graph whose angle features were hidden on a sampled node subset."""

    base: ProteinGraph
    masked_nodes: np.ndarray
    masked_features: np.ndarray  # (L, F + 1); last column is the mask indicator


def build_graph(structure, seq_emb, threshold, rbf_cfg):
    """Assemble the residue graph for one structure.

    Edges connect residue pairs with 0 < CA distance < threshold and carry
    weight 1/d^2. ``seq_emb`` must have one row per residue; a zero-width
    matrix is allowed when sequence embeddings are supplied later.
    """
    seq_emb = np.asarray(seq_emb, dtype=np.float64)
    length = len(structure)
    if seq_emb.ndim != 2 or seq_emb.shape[0] != length:
        raise DimensionMismatch(
            f"sequence embeddings have {seq_emb.shape} rows, structure has {length} residues"
        )
    distances = pairwise_distances(structure)
    dihedrals = backbone_dihedrals(structure)

    blocks = np.zeros((length, 2 * rbf_cfg.count + 2))
    for i, pair in enumerate(dihedrals):
        blocks[i, : rbf_cfg.count] = rbf_expand(normalize_angle(pair.phi), rbf_cfg)
        blocks[i, rbf_cfg.count : 2 * rbf_cfg.count] = rbf_expand(normalize_angle(pair.psi), rbf_cfg)
        blocks[i, 2 * rbf_cfg.count] = 1.0 if pair.phi is not None else 0.0
        blocks[i, 2 * rbf_cfg.count + 1] = 1.0 if pair.psi is not None else 0.0
    features = np.concatenate([seq_emb, blocks], axis=1)

    edges = []
    for i in range(length):
        for j in range(i + 1, length):
            d = distances[i, j]
            if 0.0 < d < threshold:
                edges.append((i, j, 1.0 / (d * d)))

    return ProteinGraph(
        id=structure.id,
        features=features,
        seq_dim=seq_emb.shape[1],
        rbf_count=rbf_cfg.count,
        edges=edges,
        distances=distances,
        dihedrals=dihedrals,
        sequence=to_sequence(structure),
    )


def mask_count(length, mask_ratio):
    """Half-up rounding of mask_ratio * length, at least 1."""
    return max(1, int(np.floor(mask_ratio * length + 0.5)))


def mask_graph(graph, mask_ratio, rng_seed):
    """Hide the angle features of a random node subset.

    Nodes with both angles undefined are never masked. The sampled nodes
    keep their sequence-embedding block; their angle block (including the
    presence flags) is zeroed and the appended indicator column is set to 1.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio {mask_ratio} outside (0, 1)")
    eligible = np.array(
        [i for i, p in enumerate(graph.dihedrals) if p.phi is not None or p.psi is not None],
        dtype=np.int64,
    )
    if eligible.size == 0:
        raise NoMaskable("every residue has both angles undefined")
    count = min(mask_count(graph.node_count, mask_ratio), int(eligible.size))
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(eligible[rng.permutation(eligible.size)[:count]])

    feats = np.concatenate([graph.features, np.zeros((graph.node_count, 1))], axis=1)
    feats[chosen, graph.seq_dim : graph.feature_dim] = 0.0
    feats[chosen, graph.feature_dim] = 1.0
    return MaskedGraph(base=graph, masked_nodes=chosen, masked_features=feats)


# ---------------------------------------------------------------------------
# cache io


def save_graph(path, graph):
    buf = bytearray(GRAPH_MAGIC)
    raw_id = graph.id.encode()
    buf += struct.pack("<H", len(raw_id)) + raw_id
    buf += struct.pack(
        "<IIII", graph.node_count, graph.feature_dim, graph.seq_dim, graph.rbf_count
    )
    buf += np.ascontiguousarray(graph.features, dtype="<f4").tobytes()
    buf += struct.pack("<I", len(graph.edges))
    for i, j, w in graph.edges:
        buf += struct.pack("<IId", i, j, w)
    buf += np.ascontiguousarray(graph.distances, dtype="<f8").tobytes()
    for pair in graph.dihedrals:
        buf += struct.pack(
            "<BdBd",
            pair.phi is not None,
            0.0 if pair.phi is None else pair.phi,
            pair.psi is not None,
            0.0 if pair.psi is None else pair.psi,
        )
    raw_seq = graph.sequence.letters.encode()
    buf += struct.pack("<I", len(raw_seq)) + raw_seq
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_graph(path):
    from .geometry import DihedralPair

    raw = Path(path).read_bytes()
    if raw[:4] != GRAPH_MAGIC:
        raise ValueError(f"{path}: not a graph cache (bad magic)")
    off = 4
    (id_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    graph_id = raw[off : off + id_len].decode()
    off += id_len
    length, feat_dim, seq_dim, rbf_count = struct.unpack_from("<IIII", raw, off)
    off += 16
    n = length * feat_dim
    features = (
        np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        .reshape(length, feat_dim)
        .astype(np.float64)
    )
    off += 4 * n
    (edge_count,) = struct.unpack_from("<I", raw, off)
    off += 4
    edges = []
    for _ in range(edge_count):
        i, j, w = struct.unpack_from("<IId", raw, off)
        off += 16
        edges.append((i, j, w))
    distances = (
        np.frombuffer(raw, dtype="<f8", count=length * length, offset=off)
        .reshape(length, length)
        .copy()
    )
    off += 8 * length * length
    dihedrals = []
    for _ in range(length):
        has_phi, phi, has_psi, psi = struct.unpack_from("<BdBd", raw, off)
        off += 18
        dihedrals.append(DihedralPair(phi=phi if has_phi else None, psi=psi if has_psi else None))
    (seq_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    letters = raw[off : off + seq_len].decode()
    return ProteinGraph(
        id=graph_id,
        features=features,
        seq_dim=seq_dim,
        rbf_count=rbf_count,
        edges=edges,
        distances=distances,
        dihedrals=dihedrals,
        sequence=ProteinSequence(id=graph_id, letters=letters),
    )
