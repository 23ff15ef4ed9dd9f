"""Model components: GNN encoder, sequence encoders, heads, discriminator.

All forward passes are built from autodiff ops so gradients (including the
second-order path used by the bi-level trainer) flow to every parameter.

Embedding file layout (little-endian, magic ``SEM1``): u32 protein count,
then per protein sorted by id: u16 id length, utf-8 id, u32 L, u32 E, and
the float32 row-major embedding matrix.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch, MissingEmbedding
from .graph_builder import MaskedGraph
from .optim import ParamSet

EMBED_MAGIC = b"SEM1"

# 20 standard amino acids; anything else (including X) maps to the last row.
AA_ORDER = "ACDEFGHIKLMNPQRSTVWY"
AA_INDEX = {c: i for i, c in enumerate(AA_ORDER)}
VOCAB_SIZE = len(AA_ORDER) + 1


@dataclass(frozen=True)
class GnnConfig:
    """Layer count, hidden width, and expected input width of the encoder."""

    layers: int
    hidden_dim: int
    input_dim: int

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one GNN layer")


@dataclass
class NodeStates:
    """Per-layer node representations; layers[0] is the projected input."""

    layers: list
    graph_repr: Tensor  # (1, H)


def gnn_input_dim(seq_dim, rbf_count):
    # sequence block + two RBF blocks + two presence flags + mask indicator
    return seq_dim + 2 * rbf_count + 2 + 1


# ---------------------------------------------------------------------------
# parameter initialization


def _linear_init(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_params(cfg):
    """Deterministic parameter groups for a config (draw order is fixed)."""
    rng = np.random.default_rng(cfg.seed)
    E, H, T = cfg.seq_dim, cfg.hidden_dim, cfg.bins

    theta = ParamSet("theta")
    if cfg.seq_mode == "toy":
        theta.add("embed", rng.normal(0.0, 1.0, size=(VOCAB_SIZE, E)))
        theta.add("attn_q", _linear_init(rng, E, E))
        theta.add("attn_k", _linear_init(rng, E, E))
        theta.add("attn_v", _linear_init(rng, E, E))

    omega = ParamSet("omega")
    d_in = gnn_input_dim(E, cfg.rbf_count)
    omega.add("proj_w", _linear_init(rng, d_in, H))
    omega.add("proj_b", np.zeros(H))
    for k in range(1, cfg.gnn_layers + 1):
        omega.add(f"layer{k}_w", _linear_init(rng, H, H))
        omega.add(f"layer{k}_b", np.zeros(H))

    # head output layers start at zero: the first distance distribution is
    # exactly uniform and the angle head starts in tanh's linear region
    alpha = ParamSet("alpha")
    if E != H:
        alpha.add("fuse_w", _linear_init(rng, E, H))
    alpha.add("dis_fc1_w", _linear_init(rng, H, H))
    alpha.add("dis_fc1_b", np.zeros(H))
    alpha.add("dis_fc2_w", np.zeros((H, T)))
    alpha.add("dis_fc2_b", np.zeros(T))
    alpha.add("ang_fc1_w", _linear_init(rng, H, H))
    alpha.add("ang_fc1_b", np.zeros(H))
    alpha.add("ang_fc2_w", np.zeros((H, 2)))
    alpha.add("ang_fc2_b", np.zeros(2))

    beta = ParamSet("beta")
    for tower, first in (("seq", E), ("struct", H)):
        dims = (first, H, H, H)
        for i in (1, 2, 3):
            beta.add(f"{tower}{i}_w", _linear_init(rng, dims[i - 1], dims[i]))
            beta.add(f"{tower}{i}_b", np.zeros(dims[i]))
            beta.add(f"{tower}{i}_s", _linear_init(rng, dims[i - 1], dims[i]))

    # appended last so toggling the ablation does not shift earlier draws
    if cfg.distance_regression:
        alpha.add("reg_fc1_w", _linear_init(rng, H, H))
        alpha.add("reg_fc1_b", np.zeros(H))
        alpha.add("reg_fc2_w", np.zeros((H, 1)))
        alpha.add("reg_fc2_b", np.zeros(1))

    return {"theta": theta, "omega": omega, "alpha": alpha, "beta": beta}


def init_head(cfg, n_classes):
    """Classifier head: tanh on the pooled representation, then linear.

    Starts at zero so initial class scores tie and finetuning decides."""
    head = ParamSet("head")
    head.add("w", np.zeros((cfg.hidden_dim, n_classes)))
    head.add("b", np.zeros(n_classes))
    return head


def validate_params(params, cfg):
    """Check loaded parameter shapes against what the config implies."""
    expected = init_params(cfg)
    for role, exp_set in expected.items():
        if role not in params:
            raise DimensionMismatch(f"checkpoint is missing the {role!r} group")
        got = params[role]
        for name, t in exp_set.items():
            if name not in got:
                raise DimensionMismatch(f"checkpoint is missing {role}/{name}")
            if got[name].data.shape != t.data.shape:
                raise DimensionMismatch(
                    f"{role}/{name}: checkpoint {got[name].data.shape} vs config {t.data.shape}"
                )


# ---------------------------------------------------------------------------
# sequence encoders


def position_encoding(length, dim):
    """Sinusoidal position table, (length, dim)."""
    pe = np.zeros((length, dim))
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * (2.0 * np.arange(half)) / dim)
    angles = pos * freqs[None, :]
    pe[:, 0::2] = np.sin(angles)[:, : pe[:, 0::2].shape[1]]
    pe[:, 1::2] = np.cos(angles)[:, : pe[:, 1::2].shape[1]]
    return pe


def token_indices(letters):
    return np.array([AA_INDEX.get(c, VOCAB_SIZE - 1) for c in letters], dtype=np.int64)


def seq_forward(sequence, theta):
    """Trainable per-residue encoder: embeddings plus one attention block.

    ``theta`` is any name -> Tensor mapping with keys embed/attn_q/attn_k/
    attn_v, so the bi-level trainer can substitute shifted parameters.
    """
    idx = token_indices(sequence.letters)
    embed = theta["embed"]
    dim = embed.shape[1]
    x = ad.add(ad.gather_rows(embed, idx), Tensor(position_encoding(len(idx), dim)))
    q = ad.matmul(x, theta["attn_q"])
    k = ad.matmul(x, theta["attn_k"])
    v = ad.matmul(x, theta["attn_v"])
    att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dim)))
    return ad.add(x, ad.matmul(att, v))


class FrozenEmbeddings:
    """Per-residue embeddings computed elsewhere, looked up by protein id."""

    def __init__(self, table):
        self.table = dict(table)

    def lookup(self, protein_id):
        if protein_id not in self.table:
            raise MissingEmbedding(f"no embedding stored for {protein_id!r}")
        return self.table[protein_id]

    def __len__(self):
        return len(self.table)


def save_embeddings(path, table):
    buf = bytearray(EMBED_MAGIC)
    buf += struct.pack("<I", len(table))
    for pid in sorted(table):
        arr = np.asarray(table[pid])
        if arr.ndim != 2:
            raise DimensionMismatch(f"{pid}: embedding must be a matrix, got {arr.shape}")
        raw = pid.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<II", arr.shape[0], arr.shape[1])
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_embeddings(path):
    raw = Path(path).read_bytes()
    if raw[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    off = 4
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    table = {}
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        pid = raw[off : off + id_len].decode()
        off += id_len
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        n = rows * cols
        table[pid] = (
            np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            .reshape(rows, cols)
            .astype(np.float64)
        )
        off += 4 * n
    return FrozenEmbeddings(table)


# ---------------------------------------------------------------------------
# graph encoder


def adjacency_matrix(graph):
    """Dense symmetric weighted adjacency with zero diagonal."""
    n = graph.node_count
    a = np.zeros((n, n))
    for i, j, w in graph.edges:
        a[i, j] = w
        a[j, i] = w
    return a


def node_input(graph, seq_emb=None):
    """Full GNN input: sequence block, angle block, mask-indicator column.

    ``seq_emb`` (a Tensor, one row per residue) replaces the stored
    sequence block; without it the cached block is used as constants.
    """
    if isinstance(graph, MaskedGraph):
        base = graph.base
        stored = graph.masked_features  # indicator column already appended
    else:
        base = graph
        stored = np.concatenate([graph.features, np.zeros((graph.node_count, 1))], axis=1)
    rest = Tensor(stored[:, base.seq_dim :])
    if seq_emb is None:
        if base.seq_dim == 0:
            return rest
        return ad.concat([Tensor(stored[:, : base.seq_dim]), rest], axis=1)
    if seq_emb.shape[0] != base.node_count:
        raise DimensionMismatch(
            f"{base.id}: sequence embedding rows {seq_emb.shape[0]} vs {base.node_count} residues"
        )
    return ad.concat([seq_emb, rest], axis=1)


def gnn_forward(graph, omega, seq_emb=None, adjacency=None):
    """Edge-weighted sum aggregation with a linear combine per layer.

    The input is first projected to the hidden width; each layer computes
    Linear(h + A h) with ReLU between layers and none after the last. The
    graph representation is the mean over final node states.
    """
    x = node_input(graph, seq_emb=seq_emb)
    proj_w = omega["proj_w"]
    if x.shape[1] != proj_w.shape[0]:
        raise DimensionMismatch(
            f"node features have width {x.shape[1]} but omega/proj_w expects {proj_w.shape[0]}"
        )
    base = graph.base if isinstance(graph, MaskedGraph) else graph
    if adjacency is None:
        adjacency = adjacency_matrix(base)
    adj = adjacency if isinstance(adjacency, Tensor) else Tensor(adjacency)

    h = ad.add(ad.matmul(x, proj_w), omega["proj_b"])
    states = [h]
    n_layers = 0
    while f"layer{n_layers + 1}_w" in omega:
        n_layers += 1
    for k in range(1, n_layers + 1):
        agg = ad.matmul(adj, h)
        h = ad.add(ad.matmul(ad.add(h, agg), omega[f"layer{k}_w"]), omega[f"layer{k}_b"])
        if k < n_layers:
            h = ad.relu(h)
        states.append(h)
    graph_repr = ad.reshape(ad.mean_axis0(h), (1, h.shape[1]))
    return NodeStates(layers=states, graph_repr=graph_repr)


def fuse(seq_emb, node_repr, alpha):
    """Residue-level fusion: projected sequence embedding plus GNN output."""
    if "fuse_w" in alpha:
        projected = ad.matmul(seq_emb, alpha["fuse_w"])
    else:
        if seq_emb.shape[1] != node_repr.shape[1]:
            raise DimensionMismatch(
                f"fusion without alpha/fuse_w needs matching widths, got "
                f"{seq_emb.shape[1]} and {node_repr.shape[1]}"
            )
        projected = seq_emb
    return ad.add(projected, node_repr)


def pooled(h):
    """Protein-level representation: mean over residue rows, kept 2-D."""
    return ad.reshape(ad.mean_axis0(h), (1, h.shape[1]))


# ---------------------------------------------------------------------------
# heads


def _mlp2(x, alpha, prefix):
    hidden = ad.relu(ad.add(ad.matmul(x, alpha[f"{prefix}_fc1_w"]), alpha[f"{prefix}_fc1_b"]))
    return ad.add(ad.matmul(hidden, alpha[f"{prefix}_fc2_w"]), alpha[f"{prefix}_fc2_b"])


def pair_indices(length):
    """Ordered pair index arrays (i-major), diagonal included."""
    ii = np.repeat(np.arange(length), length)
    jj = np.tile(np.arange(length), length)
    return ii, jj


def distance_logits(fused, alpha):
    """Bin logits for every ordered residue pair from h_i - h_j."""
    ii, jj = pair_indices(fused.shape[0])
    diff = ad.sub(ad.gather_rows(fused, ii), ad.gather_rows(fused, jj))
    return _mlp2(diff, alpha, "dis")


def distance_probs(fused, alpha):
    """Softmax bin distribution per ordered pair, rows sum to one."""
    return ad.softmax_rows(distance_logits(fused, alpha))


def distance_regression_out(fused, alpha):
    """Scalar distance prediction per ordered pair (ablation arm)."""
    ii, jj = pair_indices(fused.shape[0])
    diff = ad.sub(ad.gather_rows(fused, ii), ad.gather_rows(fused, jj))
    return _mlp2(diff, alpha, "reg")


def angle_head(h_rows, alpha):
    """Two normalized-angle predictions per row, squashed to [-1, 1]."""
    return ad.tanh(_mlp2(h_rows, alpha, "ang"))


def _tower(x, beta, prefix):
    h = x
    for i in (1, 2, 3):
        main = ad.relu(ad.add(ad.matmul(h, beta[f"{prefix}{i}_w"]), beta[f"{prefix}{i}_b"]))
        h = ad.add(main, ad.matmul(h, beta[f"{prefix}{i}_s"]))
    return h


def discriminator(seq_repr, struct_repr, beta):
    """Score a (sequence, structure) representation pair.

    Each side runs through its own 3-layer tower where every layer adds a
    linear shortcut of its input; the score is the dot product of the two
    tower outputs.
    """
    return ad.dot(_tower(seq_repr, beta, "seq"), _tower(struct_repr, beta, "struct"))
