"""Self-supervised losses, the MI objective, and the bi-level training loop.

One training step:

1. estimate the sequence/structure mutual information I on the batch;
2. take a virtual gradient-ascent step on the sequence-encoder parameters,
   recorded with ``create_graph=True`` so the shifted parameters remain a
   differentiable function of the GNN parameters;
3. evaluate the self-supervised loss with the shifted parameters and update
   the GNN and head parameters through that inner step;
4. discard the shift (the persisted sequence encoder never changes) and
   train the discriminator by ascending I.

Disabling the mutual term removes I entirely (no estimate, no discriminator
updates); disabling the bi-level scheme skips step 2.

Metrics log: comment lines with the flags and column names, then one
tab-separated line per step: step, lr, distance loss, angle loss, and the
MI estimate unless the mutual term is disabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import config_to_text, derive_seed
from .errors import BatchTooSmall, DimensionMismatch
from .graph_builder import mask_graph
from .models import (
    adjacency_matrix,
    angle_head,
    discriminator,
    distance_logits,
    distance_regression_out,
    fuse,
    gnn_forward,
    init_params,
    pooled,
    seq_forward,
)
from .geometry import normalize_angle
from .optim import AdamState, adam_step, cosine_lr, save_checkpoint


@dataclass(frozen=True)
class BinSpec:
    """Uniform distance bins on [lo, hi); everything beyond lands in the last."""

    count: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("need at least two bins")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    @property
    def width(self):
        return (self.hi - self.lo) / self.count

    def label(self, d):
        return int(np.clip(math.floor((d - self.lo) / self.width), 0, self.count - 1))

    def labels(self, d):
        raw = np.floor((np.asarray(d) - self.lo) / self.width)
        return np.clip(raw, 0, self.count - 1).astype(np.int64)

def bin_spec(cfg):
    return BinSpec(count=cfg.bins, lo=cfg.bin_lo, hi=cfg.bin_hi)


def sequence_embedding(graph, theta, cfg, frozen=None):
    """Residue embeddings for one protein, trainable or file-backed."""
    if cfg.seq_mode == "frozen":
        if frozen is None:
            raise ValueError("frozen sequence mode needs an embedding table")
        emb = frozen.lookup(graph.id)
        if emb.shape != (graph.node_count, cfg.seq_dim):
            raise DimensionMismatch(
                f"{graph.id}: stored embedding {emb.shape} vs expected "
                f"({graph.node_count}, {cfg.seq_dim})"
            )
        return Tensor(emb)
    return seq_forward(graph.sequence, theta)


# ---------------------------------------------------------------------------
# losses


def distance_loss(graph, fused, alpha, bins):
    """Cross-entropy over all ordered pairs (diagonal included), / L^2."""
    length = graph.node_count
    labels = bins.labels(graph.distances).ravel()
    onehot = np.zeros((length * length, bins.count))
    onehot[np.arange(labels.size), labels] = 1.0
    logp = ad.log_softmax_rows(distance_logits(fused, alpha))
    return ad.scale(ad.sum_all(ad.mul(logp, Tensor(onehot))), -1.0 / (length * length))


def distance_loss_regression(graph, fused, alpha, threshold):
    """Mean squared error on threshold-normalized distances (ablation arm)."""
    length = graph.node_count
    targets = (graph.distances / threshold).reshape(length * length, 1)
    pred = distance_regression_out(fused, alpha)
    diff = ad.sub(pred, Tensor(targets))
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / (length * length))


def angle_loss(masked, fused_masked, alpha):
    """Summed squared error on the masked residues' normalized angles.

    Undefined chain-end angles contribute nothing: their error terms are
    zeroed through the presence weights.
    """
    idx = masked.masked_nodes
    preds = angle_head(ad.gather_rows(fused_masked, idx), alpha)
    targets = np.zeros((idx.size, 2))
    weights = np.zeros((idx.size, 2))
    for row, i in enumerate(idx):
        pair = masked.base.dihedrals[i]
        targets[row, 0] = normalize_angle(pair.phi)
        targets[row, 1] = normalize_angle(pair.psi)
        weights[row, 0] = 0.0 if pair.phi is None else 1.0
        weights[row, 1] = 0.0 if pair.psi is None else 1.0
    diff = ad.sub(preds, Tensor(targets))
    return ad.sum_all(ad.mul(ad.mul(diff, diff), Tensor(weights)))


def ssl_loss(graphs, theta, omega, alpha, cfg, mask_seeds, frozen=None):
    """Batch-mean self-supervised loss; ablation flags drop either term.

    Returns the loss tensor plus float batch means of each term for logging.
    """
    bins = bin_spec(cfg)
    total = None
    dis_vals = []
    ang_vals = []
    for graph, seed in zip(graphs, mask_seeds):
        seq_emb = sequence_embedding(graph, theta, cfg, frozen)
        adj = adjacency_matrix(graph)
        parts = []
        if not cfg.no_distance:
            states = gnn_forward(graph, omega, seq_emb=seq_emb, adjacency=adj)
            fused = fuse(seq_emb, states.layers[-1], alpha)
            if cfg.distance_regression:
                l_dis = distance_loss_regression(graph, fused, alpha, cfg.threshold)
            else:
                l_dis = distance_loss(graph, fused, alpha, bins)
            parts.append(l_dis)
            dis_vals.append(l_dis.item())
        if not cfg.no_angle:
            masked = mask_graph(graph, cfg.mask_ratio, seed)
            mstates = gnn_forward(masked, omega, seq_emb=seq_emb, adjacency=adj)
            mfused = fuse(seq_emb, mstates.layers[-1], alpha)
            l_ang = angle_loss(masked, mfused, alpha)
            parts.append(l_ang)
            ang_vals.append(l_ang.item())
        if parts:
            contrib = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
            total = contrib if total is None else ad.add(total, contrib)
    if total is None:
        total = Tensor(0.0)
    loss = ad.scale(total, 1.0 / len(graphs))
    mean_dis = float(np.mean(dis_vals)) if dis_vals else 0.0
    mean_ang = float(np.mean(ang_vals)) if ang_vals else 0.0
    return loss, mean_dis, mean_ang


def mi_from_pairs(pairs, beta):
    """Jensen-Shannon MI estimate from pooled (sequence, structure) pairs.

    Positives align each protein with itself; negatives pair each sequence
    representation with the next protein's structure representation
    (cyclic shift within the batch).
    """
    if len(pairs) < 2:
        raise BatchTooSmall("mutual-information estimate needs a batch of at least 2")
    n = len(pairs)
    pos_sum = None
    neg_sum = None
    for b, (seq_repr, struct_repr) in enumerate(pairs):
        t_pos = discriminator(seq_repr, struct_repr, beta)
        term = ad.neg(ad.softplus(ad.neg(t_pos)))
        pos_sum = term if pos_sum is None else ad.add(pos_sum, term)
        t_neg = discriminator(seq_repr, pairs[(b + 1) % n][1], beta)
        nterm = ad.softplus(t_neg)
        neg_sum = nterm if neg_sum is None else ad.add(neg_sum, nterm)
    return ad.sub(ad.scale(pos_sum, 1.0 / n), ad.scale(neg_sum, 1.0 / n))


def mi_objective(graphs, theta, omega, beta, cfg, frozen=None):
    """MI estimate for a batch, running the full forward per protein."""
    pairs = []
    for graph in graphs:
        seq_emb = sequence_embedding(graph, theta, cfg, frozen)
        states = gnn_forward(graph, omega, seq_emb=seq_emb)
        pairs.append((pooled(seq_emb), states.graph_repr))
    return mi_from_pairs(pairs, beta)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PretrainState:
    params: dict
    adam: dict
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg):
        params = init_params(cfg)
        adam = {role: AdamState(ps) for role, ps in params.items()}
        return cls(params=params, adam=adam)


def inner_shift(theta, mi_value, lr_inner):
    """Virtual ascent step on the sequence encoder, kept differentiable.

    The returned mapping is a function of everything MI depends on; the
    persisted parameters in ``theta`` are not touched.
    """
    grads = ad.grad(mi_value, theta.tensors(), create_graph=True)
    return {
        name: ad.add(tensor, ad.scale(g, lr_inner))
        for (name, tensor), g in zip(theta.items(), grads)
    }


def bilevel_step(graphs, state, cfg, step, total_steps, mask_seeds, frozen=None):
    """One optimization step; returns the logged metrics."""
    theta = state.params["theta"]
    omega = state.params["omega"]
    alpha = state.params["alpha"]
    beta = state.params["beta"]
    lr_outer = cosine_lr(step, total_steps, cfg.lr_gnn)
    lr_inner = cosine_lr(step, total_steps, cfg.lr_lm)
    mutual = not cfg.no_mutual

    mi_value = None
    if mutual:
        mi_value = mi_objective(graphs, theta, omega, beta, cfg, frozen)

    theta_eff = theta
    if mutual and not cfg.no_bilevel and len(theta) > 0:
        theta_eff = inner_shift(theta, mi_value, lr_inner)

    loss, mean_dis, mean_ang = ssl_loss(graphs, theta_eff, omega, alpha, cfg, mask_seeds, frozen)

    trainable = omega.tensors() + alpha.tensors()
    grads = ad.grad(loss, trainable)
    omega_grads = dict(zip(omega.names(), grads[: len(omega)]))
    alpha_grads = dict(zip(alpha.names(), grads[len(omega) :]))
    adam_step(omega, omega_grads, state.adam["omega"], lr_outer,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam_step(alpha, alpha_grads, state.adam["alpha"], lr_outer,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    if mutual:
        beta_grads = ad.grad(mi_value, beta.tensors())
        ascent = {name: -g.data for name, g in zip(beta.names(), beta_grads)}
        adam_step(beta, ascent, state.adam["beta"], lr_outer,
                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    return {
        "step": step,
        "lr": lr_outer,
        "l_dis": mean_dis,
        "l_angle": mean_ang,
        "mi": mi_value.item() if mutual else None,
    }


def metrics_header(cfg):
    flags = (
        f"no_mutual={str(cfg.no_mutual).lower()} "
        f"no_bilevel={str(cfg.no_bilevel).lower()} "
        f"no_angle={str(cfg.no_angle).lower()} "
        f"no_distance={str(cfg.no_distance).lower()} "
        f"distance_regression={str(cfg.distance_regression).lower()}"
    )
    dis_col = "l_dis_reg" if cfg.distance_regression else "l_dis"
    columns = ["step", "lr", dis_col, "l_angle"]
    if not cfg.no_mutual:
        columns.append("I")
    return [f"# flags: {flags}", "# columns: " + "\t".join(columns)]


def metrics_line(cfg, m):
    parts = [str(m["step"]), repr(m["lr"]), repr(m["l_dis"]), repr(m["l_angle"])]
    if not cfg.no_mutual:
        parts.append(repr(m["mi"]))
    return "\t".join(parts)


def batches(items, size, merge_trailing=False):
    out = [items[i : i + size] for i in range(0, len(items), size)]
    if merge_trailing and len(out) >= 2 and len(out[-1]) == 1:
        # a lone trailing protein cannot form a negative pair for the MI
        # estimator, so it joins the previous batch
        out[-2] = out[-2] + out[-1]
        out.pop()
    return out


def pretrain_run(graphs, cfg, out_dir, frozen=None):
    """Full pretraining loop; writes checkpoint, metrics log, and config.

    Per-protein mask seeds derive from (seed, protein id, epoch), so the
    epoch shuffle never perturbs which residues get masked.
    """
    if not graphs:
        raise ValueError("pretraining needs a nonempty dataset")
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if len(graphs) == 1 and not cfg.no_mutual:
        raise BatchTooSmall(
            "the mutual-information estimator needs at least two proteins; "
            "use no_mutual for single-protein runs"
        )
    graphs = sorted(graphs, key=lambda g: g.id)
    state = PretrainState.from_config(cfg)
    steps_per_epoch = len(batches(graphs, cfg.batch_size, merge_trailing=True))
    total_steps = cfg.epochs * steps_per_epoch

    lines = metrics_header(cfg)
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch)).permutation(
            len(graphs)
        )
        shuffled = [graphs[i] for i in order]
        for batch in batches(shuffled, cfg.batch_size, merge_trailing=True):
            seeds = [derive_seed(cfg.seed, g.id, epoch) for g in batch]
            metrics = bilevel_step(batch, state, cfg, state.step, total_steps, seeds, frozen)
            state.history.append(metrics)
            lines.append(metrics_line(cfg, metrics))
            state.step += 1

    (out_dir / "metrics.tsv").write_text("\n".join(lines) + "\n")
    save_checkpoint(out_dir / "checkpoint.spm", state.params.values())
    (out_dir / "config.txt").write_text(config_to_text(cfg))
    return state
