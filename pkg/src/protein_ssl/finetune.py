"""Supervised downstream classification on pretrained representations.

Datasets arrive as a manifest of ``id<TAB>label`` lines plus a directory of
graph caches. The classifier applies tanh to the mean-pooled fused residue
representations and a linear layer to class logits. Full finetuning updates
the GNN, the fusion projection, and the head; head-only mode updates the
head alone. The sequence encoder stays frozen in both modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import derive_seed
from .errors import EmptyDataset, LabelOutOfRange
from .graph_builder import load_graph
from .models import fuse, gnn_forward, init_head, pooled
from .optim import AdamState, adam_step, cosine_lr
from .pretrain import batches, sequence_embedding


@dataclass(frozen=True)
class LabeledExample:
    id: str
    graph: object
    label: int


@dataclass
class LabeledDataset:
    records: list
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValueError(f"duplicate id {rec.id!r} in {self.split} split")
            seen.add(rec.id)
            if not 0 <= rec.label < self.n_classes:
                raise LabelOutOfRange(
                    f"{rec.id}: label {rec.label} outside [0, {self.n_classes})"
                )

    def __len__(self):
        return len(self.records)


def load_manifest(manifest_path, cache_dir, n_classes=None, split="train"):
    """Read ``id<TAB>label`` lines and the matching graph caches."""
    cache_dir = Path(cache_dir)
    records = []
    labels = []
    for lineno, line in enumerate(Path(manifest_path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        pid, sep, label = line.partition("\t")
        if not sep:
            raise ValueError(f"{manifest_path}:{lineno}: expected id<TAB>label")
        graph = load_graph(cache_dir / f"{pid}.sgr")
        labels.append(int(label))
        records.append(LabeledExample(id=pid, graph=graph, label=int(label)))
    if n_classes is None:
        n_classes = max(labels) + 1 if labels else 0
    return LabeledDataset(records=records, n_classes=n_classes, split=split)


def classifier_logits(graph, params, cfg, frozen=None):
    """Class logits for one protein, shape (1, C)."""
    seq_emb = sequence_embedding(graph, params["theta"], cfg, frozen)
    states = gnn_forward(graph, params["omega"], seq_emb=seq_emb)
    fused = fuse(seq_emb, states.layers[-1], params["alpha"])
    rep = ad.tanh(pooled(fused))
    return ad.add(ad.matmul(rep, params["head"]["w"]), params["head"]["b"])


def classifier_loss(logits, label):
    onehot = np.zeros((1, logits.shape[1]))
    onehot[0, label] = 1.0
    return ad.neg(ad.sum_all(ad.mul(ad.log_softmax_rows(logits), Tensor(onehot))))


def _trainable(params, mode):
    """Name lists of what each finetuning mode updates, keyed by role."""
    if mode == "head":
        return {"head": params["head"].names()}
    if mode == "full":
        plan = {"head": params["head"].names(), "omega": params["omega"].names()}
        if "fuse_w" in params["alpha"]:
            plan["alpha"] = ["fuse_w"]
        return plan
    raise ValueError(f"unknown finetune mode {mode!r} (expected 'full' or 'head')")


def finetune(dataset, params, cfg, mode="full", frozen=None):
    """Cross-entropy finetuning with Adam and cosine decay.

    Returns per-step history rows (step, lr, loss). ``params`` must carry a
    ``head`` group sized for the dataset's class count (see
    :func:`attach_head`).
    """
    if not dataset.records:
        raise EmptyDataset("cannot finetune on an empty dataset")
    cfg.validate()
    plan = _trainable(params, mode)
    adam = {role: AdamState(params[role]) for role in plan}
    wrt = []
    slots = []
    for role, names in plan.items():
        for name in names:
            wrt.append(params[role][name])
            slots.append((role, name))

    records = sorted(dataset.records, key=lambda r: r.id)
    steps_per_epoch = math.ceil(len(records) / cfg.batch_size)
    total_steps = cfg.finetune_epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.finetune_epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "finetune", epoch)).permutation(
            len(records)
        )
        shuffled = [records[i] for i in order]
        for batch in batches(shuffled, cfg.batch_size):
            lr = cosine_lr(step, total_steps, cfg.finetune_lr)
            loss = None
            for rec in batch:
                term = classifier_loss(classifier_logits(rec.graph, params, cfg, frozen), rec.label)
                loss = term if loss is None else ad.add(loss, term)
            loss = ad.scale(loss, 1.0 / len(batch))
            grads = ad.grad(loss, wrt)
            by_role = {role: {} for role in plan}
            for (role, name), g in zip(slots, grads):
                by_role[role][name] = g.data
            for role in plan:
                adam_step(params[role], by_role[role], adam[role], lr,
                          cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            history.append((step, lr, loss.item()))
            step += 1
    return history


def attach_head(params, cfg, n_classes):
    """Ensure a classifier head of the right width is present."""
    head = params.get("head")
    if head is None or head["w"].shape != (cfg.hidden_dim, n_classes):
        params["head"] = init_head(cfg, n_classes)
    return params


@dataclass
class EvalResult:
    accuracy: float
    per_class: list  # rows of dicts: class, correct, predicted, actual
    predictions: list = field(default_factory=list)


def score_predictions(predictions, labels, n_classes):
    """Micro accuracy plus per-class correct/predicted/actual counts."""
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    per_class = []
    for c in range(n_classes):
        per_class.append(
            {
                "class": c,
                "correct": sum(1 for p, y in zip(predictions, labels) if p == y == c),
                "predicted": sum(1 for p in predictions if p == c),
                "actual": sum(1 for y in labels if y == c),
            }
        )
    return EvalResult(
        accuracy=correct / len(labels),
        per_class=per_class,
        predictions=list(predictions),
    )


def evaluate(dataset, params, cfg, frozen=None):
    """Deterministic argmax evaluation; ties resolve to the lowest class."""
    if not dataset.records:
        raise EmptyDataset("cannot evaluate an empty dataset")
    predictions = []
    labels = []
    for rec in dataset.records:
        logits = classifier_logits(rec.graph, params, cfg, frozen)
        predictions.append(int(np.argmax(logits.data[0])))
        labels.append(rec.label)
    return score_predictions(predictions, labels, dataset.n_classes)


def write_report(path, result):
    lines = [f"accuracy\t{result.accuracy!r}", "class\tcorrect\tpredicted\tactual"]
    for row in result.per_class:
        lines.append(f"{row['class']}\t{row['correct']}\t{row['predicted']}\t{row['actual']}")
    Path(path).write_text("\n".join(lines) + "\n")
