"""Finite-difference verification of analytic gradients.

Every check builds a small scalar-valued function of random parameters,
compares :func:`protein_ssl.autodiff.grad` against central differences
(step 1e-5), and reports the worst normalized error

    err = max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)

which reads as a relative error for large gradients and an absolute one
near zero. The second-order check differentiates an outer objective
through a recorded inner gradient-ascent step on a toy model and compares
against finite differences taken over the outer parameters, re-running the
inner step inside every perturbed evaluation.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, param

FD_STEP = 1e-5
OP_TOLERANCE = 1e-4
SECOND_ORDER_TOLERANCE = 1e-3


def numeric_gradient(f, tensors, eps=FD_STEP):
    """Central finite differences of the scalar ``f()`` over each tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def normalized_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_function(build, params, eps=FD_STEP):
    """Worst error between analytic and numeric gradients of ``build()``."""
    out = build()
    analytic = ad.grad(out, params)
    numeric = numeric_gradient(lambda: build().item(), params, eps)
    return max(normalized_error(a.data, n) for a, n in zip(analytic, numeric))


# ---------------------------------------------------------------------------
# per-op checks


def op_checks(seed):
    """(name, worst error) for every differentiable primitive.

    Each check reduces the op's output to a scalar through a fixed random
    weighting drawn once, so the finite-difference oracle sees the same
    function on every evaluation.
    """
    rng = np.random.default_rng(seed)
    n, m = 3, 4
    results = []

    def run(name, params, build, out_shape):
        if out_shape == ():
            f = lambda: build(*params)
        else:
            w = Tensor(rng.normal(size=out_shape))
            f = lambda: ad.sum_all(ad.mul(build(*params), w))
        results.append((name, check_function(f, params)))

    def mat():
        return param(rng.normal(size=(n, m)))

    def rowvec():
        return param(rng.normal(size=(m,)))

    run("add", (mat(), mat()), ad.add, (n, m))
    run("add_rowvec", (mat(), rowvec()), ad.add, (n, m))
    run("sub", (mat(), mat()), ad.sub, (n, m))
    run("neg", (mat(),), ad.neg, (n, m))
    run("mul", (mat(), mat()), ad.mul, (n, m))
    away = lambda size: param(rng.normal(size=size) + np.sign(rng.normal(size=size)) * 2.0)
    run("div", (mat(), away((n, m))), ad.div, (n, m))
    run("scale", (mat(),), lambda a: ad.scale(a, -1.7), (n, m))
    run("matmul", (mat(), param(rng.normal(size=(m, 2)))), ad.matmul, (n, 2))
    run("transpose", (mat(),), ad.transpose, (m, n))
    run("reshape", (mat(),), lambda a: ad.reshape(a, (m, n)), (m, n))
    run("broadcast_scalar", (param(rng.normal()),), lambda a: ad.broadcast_to(a, (n, m)), (n, m))
    run("broadcast_row", (rowvec(),), lambda a: ad.broadcast_to(a, (n, m)), (n, m))
    # keep relu inputs away from the kink
    run("relu", (away((n, m)),), ad.relu, (n, m))
    run("tanh", (mat(),), ad.tanh, (n, m))
    run("exp", (mat(),), ad.exp, (n, m))
    run("log", (param(np.abs(rng.normal(size=(n, m))) + 0.5),), ad.log, (n, m))
    run("sigmoid", (mat(),), ad.sigmoid, (n, m))
    run("softplus", (mat(),), ad.softplus, (n, m))
    run("softmax_rows", (mat(),), ad.softmax_rows, (n, m))
    run("log_softmax_rows", (mat(),), ad.log_softmax_rows, (n, m))
    run("sum_all", (mat(),), ad.sum_all, ())
    run("sum_axis0", (mat(),), ad.sum_axis0, (m,))
    run("mean_all", (mat(),), ad.mean_all, ())
    run("mean_axis0", (mat(),), ad.mean_axis0, (m,))
    run("concat_cols", (mat(), param(rng.normal(size=(n, 2)))),
        lambda a, b: ad.concat([a, b], axis=1), (n, m + 2))
    run("concat_rows", (mat(), param(rng.normal(size=(2, m)))),
        lambda a, b: ad.concat([a, b], axis=0), (n + 2, m))
    run("slice_cols", (mat(),), lambda a: ad.slice_cols(a, 1, 3), (n, 2))
    run("slice_rows", (mat(),), lambda a: ad.slice_rows(a, 1, 3), (2, m))
    run("pad_cols", (mat(),), lambda a: ad.pad_cols(a, 2, m + 3), (n, m + 3))
    run("pad_rows", (mat(),), lambda a: ad.pad_rows(a, 1, n + 2), (n + 2, m))
    idx = rng.integers(0, n, size=7)
    run("gather_rows", (mat(),), lambda a: ad.gather_rows(a, idx), (7, m))
    sidx = rng.integers(0, 6, size=n)
    run("scatter_rows", (mat(),), lambda a: ad.scatter_rows(a, sidx, 6), (6, m))
    run("dot", (rowvec(), rowvec()), ad.dot, ())
    return results


# ---------------------------------------------------------------------------
# model-level checks (tiny dimensions)


def _tiny_config(seed):
    from .config import TrainConfig

    return TrainConfig(
        hidden_dim=4,
        gnn_layers=2,
        seq_dim=3,
        rbf_count=2,
        bins=4,
        batch_size=2,
        mask_ratio=0.4,
        seed=seed,
    )


def _toy_batch(cfg, seed, n_proteins=2):
    """Small random graphs with plausible geometry for model checks."""
    from .geometry import DihedralPair, RBFConfig
    from .graph_builder import build_graph
    from .structure_io import ProteinStructure, Residue

    rng = np.random.default_rng(seed)
    rbf = RBFConfig.uniform(cfg.rbf_count, cfg.rbf_gamma)
    graphs = []
    for p in range(n_proteins):
        length = 4 + p
        residues = []
        pos = np.zeros(3)
        for i in range(length):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            pos = pos + 3.0 * direction
            offset = rng.normal(size=3)
            residues.append(
                Residue(
                    code="ALA",
                    n=pos + 0.6 * offset / np.linalg.norm(offset),
                    ca=pos.copy(),
                    c=pos + rng.normal(size=3) * 0.5,
                )
            )
        structure = ProteinStructure(id=f"toy{p}", residues=residues)
        graphs.append(build_graph(structure, np.zeros((length, 0)), 7.0, rbf))
    return graphs


def _randomize(params, rng):
    """Move every parameter (including zero-initialized biases) to a generic
    point: exactly-zero head biases put the diagonal residue pairs exactly on
    the relu kink, where finite differences are meaningless."""
    for ps in params.values():
        for _, t in ps.items():
            t.data += 0.3 * rng.normal(size=t.data.shape)
    return params


def model_checks(seed):
    """(name, worst error) for the model components and losses."""
    from .models import init_params
    from .pretrain import mi_objective, ssl_loss

    results = []
    cfg = _tiny_config(seed)
    graphs = _toy_batch(cfg, seed)
    seeds = [seed + 11, seed + 12]

    params = _randomize(init_params(cfg), np.random.default_rng(seed + 999))
    theta, omega, alpha, beta = (params[r] for r in ("theta", "omega", "alpha", "beta"))

    def ssl_scalar():
        loss, _, _ = ssl_loss(graphs, theta, omega, alpha, cfg, seeds)
        return loss

    wrt = theta.tensors() + omega.tensors() + alpha.tensors()
    results.append(("ssl_loss", check_function(ssl_scalar, wrt)))

    def mi_scalar():
        return mi_objective(graphs, theta, omega, beta, cfg)

    wrt = theta.tensors() + omega.tensors() + beta.tensors()
    results.append(("mi_objective", check_function(mi_scalar, wrt)))

    reg_cfg = _tiny_config(seed)
    reg_cfg.distance_regression = True
    reg_params = _randomize(init_params(reg_cfg), np.random.default_rng(seed + 998))

    def reg_scalar():
        loss, _, _ = ssl_loss(
            graphs, reg_params["theta"], reg_params["omega"], reg_params["alpha"], reg_cfg, seeds
        )
        return loss

    wrt = reg_params["theta"].tensors() + reg_params["omega"].tensors() + reg_params["alpha"].tensors()
    results.append(("ssl_loss_regression", check_function(reg_scalar, wrt)))
    return results


# ---------------------------------------------------------------------------
# second-order (bi-level) check


def bilevel_toy_check(seed, eta=0.5):
    """FD-verify the outer gradient taken through the inner ascent step.

    The toy model has 8 parameters: a 2-vector sequence side, a 2x2
    structure map, and a 2-vector output weight. Returns the worst error
    of d outer / d structure-params against finite differences, plus the
    norm ratio between that gradient and its eta=0 counterpart.
    """
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=2) for _ in range(3)]
    targets = [rng.normal(size=2) for _ in range(3)]
    theta = param(rng.normal(size=2))
    omega = param(rng.normal(size=(2, 2)))
    alpha = param(rng.normal(size=2))

    def seq_repr(i, th):
        return ad.tanh(ad.mul(th, Tensor(xs[i])))

    def struct_repr(i, om):
        return ad.reshape(ad.matmul(ad.reshape(Tensor(xs[i]), (1, 2)), om), (2,))

    def mi(th, om):
        pos = None
        neg = None
        for i in range(3):
            s = seq_repr(i, th)
            t_pos = ad.dot(s, struct_repr(i, om))
            t_neg = ad.dot(s, struct_repr((i + 1) % 3, om))
            p_term = ad.neg(ad.softplus(ad.neg(t_pos)))
            n_term = ad.softplus(t_neg)
            pos = p_term if pos is None else ad.add(pos, p_term)
            neg = n_term if neg is None else ad.add(neg, n_term)
        return ad.sub(ad.scale(pos, 1.0 / 3), ad.scale(neg, 1.0 / 3))

    def outer(th_tensor, om, create_graph):
        value = mi(th_tensor, om)
        (g_theta,) = ad.grad(value, [th_tensor], create_graph=create_graph)
        shifted = ad.add(th_tensor, ad.scale(g_theta, eta))
        total = None
        for i in range(3):
            d = ad.sub(ad.add(seq_repr(i, shifted), ad.mul(alpha, struct_repr(i, om))),
                       Tensor(targets[i]))
            term = ad.dot(d, d)
            total = term if total is None else ad.add(total, term)
        return total

    (analytic,) = ad.grad(outer(theta, omega, create_graph=True), [omega])
    (numeric,) = numeric_gradient(lambda: outer(theta, omega, create_graph=False).item(), [omega])
    err = normalized_error(analytic.data, numeric)

    def outer_eta0():
        value = mi(theta, omega)
        total = None
        for i in range(3):
            d = ad.sub(ad.add(seq_repr(i, theta), ad.mul(alpha, struct_repr(i, omega))),
                       Tensor(targets[i]))
            term = ad.dot(d, d)
            total = term if total is None else ad.add(total, term)
        # keep the MI value in the graph shape without influencing the result
        return ad.add(total, ad.scale(value, 0.0))

    (grad_eta0,) = ad.grad(outer_eta0(), [omega])
    diff = np.linalg.norm(analytic.data - grad_eta0.data)
    ratio = diff / max(np.linalg.norm(analytic.data), 1e-30)
    return err, ratio


def run_report(seed=0, n_seeds=20):
    """Aggregate worst-case errors across seeds for the full suite."""
    worst = {}
    for s in range(seed, seed + n_seeds):
        for name, err in op_checks(s) + model_checks(s):
            worst[name] = max(worst.get(name, 0.0), err)
    lines = []
    ok = True
    for name in sorted(worst):
        passed = worst[name] < OP_TOLERANCE
        ok = ok and passed
        lines.append(f"{name}\t{worst[name]:.3e}\t{'PASS' if passed else 'FAIL'}")
    err2, ratio = bilevel_toy_check(seed)
    passed2 = err2 < SECOND_ORDER_TOLERANCE and ratio > 1e-3
    ok = ok and passed2
    lines.append(f"second_order_bilevel\t{err2:.3e}\t{'PASS' if passed2 else 'FAIL'}")
    return ok, lines
