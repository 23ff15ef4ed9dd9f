import numpy as np
import pytest

from protein_ssl import autodiff as ad
from protein_ssl.autodiff import Tensor
from protein_ssl.errors import DimensionMismatch, MissingEmbedding
from protein_ssl.geometry import DihedralPair
from protein_ssl.graph_builder import ProteinGraph, mask_graph
from protein_ssl.models import (
    FrozenEmbeddings,
    adjacency_matrix,
    angle_head,
    discriminator,
    distance_probs,
    fuse,
    gnn_forward,
    gnn_input_dim,
    init_params,
    load_embeddings,
    node_input,
    pooled,
    save_embeddings,
    seq_forward,
    validate_params,
)
from protein_ssl.optim import ParamSet
from protein_ssl.structure_io import ProteinSequence

from helpers import (
    build_chain,
    graph_from_structure,
    helix_structure,
    random_rigid_motion,
    tiny_config,
    transform_structure,
)


def toy_graph(cfg, length=9, structure_id="g", baked=True):
    """Random chain; by default the graph carries a baked sequence block so
    gnn_forward can run without a live encoder."""
    rng = np.random.default_rng(abs(hash(structure_id)) % 2**32)
    phis = list(rng.uniform(-2.6, -0.4, length))
    psis = list(rng.uniform(-1.4, 2.2, length))
    structure = build_chain(phis, psis, structure_id=structure_id)
    seq_emb = rng.normal(size=(length, cfg.seq_dim)) if baked else None
    return graph_from_structure(structure, cfg, seq_emb=seq_emb)


def randomized_params(cfg, scale=0.3, salt=0):
    params = init_params(cfg)
    rng = np.random.default_rng(cfg.seed + 7000 + salt)
    for ps in params.values():
        for _, t in ps.items():
            t.data += scale * rng.normal(size=t.data.shape)
    return params


def identity_omega(width, layers=1):
    omega = ParamSet("omega")
    omega.add("proj_w", np.eye(width))
    omega.add("proj_b", np.zeros(width))
    for k in range(1, layers + 1):
        omega.add(f"layer{k}_w", np.eye(width))
        omega.add(f"layer{k}_b", np.zeros(width))
    return omega


def bare_graph(features, edges):
    length = features.shape[0]
    return ProteinGraph(
        id="bare",
        features=np.asarray(features, float),
        seq_dim=0,
        rbf_count=1,
        edges=edges,
        distances=np.zeros((length, length)),
        dihedrals=[DihedralPair(phi=0.1, psi=0.1)] * length,
        sequence=ProteinSequence(id="bare", letters="A" * length),
    )


# ---------------------------------------------------------------------------
# GNN forward


def test_isolated_nodes_reduce_to_per_node_mlp():
    cfg = tiny_config()
    graph = toy_graph(cfg)
    no_edges = ProteinGraph(
        id=graph.id,
        features=graph.features,
        seq_dim=graph.seq_dim,
        rbf_count=graph.rbf_count,
        edges=[],
        distances=graph.distances,
        dihedrals=graph.dihedrals,
        sequence=graph.sequence,
    )
    params = randomized_params(cfg)
    omega = params["omega"]
    states = gnn_forward(no_edges, omega)
    # direct per-node MLP with the same weights
    x = node_input(no_edges).data
    h = x @ omega["proj_w"].data + omega["proj_b"].data
    h = np.maximum(h @ omega["layer1_w"].data + omega["layer1_b"].data, 0.0)
    h = h @ omega["layer2_w"].data + omega["layer2_b"].data
    np.testing.assert_allclose(states.layers[-1].data, h, atol=1e-12)


def test_two_node_combine_input():
    # identity weights expose the aggregation: h1 = (1 + w) * u for equal states
    u = np.array([0.5, -1.0, 2.0])
    w = 0.25
    graph = bare_graph(np.vstack([u, u]), [(0, 1, w)])
    omega = identity_omega(4, layers=1)  # width = 3 features + indicator
    states = gnn_forward(graph, omega)
    expected = np.concatenate([u, [0.0]]) * (1 + w)
    np.testing.assert_allclose(states.layers[-1].data[0], expected, atol=1e-12)
    np.testing.assert_allclose(states.layers[-1].data[1], expected, atol=1e-12)


def test_graph_repr_is_mean_of_identical_rows():
    u = np.array([1.0, 2.0, 3.0])
    graph = bare_graph(np.vstack([u, u, u]), [])
    omega = identity_omega(4, layers=1)
    states = gnn_forward(graph, omega)
    np.testing.assert_allclose(states.graph_repr.data[0], np.concatenate([u, [0.0]]), atol=1e-12)


def test_permutation_equivariance():
    cfg = tiny_config()
    graph = toy_graph(cfg, length=8)
    params = randomized_params(cfg)
    omega = params["omega"]
    rng = np.random.default_rng(3)
    perm = rng.permutation(graph.node_count)
    inv = np.argsort(perm)
    permuted = ProteinGraph(
        id=graph.id,
        features=graph.features[perm],
        seq_dim=graph.seq_dim,
        rbf_count=graph.rbf_count,
        edges=[(min(inv[i], inv[j]), max(inv[i], inv[j]), w) for i, j, w in graph.edges],
        distances=graph.distances[np.ix_(perm, perm)],
        dihedrals=[graph.dihedrals[i] for i in perm],
        sequence=graph.sequence,
    )
    base = gnn_forward(graph, omega)
    moved = gnn_forward(permuted, omega)
    assert np.max(np.abs(moved.layers[-1].data - base.layers[-1].data[perm])) < 1e-9
    assert np.max(np.abs(moved.graph_repr.data - base.graph_repr.data)) < 1e-9


def test_rigid_motion_invariance_from_coordinates():
    cfg = tiny_config()
    structure = helix_structure(10)
    seq_emb = np.random.default_rng(8).normal(size=(10, cfg.seq_dim))
    params = randomized_params(cfg)
    omega = params["omega"]
    base = gnn_forward(graph_from_structure(structure, cfg, seq_emb=seq_emb), omega)
    rng = np.random.default_rng(9)
    for _ in range(5):
        rot, t = random_rigid_motion(rng)
        moved = graph_from_structure(transform_structure(structure, rot, t), cfg, seq_emb=seq_emb)
        out = gnn_forward(moved, omega)
        assert np.max(np.abs(out.layers[-1].data - base.layers[-1].data)) < 1e-9


def test_zeroed_edge_weights_equal_no_edges():
    cfg = tiny_config()
    graph = toy_graph(cfg)
    params = randomized_params(cfg)
    omega = params["omega"]
    zeroed = ProteinGraph(
        id=graph.id,
        features=graph.features,
        seq_dim=graph.seq_dim,
        rbf_count=graph.rbf_count,
        edges=[(i, j, 0.0) for i, j, _ in graph.edges],
        distances=graph.distances,
        dihedrals=graph.dihedrals,
        sequence=graph.sequence,
    )
    empty = ProteinGraph(
        id=graph.id,
        features=graph.features,
        seq_dim=graph.seq_dim,
        rbf_count=graph.rbf_count,
        edges=[],
        distances=graph.distances,
        dihedrals=graph.dihedrals,
        sequence=graph.sequence,
    )
    a = gnn_forward(zeroed, omega)
    b = gnn_forward(empty, omega)
    np.testing.assert_array_equal(a.layers[-1].data, b.layers[-1].data)


def test_input_dim_mismatch_names_parameter():
    cfg = tiny_config()
    graph = toy_graph(cfg)
    bad = tiny_config(rbf_count=6)
    params = init_params(bad)
    with pytest.raises(DimensionMismatch, match="proj_w"):
        gnn_forward(graph, params["omega"])


def test_masked_and_plain_inputs_share_width():
    cfg = tiny_config()
    graph = toy_graph(cfg, baked=False)
    masked = mask_graph(graph, 0.3, 1)
    plain = node_input(graph)
    hidden = node_input(masked)
    assert plain.shape == hidden.shape == (graph.node_count, gnn_input_dim(0, cfg.rbf_count))
    # indicator column: zeros on the plain graph, ones exactly on masked nodes
    assert np.all(plain.data[:, -1] == 0.0)
    marked = np.flatnonzero(hidden.data[:, -1] == 1.0)
    np.testing.assert_array_equal(marked, masked.masked_nodes)


# ---------------------------------------------------------------------------
# sequence encoders


def test_seq_forward_deterministic_and_shaped():
    cfg = tiny_config()
    params = init_params(cfg)
    seq = ProteinSequence(id="s", letters="AG")
    a = seq_forward(seq, params["theta"])
    b = seq_forward(seq, params["theta"])
    assert a.shape == (2, cfg.seq_dim)
    np.testing.assert_array_equal(a.data, b.data)


def test_seq_forward_gradients_reach_every_theta_tensor():
    cfg = tiny_config()
    params = init_params(cfg)
    seq = ProteinSequence(id="s", letters="ACDEF")
    out = ad.sum_all(seq_forward(seq, params["theta"]))
    grads = ad.grad(out, params["theta"].tensors())
    for (name, _), g in zip(params["theta"].items(), grads):
        assert np.any(g.data != 0.0), name


def test_frozen_embeddings_lookup_and_missing():
    table = {"a": np.ones((3, 4)), "b": np.zeros((2, 4))}
    frozen = FrozenEmbeddings(table)
    np.testing.assert_array_equal(frozen.lookup("a"), table["a"])
    with pytest.raises(MissingEmbedding):
        frozen.lookup("missing")


def test_embedding_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    table = {
        "p1": rng.normal(size=(5, 6)).astype(np.float32).astype(np.float64),
        "p2": rng.normal(size=(3, 6)).astype(np.float32).astype(np.float64),
    }
    path = tmp_path / "emb.sem"
    save_embeddings(path, table)
    loaded = load_embeddings(path)
    assert len(loaded) == 2
    np.testing.assert_array_equal(loaded.lookup("p1"), table["p1"])
    np.testing.assert_array_equal(loaded.lookup("p2"), table["p2"])


# ---------------------------------------------------------------------------
# fusion and heads


def test_fuse_identity_cases():
    cfg = tiny_config(seq_dim=8, hidden_dim=8)  # E == H: no projection
    params = init_params(cfg)
    assert "fuse_w" not in params["alpha"]
    hs = Tensor(np.array([[1.0, 2.0]]))
    hk = Tensor(np.array([[3.0, 4.0]]))
    alpha = ParamSet("alpha")  # no fuse_w: identity projection
    np.testing.assert_array_equal(fuse(hs, hk, alpha).data, [[4.0, 6.0]])
    zero = Tensor(np.zeros((1, 2)))
    np.testing.assert_array_equal(fuse(zero, hk, alpha).data, hk.data)
    np.testing.assert_array_equal(fuse(hs, zero, alpha).data, hs.data)


def test_fuse_projects_when_widths_differ():
    alpha = ParamSet("alpha")
    alpha.add("fuse_w", np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]]))
    hs = Tensor(np.array([[2.0, 3.0]]))
    hk = Tensor(np.zeros((1, 3)))
    np.testing.assert_array_equal(fuse(hs, hk, alpha).data, [[2.0, 3.0, -1.0]])


def test_fuse_width_mismatch_without_projection():
    alpha = ParamSet("alpha")
    with pytest.raises(DimensionMismatch):
        fuse(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), alpha)


def test_distance_probs_rows_sum_to_one_and_diagonal_fixed():
    cfg = tiny_config()
    params = randomized_params(cfg)
    fused = Tensor(np.random.default_rng(0).normal(size=(5, cfg.hidden_dim)))
    probs = distance_probs(fused, params["alpha"])
    assert probs.shape == (25, cfg.bins)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
    # rows with i == j see the zero vector: all five are identical
    diag = probs.data[[0, 6, 12, 18, 24]]
    assert np.max(np.abs(diag - diag[0])) == 0.0


def test_distance_probs_asymmetric_in_general():
    cfg = tiny_config()
    params = randomized_params(cfg)
    fused = Tensor(np.random.default_rng(1).normal(size=(3, cfg.hidden_dim)))
    probs = distance_probs(fused, params["alpha"]).data
    # pair (0,1) is row 1; pair (1,0) is row 3
    assert np.max(np.abs(probs[1] - probs[3])) > 1e-6


def test_angle_head_range_and_zero_weights():
    cfg = tiny_config()
    fresh = init_params(cfg)  # head output layers start at zero
    h = Tensor(np.random.default_rng(2).normal(size=(4, cfg.hidden_dim)))
    np.testing.assert_array_equal(angle_head(h, fresh["alpha"]).data, np.zeros((4, 2)))
    rand = randomized_params(cfg)
    out = angle_head(Tensor(np.random.default_rng(3).normal(size=(6, cfg.hidden_dim)) * 5), rand["alpha"])
    assert np.all(out.data > -1.0) and np.all(out.data < 1.0)


# ---------------------------------------------------------------------------
# discriminator


def test_discriminator_zero_parameters_scores_zero():
    cfg = tiny_config()
    beta = ParamSet("beta")
    for tower, first in (("seq", cfg.seq_dim), ("struct", cfg.hidden_dim)):
        dims = (first, cfg.hidden_dim, cfg.hidden_dim, cfg.hidden_dim)
        for i in (1, 2, 3):
            beta.add(f"{tower}{i}_w", np.zeros((dims[i - 1], dims[i])))
            beta.add(f"{tower}{i}_b", np.zeros(dims[i]))
            beta.add(f"{tower}{i}_s", np.zeros((dims[i - 1], dims[i])))
    s = Tensor(np.random.default_rng(0).normal(size=(1, cfg.seq_dim)))
    g = Tensor(np.random.default_rng(1).normal(size=(1, cfg.hidden_dim)))
    assert discriminator(s, g, beta).item() == 0.0


def test_discriminator_bilinear_in_tower_outputs():
    cfg = tiny_config()
    params = randomized_params(cfg)
    beta = params["beta"]
    s = Tensor(np.random.default_rng(2).normal(size=(1, cfg.seq_dim)))
    g = Tensor(np.random.default_rng(3).normal(size=(1, cfg.hidden_dim)))
    base = discriminator(s, g, beta).item()
    # scaling the struct tower's last layer scales its output, hence the score
    for name in ("struct3_w", "struct3_b", "struct3_s"):
        beta[name].data *= 2.5
    assert discriminator(s, g, beta).item() == pytest.approx(2.5 * base, rel=1e-12)


def test_discriminator_towers_not_shared():
    cfg = tiny_config(seq_dim=8, hidden_dim=8)
    params = randomized_params(cfg)
    beta = params["beta"]
    a = Tensor(np.random.default_rng(4).normal(size=(1, 8)))
    b = Tensor(np.random.default_rng(5).normal(size=(1, 8)))
    assert discriminator(a, b, beta).item() != pytest.approx(discriminator(b, a, beta).item())


def test_pooled_shape():
    h = Tensor(np.arange(12, dtype=float).reshape(4, 3))
    p = pooled(h)
    assert p.shape == (1, 3)
    np.testing.assert_allclose(p.data[0], h.data.mean(axis=0))


def test_adjacency_symmetric_zero_diagonal():
    cfg = tiny_config()
    graph = toy_graph(cfg)
    a = adjacency_matrix(graph)
    np.testing.assert_array_equal(a, a.T)
    assert np.all(np.diag(a) == 0.0)


def test_validate_params_reports_names():
    cfg = tiny_config()
    params = init_params(cfg)
    params["omega"]._params.pop("layer2_b")
    with pytest.raises(DimensionMismatch, match="layer2_b"):
        validate_params(params, cfg)
    other = tiny_config(hidden_dim=12)
    with pytest.raises(DimensionMismatch, match="proj_w"):
        validate_params(init_params(other), cfg)
