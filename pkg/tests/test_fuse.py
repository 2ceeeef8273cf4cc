import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmpath.errors import ConsistencyError, DomainError
from mmpath.fuse import (augment, build_graph, dumps_graph, fuse_loss, gcn, graph_dump, normalize_adjacency,
                         parse_graph_dump, path_embedding, pool, residual_concat, sample_negatives,
                         self_loop_diagonal)
from mmpath.tokenize import Correspondence, build_correspondence, tokenize_image, tokenize_road
from mmpath.world import (RoadNetwork, RoadPath, TileGrid, WorldConfig, derive_image_path,
                          generate_synthetic_world)

from fd import check
from graph_oracle import oracle_adjacency

GRID = TileGrid(cols=2, rows=2, r=500, meters_per_pixel=2.0)
O = 125  # 4x4 lattice of 250 m patches


def _graph(xys, grid=GRID, o=O, path_id=0):
    ids = sorted(xys)
    net = RoadNetwork({i: xys[i] for i in ids}, tuple(zip(ids, ids[1:])))
    path = RoadPath(path_id, tuple(ids))
    ip = derive_image_path(path, net, grid)
    rs, iseq = tokenize_road(path, ip), tokenize_image(ip, grid, o)
    corr = build_correspondence(rs, iseq, path, net, grid, o)
    return build_graph(rs, iseq, corr), rs, iseq, corr, (path, net)


def _centre(k):
    row, col = divmod(k - 1, 4)
    return (125.0 + 250 * col, 125.0 + 250 * row)


# v2..v6 with v3, v4, v5 in patches 1, 6, 11 of a single image
INTERIOR_LATTICE = {2: _centre(16), 3: _centre(1), 4: _centre(6), 5: _centre(11), 6: _centre(13)}


def _in(A, i):
    return set(np.flatnonzero(A[i]).tolist())


def test_interior_node_has_five_entities():
    g, rs, *_ = _graph(INTERIOR_LATTICE)
    # road: cls 0, nodes 1..5, sep 6; image row for patch k is 7 + k
    assert _in(g.adjacency, 3) == {2, 4, 7 + 1, 7 + 6, 7 + 11}


def test_patch_has_nine_entities():
    g, *_ = _graph(INTERIOR_LATTICE)
    lattice = {7 + k for k in (2, 5, 7, 10)}
    assert _in(g.adjacency, 7 + 6) == {2, 3, 4, 7 + 1, 7 + 11} | lattice
    assert len(_in(g.adjacency, 7 + 6)) == 9


def test_graph_matches_oracle_small_cases():
    for xys in (INTERIOR_LATTICE, {1: (10.0, 10.0), 2: (20.0, 30.0), 3: (1300.0, 10.0), 4: (1300.0, 1300.0)}):
        g, _, _, _, (path, net) = _graph(xys)
        A, diag = oracle_adjacency(path, net, GRID, O)
        np.testing.assert_array_equal(g.adjacency, A)
        np.testing.assert_array_equal(self_loop_diagonal(g), diag)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([4, 8, 16]))
def test_graph_matches_oracle_random_worlds(seed, o):
    w = generate_synthetic_world(seed, WorldConfig(n_paths=4, n_nodes=40))
    for p in w.paths:
        ip = derive_image_path(p, w.network, w.grid)
        rs, iseq = tokenize_road(p, ip), tokenize_image(ip, w.grid, o)
        g = build_graph(rs, iseq, build_correspondence(rs, iseq, p, w.network, w.grid, o))
        A, diag = oracle_adjacency(p, w.network, w.grid, o)
        np.testing.assert_array_equal(g.adjacency, A)
        np.testing.assert_array_equal(np.diag(augment(g)), diag)
        assert not g.adjacency.diagonal().any()
        road_nodes = [i for i, k in enumerate(g.layout) if k == "road:node"]
        assert all(g.adjacency[i].sum() >= 1 for i in road_nodes)
        seps = sum(k.endswith(":sep") for k in g.layout)
        assert g.adjacency[0].sum() == seps + 1 == g.adjacency[g.n_road].sum()


def test_relabel_invariance():
    g1, *_ = _graph(INTERIOR_LATTICE, path_id=0)
    g2, *_ = _graph({k + 100: v for k, v in INTERIOR_LATTICE.items()}, path_id=42)
    np.testing.assert_array_equal(g1.adjacency, g2.adjacency)
    assert g1.node_bearing_patches == g2.node_bearing_patches


def test_out_of_range_correspondence():
    g, rs, iseq, corr, _ = _graph(INTERIOR_LATTICE)
    bad = Correspondence(corr.node_pairs + ((1, len(iseq) + 3),), corr.sep_pairs)
    with pytest.raises(ConsistencyError):
        build_graph(rs, iseq, bad)


def test_augment_full_identity():
    # one patch per image: every patch bears a node
    g, *_ = _graph({1: (10.0, 10.0), 2: (1200.0, 10.0)}, o=500)
    np.testing.assert_array_equal(augment(g), g.adjacency + np.eye(g.size))


def test_augment_lattice_neighbour_diag_zero():
    g, *_ = _graph(INTERIOR_LATTICE)
    A_t = augment(g)
    assert A_t[7 + 5, 7 + 5] == 0  # only a lattice neighbour
    assert A_t[7 + 6, 7 + 6] == 1
    assert A_t[0, 0] == A_t[6, 6] == A_t[7, 7] == A_t[24, 24] == 1


def test_dump_round_trip():
    g, *_ = _graph(INTERIOR_LATTICE)
    import json
    A, diag = parse_graph_dump(json.loads(dumps_graph(g)))
    np.testing.assert_array_equal(A, g.adjacency)
    np.testing.assert_array_equal(diag, self_loop_diagonal(g))
    assert graph_dump(g)["layout"][0] == "road:cls"


# ------------------------------------------------------------------ gcn

def test_gcn_identity():
    X = torch.rand(5, 3, dtype=torch.float64)
    I = torch.eye(3, dtype=torch.float64)
    torch.testing.assert_close(gcn(X, torch.eye(5, dtype=torch.float64), I, I), X)


def test_gcn_chain_dense_oracle():
    A_t = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 1]], dtype=np.float64)
    X = np.array([[1.0, -2.0], [0.5, 3.0], [-1.0, 1.0]])
    Wa = np.array([[0.3, -0.7], [1.1, 0.2]])
    Wb = np.array([[-0.4, 0.9], [0.6, 0.5]])
    deg = A_t.sum(1)
    Dm = np.diag(deg ** -0.5)
    An = Dm @ A_t @ Dm
    relu = lambda m: np.maximum(m, 0)
    expected = relu(An @ relu(An @ X @ Wa) @ Wb)
    got = gcn(*(torch.from_numpy(a) for a in (X, A_t, Wa, Wb)))
    np.testing.assert_allclose(got.numpy(), expected, atol=1e-9, rtol=0)


def test_gcn_zero_rows():
    A_t = torch.tensor([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    X = torch.rand(3, 4, dtype=torch.float64) + 1
    W = torch.rand(4, 4, dtype=torch.float64)
    out = gcn(X, A_t, W, W)
    assert torch.count_nonzero(out[2]) == 0
    assert torch.isfinite(normalize_adjacency(A_t)).all()


def test_negative_adjacency():
    with pytest.raises(DomainError):
        normalize_adjacency(torch.tensor([[1.0, -1.0], [0.0, 1.0]]))


def test_gcn_gradients():
    torch.manual_seed(4)
    g, *_ = _graph(INTERIOR_LATTICE)
    A_t = torch.from_numpy(augment(g))
    X = torch.randn(g.size, 8, dtype=torch.float64)
    Wa = torch.randn(8, 8, dtype=torch.float64, requires_grad=True)
    Wb = torch.randn(8, 8, dtype=torch.float64, requires_grad=True)
    assert check(lambda: gcn(X, A_t, Wa, Wb).sum(), [Wa, Wb]) <= 1e-4


# --------------------------------------------------------- pool / concat

def test_pool_cases():
    c = torch.tensor([1.0, -2.0, 3.0])
    torch.testing.assert_close(pool(c.expand(4, 3)), c)
    assert torch.count_nonzero(pool(torch.zeros(3, 5))) == 0
    X = torch.randn(6, 4, dtype=torch.float64)
    torch.testing.assert_close(pool(X), torch.tensor(X.numpy().mean(0)))
    valid = torch.tensor([[True, True, False]])
    torch.testing.assert_close(pool(X[None, :3], valid)[0], X[:2].mean(0))


def test_residual_concat_layout():
    P0, P = torch.randn(3, 4), torch.randn(3, 4)
    H, H0 = torch.randn(2, 4), torch.randn(2, 4)
    U, Q = residual_concat(P0, H, P, H0)
    assert U.shape == Q.shape == (5, 4)
    assert torch.equal(U[:3], P0) and torch.equal(U[3 + 1], H[1])
    assert torch.equal(Q[:3], P) and torch.equal(Q[3:], H0)
    Z = torch.zeros(3, 4)
    assert torch.count_nonzero(torch.cat(residual_concat(Z, torch.zeros(2, 4), Z, torch.zeros(2, 4)))) == 0
    with pytest.raises(ValueError):
        residual_concat(P0, H, P[:2], H0)


def test_path_embedding():
    x = path_embedding(torch.tensor([1.0, 2.0]), torch.tensor([3.0, 4.0]))
    assert x.tolist() == [1.0, 2.0, 3.0, 4.0]
    y, z = torch.randn(5), torch.randn(5)
    x = path_embedding(y, z)
    assert torch.equal(x[:5], y) and torch.equal(x[5:], z)
    with pytest.raises(ValueError):
        path_embedding(torch.zeros(2), torch.zeros(3))


# ------------------------------------------------------------ quadruplet

def test_fuse_loss_satisfied_margin():
    y = torch.zeros(4)
    far = torch.full((4,), 2.0)
    assert fuse_loss(y, y.clone(), far, -far, beta=1.0).item() == 0.0


def test_fuse_loss_collapse():
    v = torch.randn(4)
    assert fuse_loss(v, v, v, v, beta=0.7).item() == pytest.approx(1.4)


def test_fuse_loss_direct_formula():
    torch.manual_seed(0)
    y, z, yn, zn = (torch.randn(3, 6, dtype=torch.float64) for _ in range(4))
    total = 0.0
    for i in range(3):
        pos = math.dist(y[i].tolist(), z[i].tolist()) ** 2
        total += max(0.0, pos - math.dist(y[i].tolist(), zn[i].tolist()) ** 2 + 2.0)
        total += max(0.0, pos - math.dist(z[i].tolist(), yn[i].tolist()) ** 2 + 2.0)
    assert fuse_loss(y, z, yn, zn, 2.0).item() == pytest.approx(total / 3, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fuse_loss_rotation_invariant(seed):
    gen = torch.Generator().manual_seed(seed)
    vecs = [torch.randn(2, 5, dtype=torch.float64, generator=gen) for _ in range(4)]
    Q, _ = torch.linalg.qr(torch.randn(5, 5, dtype=torch.float64, generator=gen))
    a = fuse_loss(*vecs, beta=1.0).item()
    b = fuse_loss(*(v @ Q for v in vecs), beta=1.0).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_fuse_loss_gradients():
    torch.manual_seed(1)
    y, z, yn, zn = (torch.randn(3, 8, dtype=torch.float64, requires_grad=True) for _ in range(4))
    assert check(lambda: fuse_loss(y, z, yn, zn, 5.0), [y, z, yn, zn]) <= 1e-4


def test_sample_negatives():
    rng = np.random.default_rng(0)
    for B in range(2, 9):
        for _ in range(50):
            neg = sample_negatives(B, rng)
            assert (neg != np.arange(B)).all() and neg.min() >= 0 and neg.max() < B
    assert sample_negatives(1, rng) is None
