"""Graph-based cross-modal residual fusion.

Index layout of a per-path graph: road tokens occupy rows 0..n2-1 in road
sequence order, image tokens rows n2..n2+n1-1 in image sequence order.
``A[i, j] = 1`` means a directed edge j -> i, so ``A @ X`` aggregates in-neighbours.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConsistencyError, DomainError
from .tokenize import CLS, MASK, NODE, PATCH, SEP, Correspondence, ImageTokenSeq, RoadTokenSeq

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CrossModalGraph:
    n_road: int
    n_image: int
    adjacency: np.ndarray  # (N, N) uint8, zero diagonal
    node_bearing_patches: frozenset[int]  # image-sequence positions
    layout: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.n_road + self.n_image


def _layout(road_seq: RoadTokenSeq, image_seq: ImageTokenSeq) -> tuple[str, ...]:
    road = ["road:" + (NODE if t.kind == MASK else t.kind) for t in road_seq.tokens]
    return tuple(road + ["image:" + t.kind for t in image_seq.tokens])


def build_graph(road_seq: RoadTokenSeq, image_seq: ImageTokenSeq, corr: Correspondence) -> CrossModalGraph:
    n2, n1 = len(road_seq), len(image_seq)
    size = n2 + n1
    for rp, ip in corr.node_pairs:
        if not (0 <= rp < n2 and 0 <= ip < n1):
            raise ConsistencyError(f"correspondence ({rp}, {ip}) lies outside the sequences")
        if road_seq.tokens[rp].kind not in (NODE, MASK) or image_seq.tokens[ip].kind != PATCH:
            raise ConsistencyError(f"correspondence ({rp}, {ip}) does not pair a node with a patch")
    A = np.zeros((size, size), dtype=np.uint8)

    def edge(src, dst):
        if src != dst:
            A[dst, src] = 1

    pairs = sorted(corr.node_pairs)
    nodes = [rp for rp, _ in pairs]
    patch_of = [n2 + ip for _, ip in pairs]
    g = image_seq.patches_per_image
    side = math.isqrt(g)

    for i, (v, q) in enumerate(zip(nodes, patch_of)):
        context = [j for j in (i - 1, i + 1) if 0 <= j < len(nodes)]
        edge(q, v)
        for j in context:
            edge(nodes[j], v)
            edge(patch_of[j], v)
        for j in [i] + context:
            edge(nodes[j], q)
        for j in context:
            edge(patch_of[j], q)
        k = image_seq.tokens[q - n2].k
        for nk in (k - 1 if (k - 1) % side else None, k + 1 if k % side else None,
                   k - side if k > side else None, k + side if k + side <= g else None):
            if nk is not None:
                edge(q - k + nk, q)

    road_seps = list(road_seq.sep_positions)
    image_seps = [n2 + p for p in image_seq.sep_positions]
    if len(road_seps) != len(image_seps):
        raise ConsistencyError("road and image sequences carry different sep counts")
    m = len(road_seps)
    for t in range(m):
        for u in (t - 1, t + 1):
            if 0 <= u < m:
                edge(road_seps[u], road_seps[t])
                edge(image_seps[u], image_seps[t])
                edge(image_seps[u], road_seps[t])
                edge(road_seps[u], image_seps[t])
        edge(image_seps[t], road_seps[t])
        edge(road_seps[t], image_seps[t])
    road_cls, image_cls = 0, n2
    for s in road_seps + image_seps:
        edge(s, road_cls)
        edge(s, image_cls)
    edge(image_cls, road_cls)
    edge(road_cls, image_cls)

    bearing = frozenset(ip for _, ip in corr.node_pairs)
    return CrossModalGraph(n2, n1, A, bearing, _layout(road_seq, image_seq))


def self_loop_diagonal(graph: CrossModalGraph) -> np.ndarray:
    diag = np.ones(graph.size, dtype=np.uint8)
    for pos, kind in enumerate(graph.layout[graph.n_road:]):
        if kind == "image:" + PATCH and pos not in graph.node_bearing_patches:
            diag[graph.n_road + pos] = 0
    return diag


def augment(graph: CrossModalGraph) -> np.ndarray:
    """A + I' where I' drops self-loops on patches that contain no path node."""
    return graph.adjacency.astype(np.float64) + np.diag(self_loop_diagonal(graph).astype(np.float64))


def normalize_adjacency(A_tilde: torch.Tensor) -> torch.Tensor:
    if bool((A_tilde < 0).any()):
        raise DomainError("augmented adjacency has negative entries")
    deg = A_tilde.sum(-1)
    dinv = torch.where(deg > 0, deg.clamp_min(1e-30).rsqrt(), torch.zeros_like(deg))
    return dinv.unsqueeze(-1) * A_tilde * dinv.unsqueeze(-2)


def gcn(X: torch.Tensor, A_tilde: torch.Tensor, Wa: torch.Tensor, Wb: torch.Tensor,
        A_hat: torch.Tensor | None = None) -> torch.Tensor:
    """Two-layer ReLU(Â ReLU(Â X Wa) Wb) with Â = D^-1/2 Ã D^-1/2, D = row sums of Ã."""
    if A_hat is None:
        A_hat = normalize_adjacency(A_tilde)
    h = torch.relu(A_hat @ (X @ Wa))
    return torch.relu(A_hat @ (h @ Wb))


def pool(X_hat: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over rows; with ``valid`` (B, N) only unpadded rows count."""
    if valid is None:
        return X_hat.mean(dim=-2)
    w = valid.to(X_hat.dtype)
    return (X_hat * w.unsqueeze(-1)).sum(-2) / w.sum(-1, keepdim=True)


def residual_concat(P0, H, P, H0):
    if P0.shape != P.shape or H.shape != H0.shape or P0.shape[-1] != H.shape[-1]:
        raise ValueError(f"inconsistent shapes P0{tuple(P0.shape)} H{tuple(H.shape)} "
                         f"P{tuple(P.shape)} H0{tuple(H0.shape)}")
    return torch.cat([P0, H], dim=-2), torch.cat([P, H0], dim=-2)


def fuse_loss(y, z, y_neg, z_neg, beta: float = 1.0) -> torch.Tensor:
    """Quadruplet hinge, summed per path and averaged over the batch."""
    if y.dim() == 1:
        y, z, y_neg, z_neg = y[None], z[None], y_neg[None], z_neg[None]
    pos = ((y - z) ** 2).sum(-1)
    t1 = torch.relu(pos - ((y - z_neg) ** 2).sum(-1) + beta)
    t2 = torch.relu(pos - ((z - y_neg) ** 2).sum(-1) + beta)
    return (t1 + t2).sum() / y.shape[0]


def sample_negatives(batch_size: int, rng: np.random.Generator) -> np.ndarray | None:
    """One uniformly random other index per anchor; None when the batch has one path."""
    if batch_size < 2:
        log.warning("batch of size 1 has no negative for the quadruplet loss; contribution is 0")
        return None
    off = rng.integers(1, batch_size, size=batch_size)
    return (np.arange(batch_size) + off) % batch_size


def path_embedding(y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    if y.shape != z.shape:
        raise ValueError(f"y{tuple(y.shape)} and z{tuple(z.shape)} differ in shape")
    return torch.cat([y, z], dim=-1)


class FusionWeights(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.w1, self.w2, self.w3, self.w4 = (nn.Parameter(torch.empty(d, d)) for _ in range(4))
        for w in (self.w1, self.w2, self.w3, self.w4):
            nn.init.xavier_uniform_(w)


class CrossAttentionFusion(nn.Module):
    """Single-head attention where each token attends only to the other modality's tokens."""

    def __init__(self, d: int):
        super().__init__()
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)

    def forward(self, X: torch.Tensor, is_road: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        scores = self.q(X) @ self.k(X).transpose(-1, -2) / math.sqrt(X.shape[-1])
        allowed = (is_road.unsqueeze(-1) != is_road.unsqueeze(-2)) & valid.unsqueeze(-2)
        scores = scores.masked_fill(~allowed, -1e9)
        out = torch.relu(torch.softmax(scores, dim=-1) @ self.v(X))
        return out * valid.unsqueeze(-1).to(out.dtype)


# ------------------------------------------------------------- dump format

def graph_dump(graph: CrossModalGraph) -> dict:
    src_dst = np.argwhere(graph.adjacency.T)  # rows of A.T are sources
    return {
        "size": graph.size,
        "layout": list(graph.layout),
        "edges": [[int(s), int(d)] for s, d in src_dst],
        "diag": [int(v) for v in self_loop_diagonal(graph)],
    }


def dumps_graph(graph: CrossModalGraph) -> str:
    return json.dumps(graph_dump(graph), separators=(",", ":")) + "\n"


def parse_graph_dump(payload: dict) -> tuple[np.ndarray, np.ndarray]:
    """Return (adjacency, diag) reconstructed from a graph-dump record."""
    n = int(payload["size"])
    A = np.zeros((n, n), dtype=np.uint8)
    for s, d in payload["edges"]:
        A[d, s] = 1
    return A, np.asarray(payload["diag"], dtype=np.uint8)
