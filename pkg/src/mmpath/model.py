"""Per-path preparation, batch collation and the full two-branch model."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .align import Temperature, coarse_loss, cosine_distance_sum
from .config import TrainConfig
from .encode import EncoderStack, NodeClassifier, mask_count, mnm_loss_batch
from .fuse import (CrossAttentionFusion, FusionWeights, augment, build_graph, fuse_loss, gcn,
                   normalize_adjacency, path_embedding, pool, residual_concat)
from .tokenize import (MASK_CODE, EmbeddingTables, PatchBank, build_correspondence, build_vocab,
                       image_codes, road_codes, tokenize_image, tokenize_road)
from .world import RoadPath, World, derive_image_path


def resolve_patch_side(cfg: TrainConfig, r: int) -> int:
    return cfg.patch_side or max(1, r // 4)


@dataclass
class PreparedPath:
    path_id: int
    road_codes: np.ndarray
    node_positions: np.ndarray
    node_targets: np.ndarray  # vocabulary index per node position
    image_codes: np.ndarray
    corr_road: np.ndarray
    corr_image: np.ndarray
    sep_road: np.ndarray
    sep_image: np.ndarray
    a_tilde: np.ndarray  # (n2 + n1) square, float64

    @property
    def n_road(self) -> int:
        return len(self.road_codes)

    @property
    def n_image(self) -> int:
        return len(self.image_codes)


def prepare_path(world: World, path: RoadPath, vocab: dict[int, int], bank: PatchBank, o: int) -> PreparedPath:
    ip = derive_image_path(path, world.network, world.grid)
    rs = tokenize_road(path, ip)
    iseq = tokenize_image(ip, world.grid, o)
    corr = build_correspondence(rs, iseq, path, world.network, world.grid, o)
    graph = build_graph(rs, iseq, corr)
    rc = road_codes(rs, vocab)
    node_pos = np.array(rs.node_positions, dtype=np.int64)
    pairs = np.array(corr.node_pairs, dtype=np.int64).reshape(-1, 2)
    seps = np.array(corr.sep_pairs, dtype=np.int64).reshape(-1, 2)
    return PreparedPath(
        path_id=path.path_id,
        road_codes=rc,
        node_positions=node_pos,
        node_targets=np.array([vocab[n] for n in path.nodes], dtype=np.int64),
        image_codes=image_codes(iseq, bank),
        corr_road=pairs[:, 0], corr_image=pairs[:, 1],
        sep_road=seps[:, 0], sep_image=seps[:, 1],
        a_tilde=augment(graph),
    )


_WORKER_STATE = {}


def _init_worker(world, vocab, o):
    _WORKER_STATE.update(world=world, vocab=vocab, o=o, bank=PatchBank(world.rasters, world.grid, o))


def _prepare_in_worker(path):
    s = _WORKER_STATE
    return prepare_path(s["world"], path, s["vocab"], s["bank"], s["o"])


def prepare_world(world: World, vocab: dict[int, int], o: int, paths=None, workers: int = 1) -> list[PreparedPath]:
    """Prepare paths in order; the result does not depend on ``workers``."""
    paths = list(world.paths if paths is None else paths)
    if workers <= 1 or len(paths) < 2:
        bank = PatchBank(world.rasters, world.grid, o)
        return [prepare_path(world, p, vocab, bank, o) for p in paths]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(world, vocab, o)) as ex:
        return list(ex.map(_prepare_in_worker, paths, chunksize=max(1, len(paths) // (4 * workers))))


def sample_mask_positions(n_nodes: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    m = mask_count(n_nodes, ratio)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(n_nodes, size=m, replace=False))


@dataclass
class Batch:
    size: int
    road_codes: torch.Tensor
    road_pad: torch.Tensor
    image_codes: torch.Tensor
    image_pad: torch.Tensor
    mask_b: torch.Tensor
    mask_pos: torch.Tensor
    mask_tgt: torch.Tensor
    fine_b: torch.Tensor
    fine_road: torch.Tensor
    fine_image: torch.Tensor
    sep_b: torch.Tensor
    sep_road: torch.Tensor
    sep_image: torch.Tensor
    a_tilde: torch.Tensor  # (B, N, N), N = n2max + n1max
    valid: torch.Tensor
    is_road: torch.Tensor


def collate(items: list[PreparedPath], masks: list[np.ndarray] | None = None) -> Batch:
    """Pad to batch maxima. ``masks[b]`` indexes into ``items[b].node_positions``."""
    B = len(items)
    n2 = max(p.n_road for p in items)
    n1 = max(p.n_image for p in items)
    N = n2 + n1
    rc = np.zeros((B, n2), np.int64)
    ic = np.zeros((B, n1), np.int64)
    rpad = np.ones((B, n2), bool)
    ipad = np.ones((B, n1), bool)
    A = np.zeros((B, N, N), np.float64)
    mb, mp, mt, fb, fr, fi, sb, sr, si = ([] for _ in range(9))
    for b, p in enumerate(items):
        a, c = p.n_road, p.n_image
        rc[b, :a] = p.road_codes
        ic[b, :c] = p.image_codes
        rpad[b, :a] = False
        ipad[b, :c] = False
        idx = np.concatenate([np.arange(a), n2 + np.arange(c)])
        A[b][np.ix_(idx, idx)] = p.a_tilde
        if masks is not None and len(masks[b]):
            pos = p.node_positions[masks[b]]
            rc[b, pos] = MASK_CODE
            mb.append(np.full(len(pos), b))
            mp.append(pos)
            mt.append(p.node_targets[masks[b]])
        fb.append(np.full(len(p.corr_road), b))
        fr.append(p.corr_road)
        fi.append(p.corr_image)
        sb.append(np.full(len(p.sep_road), b))
        sr.append(p.sep_road)
        si.append(p.sep_image)

    def cat(chunks):
        return torch.from_numpy(np.concatenate(chunks).astype(np.int64)) if chunks else torch.zeros(0, dtype=torch.long)

    valid = np.concatenate([~rpad, ~ipad], axis=1)
    is_road = np.zeros((B, N), bool)
    is_road[:, :n2] = True
    return Batch(B, torch.from_numpy(rc), torch.from_numpy(rpad), torch.from_numpy(ic), torch.from_numpy(ipad),
                 cat(mb), cat(mp), cat(mt), cat(fb), cat(fr), cat(fi), cat(sb), cat(sr), cat(si),
                 torch.from_numpy(A), torch.from_numpy(valid), torch.from_numpy(is_road))


class TaskHead(nn.Module):
    def __init__(self, d_in: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x))).squeeze(-1)


class MMPath(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, patch_dim: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.tables = EmbeddingTables(vocab_size, patch_dim, d, cfg.max_road_len, cfg.max_image_len)
        self.road_encoder = EncoderStack(d, cfg.layers, cfg.heads, cfg.ffn_width, cfg.dropout)
        self.image_encoder = EncoderStack(d, cfg.layers, cfg.heads, cfg.ffn_width, cfg.dropout)
        self.mnm_head = NodeClassifier(d, vocab_size)
        self.align = Temperature(cfg.sigma_init)
        self.fuse = FusionWeights(d)
        if cfg.variant == "no_gcn":
            self.cross_u = CrossAttentionFusion(d)
            self.cross_q = CrossAttentionFusion(d)
        self.head: TaskHead | None = None
        self.register_buffer("pixels", torch.zeros(0, patch_dim), persistent=False)

    @property
    def embedding_dim(self) -> int:
        return self.cfg.d if self.cfg.variant in ("y_only", "z_only") else 2 * self.cfg.d

    def attach_head(self) -> TaskHead:
        self.head = TaskHead(self.embedding_dim, self.cfg.head_hidden).to(self.pixels.dtype)
        return self.head

    def set_pixels(self, bank: PatchBank) -> None:
        self.pixel_stats = bank.stats
        self.pixels = torch.from_numpy(bank.pixels).to(self.tables.pos_road.dtype)

    def encode_batch(self, batch: Batch):
        P0 = self.tables.road(batch.road_codes)
        H0 = self.tables.image(batch.image_codes, self.pixels.to(P0.dtype))
        P = self.road_encoder(P0, batch.road_pad)
        H = self.image_encoder(H0, batch.image_pad)
        return P0, H0, P, H

    def fused(self, batch: Batch, P0, H0, P, H):
        variant = self.cfg.variant
        if variant == "no_fusion":
            return pool(H, ~batch.image_pad), pool(P, ~batch.road_pad)
        U, Q = residual_concat(P0, H, P, H0)
        if variant == "no_gcn":
            U_hat = self.cross_u(U, batch.is_road, batch.valid)
            Q_hat = self.cross_q(Q, batch.is_road, batch.valid)
        else:
            A_hat = normalize_adjacency(batch.a_tilde.to(U.dtype))
            U_hat = gcn(U, None, self.fuse.w1, self.fuse.w2, A_hat=A_hat)
            Q_hat = gcn(Q, None, self.fuse.w3, self.fuse.w4, A_hat=A_hat)
        return pool(U_hat, batch.valid), pool(Q_hat, batch.valid)

    def losses(self, batch: Batch, negatives: np.ndarray | None) -> dict[str, torch.Tensor]:
        cfg = self.cfg.effective()
        P0, H0, P, H = self.encode_batch(batch)
        B = batch.size
        out = {
            "l_mask": mnm_loss_batch(P, batch.mask_b, batch.mask_pos, batch.mask_tgt, self.mnm_head, B),
            "l_fine": cosine_distance_sum(P, H, batch.fine_b, batch.fine_road, batch.fine_image, B),
            "l_medium": cosine_distance_sum(P, H, batch.sep_b, batch.sep_road, batch.sep_image, B),
            "l_coarse": coarse_loss(P[:, 0], H[:, 0], self.align.sigma),
        }
        y, z = self.fused(batch, P0, H0, P, H)
        if negatives is None:
            out["l_fuse"] = (y.sum() + z.sum()) * 0.0
        else:
            neg = torch.from_numpy(np.asarray(negatives, dtype=np.int64))
            out["l_fuse"] = fuse_loss(y, z, y[neg], z[neg], cfg.beta)
        multi = sum(out[k] for k, flag in (("l_fine", "no_fine"), ("l_medium", "no_medium"),
                                           ("l_coarse", "no_coarse")) if cfg.variant != flag)
        out["total"] = cfg.lambda_mask * out["l_mask"] + cfg.lambda_multi * multi + cfg.lambda_fuse * out["l_fuse"]
        return out

    def embed(self, batch: Batch) -> torch.Tensor:
        P0, H0, P, H = self.encode_batch(batch)
        y, z = self.fused(batch, P0, H0, P, H)
        if self.cfg.variant == "y_only":
            return y
        if self.cfg.variant == "z_only":
            return z
        return path_embedding(y, z)

    def predict(self, batch: Batch) -> torch.Tensor:
        return self.head(self.embed(batch))


def build_model(cfg: TrainConfig, vocab_size: int, bank: PatchBank, seed_value: int) -> MMPath:
    torch.manual_seed(seed_value)
    model = MMPath(cfg, vocab_size, bank.feature_dim)
    model.tables.apply_init(cfg.node_init, cfg.patch_init)
    model.set_pixels(bank)
    return model


__all__ = ["Batch", "MMPath", "PreparedPath", "TaskHead", "build_model", "build_vocab", "collate",
           "prepare_path", "prepare_world", "resolve_patch_side", "sample_mask_positions"]
