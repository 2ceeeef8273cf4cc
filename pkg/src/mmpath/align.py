"""Fine, medium and coarse alignment losses between road and image encodings."""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConsistencyError
from .tokenize import Correspondence

EPS = 1e-12


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    return (a * b).sum(-1) / (na * nb + EPS)


def cosine_distance_sum(P: torch.Tensor, H: torch.Tensor, batch_idx: torch.Tensor, road_pos: torch.Tensor,
                        image_pos: torch.Tensor, batch_size: int) -> torch.Tensor:
    """Sum of (1 - cos) over index-aligned pairs, divided by ``batch_size``."""
    if road_pos.numel() == 0:
        return (P.sum() + H.sum()) * 0.0
    cos = cosine(P[batch_idx, road_pos], H[batch_idx, image_pos])
    return (1.0 - cos).sum() / batch_size


def fine_loss(P: torch.Tensor, H: torch.Tensor, corr: Correspondence) -> torch.Tensor:
    if not corr.node_pairs:
        raise ConsistencyError("fine alignment needs at least one node/patch pair")
    rp, ip = zip(*corr.node_pairs)
    rp, ip = torch.tensor(rp), torch.tensor(ip)
    return cosine_distance_sum(P[None], H[None], torch.zeros_like(rp), rp, ip, 1)


def medium_loss(road_sep_rows: torch.Tensor, image_sep_rows: torch.Tensor) -> torch.Tensor:
    if road_sep_rows.shape != image_sep_rows.shape:
        raise ConsistencyError(
            f"{road_sep_rows.shape[0]} road sep rows vs {image_sep_rows.shape[0]} image sep rows"
        )
    return (1.0 - cosine(road_sep_rows, image_sep_rows)).sum()


def coarse_loss(p_cls: torch.Tensor, h_cls: torch.Tensor, sigma: torch.Tensor | float) -> torch.Tensor:
    """Symmetric contrastive loss over a batch of matched (road, image) cls rows.

    Similarity is the negated Euclidean distance scaled by 1/sigma; each
    denominator runs over all batch candidates including the matched one.
    """
    dist = torch.linalg.vector_norm(p_cls[:, None, :] - h_cls[None, :, :], dim=-1)
    logits = -dist / sigma
    road_to_image = torch.log_softmax(logits, dim=1).diagonal()
    image_to_road = torch.log_softmax(logits, dim=0).diagonal()
    return -(road_to_image + image_to_road).sum() / p_cls.shape[0]


def multi_loss(fine, medium, coarse):
    return fine + medium + coarse


class Temperature(nn.Module):
    """Learned positive temperature stored as ``sigma_log``."""

    def __init__(self, sigma_init: float = 0.1):
        super().__init__()
        self.sigma_log = nn.Parameter(torch.tensor(math.log(sigma_init)))

    @property
    def sigma(self) -> torch.Tensor:
        return self.sigma_log.exp()
