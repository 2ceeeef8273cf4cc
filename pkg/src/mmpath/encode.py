"""Road/image transformer encoders and the masked node modeling objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .tokenize import MASK, NODE, RoadTokenSeq, Token


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        if d % heads:
            raise ConfigError(f"embedding width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        # zeroed padded values + -inf scores keep padded rows out of every real output
        v = v.masked_fill(pad[:, None, :, None], 0.0)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


class EncoderLayer(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads, dropout)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Linear(ffn, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad):
        x = x + self.drop(self.attn(self.norm1(x), pad))
        return x + self.drop(self.ffn(self.norm2(x)))


class EncoderStack(nn.Module):
    def __init__(self, d: int = 64, layers: int = 5, heads: int = 4, ffn: int | None = None,
                 dropout: float = 0.1):
        super().__init__()
        if d % heads:
            raise ConfigError(f"embedding width {d} is not divisible by {heads} heads")
        self.d = d
        self.layers = nn.ModuleList(EncoderLayer(d, heads, ffn or 4 * d, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d) if layers else nn.Identity()

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
            pad = None if pad is None else pad.unsqueeze(0)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected width {self.d}, got input of shape {tuple(x.shape)}")
        if pad is None:
            pad = torch.zeros(x.shape[:2], dtype=torch.bool, device=x.device)
        if pad.shape != x.shape[:2]:
            raise ValueError(f"pad mask shape {tuple(pad.shape)} does not match input {tuple(x.shape)}")
        for layer in self.layers:
            x = layer(x, pad)
        x = self.norm(x)
        return x.squeeze(0) if squeeze else x


def encode(stack: EncoderStack, X: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    return stack(X, pad_mask)


# ----------------------------------------------------------------- masking

@dataclass(frozen=True)
class MaskPlan:
    positions: tuple[int, ...]
    originals: tuple[int, ...]


def mask_count(node_count: int, ratio: float) -> int:
    if ratio <= 0 or node_count == 0:
        return 0
    return min(node_count, max(1, math.floor(ratio * node_count + 0.5)))


def plan_mask(seq: RoadTokenSeq, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0 <= ratio < 1:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    node_pos = [i for i, t in enumerate(seq.tokens) if t.kind == NODE]
    m = mask_count(len(node_pos), ratio)
    if m == 0:
        return MaskPlan((), ())
    chosen = sorted(int(node_pos[i]) for i in rng.choice(len(node_pos), size=m, replace=False))
    return MaskPlan(tuple(chosen), tuple(seq.tokens[p].node for p in chosen))


def apply_mask(seq: RoadTokenSeq, plan: MaskPlan) -> RoadTokenSeq:
    tokens = list(seq.tokens)
    for p in plan.positions:
        tokens[p] = Token(MASK)
    return RoadTokenSeq(seq.path_id, tuple(tokens), seq.sub_path_count)


class NodeClassifier(nn.Linear):
    """Affine map from encoded width to node-vocabulary logits."""

    def __init__(self, d: int, vocab_size: int):
        super().__init__(d, vocab_size)


def mnm_loss_batch(P: torch.Tensor, batch_idx: torch.Tensor, positions: torch.Tensor,
                   targets: torch.Tensor, clf: nn.Module, batch_size: int) -> torch.Tensor:
    """Sum of -log p(true node) per path, averaged over ``batch_size`` paths.

    P is (B, n, d); targets are vocabulary indices.
    """
    if positions.numel() == 0:
        return P.sum() * 0.0
    logits = clf(P[batch_idx, positions])
    return F.cross_entropy(logits, targets, reduction="sum") / batch_size


def mnm_loss(P: torch.Tensor, plan: MaskPlan, clf: nn.Module, vocab: dict[int, int]) -> torch.Tensor:
    pos = torch.tensor(plan.positions, dtype=torch.long)
    tgt = torch.tensor([vocab[n] for n in plan.originals], dtype=torch.long)
    return mnm_loss_batch(P.unsqueeze(0), torch.zeros_like(pos), pos, tgt, clf, 1)
