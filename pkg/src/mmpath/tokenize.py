"""Token sequences for road paths and image paths, and their initial embeddings.

Road layout:  [cls, v1, v2, v3, sep, v4, ..., sep]   (one sep per sub-path)
Image layout: [cls, m1(1) .. m1(g), sep, m2(1) .. m2(g), sep, ...]
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ConsistencyError, VocabularyError
from .world import ImagePath, RoadNetwork, RoadPath, TileGrid, locate_patch, patches_per_side

CLS, SEP, MASK, NODE, PATCH = "cls", "sep", "mask", "node", "patch"

# integer codes used by batched lookups; real tokens start at N_SPECIAL
PAD_CODE, CLS_CODE, SEP_CODE, MASK_CODE = 0, 1, 2, 3
N_SPECIAL = 4


class Token(NamedTuple):
    kind: str
    node: int | None = None
    tile: tuple[int, int] | None = None
    k: int | None = None


@dataclass(frozen=True)
class RoadTokenSeq:
    path_id: int
    tokens: tuple[Token, ...]
    sub_path_count: int

    def __len__(self):
        return len(self.tokens)

    @property
    def node_positions(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tokens) if t.kind in (NODE, MASK))

    @property
    def sep_positions(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tokens) if t.kind == SEP)


@dataclass(frozen=True)
class ImageTokenSeq:
    path_id: int
    tokens: tuple[Token, ...]
    patches_per_image: int

    def __len__(self):
        return len(self.tokens)

    @property
    def sep_positions(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tokens) if t.kind == SEP)


@dataclass(frozen=True)
class Correspondence:
    node_pairs: tuple[tuple[int, int], ...]  # (road NODE position, image PATCH position)
    sep_pairs: tuple[tuple[int, int], ...]
    cls_pair: tuple[int, int] = (0, 0)


def tokenize_road(path: RoadPath, image_path: ImagePath) -> RoadTokenSeq:
    if path.path_id != image_path.path_id:
        raise ConsistencyError(f"road path {path.path_id} paired with image path {image_path.path_id}")
    tokens = [Token(CLS)]
    expected = 0
    for start, end in image_path.sub_paths:
        if start != expected or end <= start:
            raise ConsistencyError(f"sub-path spans of path {path.path_id} do not partition the path")
        tokens.extend(Token(NODE, node=n) for n in path.nodes[start:end])
        tokens.append(Token(SEP))
        expected = end
    if expected != len(path.nodes):
        raise ConsistencyError(f"sub-path spans of path {path.path_id} do not cover the path")
    return RoadTokenSeq(path.path_id, tuple(tokens), len(image_path.sub_paths))


def tokenize_image(image_path: ImagePath, grid: TileGrid, o: int) -> ImageTokenSeq:
    g = patches_per_side(grid, o) ** 2
    tokens = [Token(CLS)]
    for tile in image_path.tiles:
        tokens.extend(Token(PATCH, tile=tile, k=k) for k in range(1, g + 1))
        tokens.append(Token(SEP))
    return ImageTokenSeq(image_path.path_id, tuple(tokens), g)


def build_correspondence(road_seq: RoadTokenSeq, image_seq: ImageTokenSeq, path: RoadPath,
                         network: RoadNetwork, grid: TileGrid, o: int) -> Correspondence:
    if not road_seq.path_id == image_seq.path_id == path.path_id:
        raise ConsistencyError("sequences and path come from different path ids")
    g = image_seq.patches_per_image
    pairs = []
    visit = 0
    node_idx = 0
    for pos, tok in enumerate(road_seq.tokens):
        if tok.kind == SEP:
            visit += 1
        elif tok.kind in (NODE, MASK):
            node = path.nodes[node_idx]
            node_idx += 1
            tile, k = locate_patch(grid, o, network.xy(node))
            image_pos = 1 + visit * (g + 1) + (k - 1)
            if image_pos >= len(image_seq) or image_seq.tokens[image_pos] != Token(PATCH, tile=tile, k=k):
                raise ConsistencyError(
                    f"node {node} of path {path.path_id} maps to tile {tile} patch {k}, "
                    "which is not present at the matching image-path visit"
                )
            pairs.append((pos, image_pos))
    road_seps, image_seps = road_seq.sep_positions, image_seq.sep_positions
    if len(road_seps) != len(image_seps):
        raise ConsistencyError(f"{len(road_seps)} road seps vs {len(image_seps)} image seps")
    return Correspondence(tuple(pairs), tuple(zip(road_seps, image_seps)))


# ------------------------------------------------------------- vocab / init

def build_vocab(network: RoadNetwork) -> dict[int, int]:
    return {nid: i for i, nid in enumerate(sorted(network.nodes))}


def save_vocab(vocab: dict[int, int], path) -> None:
    Path(path).write_text(json.dumps({str(k): v for k, v in sorted(vocab.items())}, indent=0) + "\n")


def load_vocab(path) -> dict[int, int]:
    return {int(k): int(v) for k, v in json.loads(Path(path).read_text()).items()}


def road_codes(seq: RoadTokenSeq, vocab: dict[int, int]) -> np.ndarray:
    codes = np.empty(len(seq), dtype=np.int64)
    for i, t in enumerate(seq.tokens):
        if t.kind == NODE:
            if t.node not in vocab:
                raise VocabularyError(f"node {t.node} is not in the vocabulary")
            codes[i] = N_SPECIAL + vocab[t.node]
        else:
            codes[i] = {CLS: CLS_CODE, SEP: SEP_CODE, MASK: MASK_CODE}[t.kind]
    return codes


def channel_stats(rasters: dict, c: int) -> np.ndarray:
    """Per-channel (mean, std) of raster values scaled to [0, 1]; shape (2, c)."""
    if not rasters:
        return np.stack([np.zeros(c), np.ones(c)]).astype(np.float32)
    allpix = np.concatenate([np.asarray(a, np.float64).reshape(-1, c) for a in rasters.values()]) / 255.0
    std = allpix.std(0)
    return np.stack([allpix.mean(0), np.where(std > 0, std, 1.0)]).astype(np.float32)


class PatchBank:
    """Flattened o*o*c pixel vectors for every (tile, k), standardized per channel.

    ``stats`` is the (2, c) mean/std array; computed from ``rasters`` when omitted.
    """

    def __init__(self, rasters: dict, grid: TileGrid, o: int, stats: np.ndarray | None = None):
        side = patches_per_side(grid, o)
        self.o, self.side, self.g = o, side, side * side
        self.tiles = sorted(rasters)
        self.tile_index = {t: i for i, t in enumerate(self.tiles)}
        self.stats = channel_stats(rasters, grid.c) if stats is None else np.asarray(stats, np.float32)
        blocks = []
        for t in self.tiles:
            arr = (np.asarray(rasters[t], dtype=np.float32) / 255.0 - self.stats[0]) / self.stats[1]
            # (side, o, side, o, c) -> (row, col, o, o, c), row-major over (row, col)
            lat = arr.reshape(side, o, side, o, grid.c).transpose(0, 2, 1, 3, 4)
            blocks.append(lat.reshape(self.g, o * o * grid.c))
        self.pixels = np.concatenate(blocks) if blocks else np.zeros((0, o * o * grid.c), np.float32)

    @property
    def feature_dim(self) -> int:
        return self.pixels.shape[1]

    def index(self, tile, k: int) -> int:
        if tile not in self.tile_index:
            raise ConfigError(f"no raster available for tile {tile}")
        return self.tile_index[tile] * self.g + (k - 1)


def image_codes(seq: ImageTokenSeq, bank: PatchBank) -> np.ndarray:
    codes = np.empty(len(seq), dtype=np.int64)
    for i, t in enumerate(seq.tokens):
        if t.kind == PATCH:
            codes[i] = N_SPECIAL + bank.index(t.tile, t.k)
        else:
            codes[i] = {CLS: CLS_CODE, SEP: SEP_CODE, MASK: MASK_CODE}[t.kind]
    return codes


def read_f32(path) -> np.ndarray:
    """Raw little-endian f32 array with a ``<path>.json`` sidecar holding ``{"shape": [...]}``."""
    shape = json.loads(Path(str(path) + ".json").read_text())["shape"]
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def write_f32(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"shape": list(arr.shape)}) + "\n")


class EmbeddingTables(nn.Module):
    def __init__(self, vocab_size: int, patch_dim: int, d: int, max_road_len: int, max_image_len: int):
        super().__init__()
        self.node = nn.Parameter(torch.randn(vocab_size, d) * 0.02)
        self.patch_proj = nn.Linear(patch_dim, d)
        # rows: pad (fixed zero), cls, sep, mask
        self.road_special = nn.Parameter(torch.randn(3, d) * 0.02)
        self.image_special = nn.Parameter(torch.randn(3, d) * 0.02)
        self.pos_road = nn.Parameter(torch.randn(max_road_len, d) * 0.02)
        self.pos_image = nn.Parameter(torch.randn(max_image_len, d) * 0.02)

    def apply_init(self, node_init: str = "random", patch_init: str = "random") -> None:
        with torch.no_grad():
            if node_init.startswith("file:"):
                arr = torch.from_numpy(read_f32(node_init[5:]))
                if tuple(arr.shape) != tuple(self.node.shape):
                    raise ConfigError(f"node init shape {tuple(arr.shape)} != {tuple(self.node.shape)}")
                self.node.copy_(arr)
            elif node_init != "random":
                raise ConfigError(f"unknown node_init {node_init!r}")
            if patch_init.startswith("file:"):
                arr = torch.from_numpy(read_f32(patch_init[5:]))
                fan_in, d = self.patch_proj.in_features, self.patch_proj.out_features
                if tuple(arr.shape) == (fan_in, d):
                    self.patch_proj.weight.copy_(arr.T)
                elif tuple(arr.shape) == (fan_in + 1, d):
                    self.patch_proj.weight.copy_(arr[:-1].T)
                    self.patch_proj.bias.copy_(arr[-1])
                else:
                    raise ConfigError(f"patch init shape {tuple(arr.shape)} fits neither ({fan_in}, {d}) "
                                      f"nor ({fan_in + 1}, {d})")
            elif patch_init != "random":
                raise ConfigError(f"unknown patch_init {patch_init!r}")

    def _check_len(self, n: int, table: torch.Tensor, what: str):
        if n > table.shape[0]:
            raise ConfigError(f"{what} sequence of length {n} exceeds the position table ({table.shape[0]})")

    def road(self, codes: torch.Tensor) -> torch.Tensor:
        """codes: (..., n) integer road codes -> (..., n, d)."""
        self._check_len(codes.shape[-1], self.pos_road, "road")
        zero = self.road_special.new_zeros(1, self.road_special.shape[1])
        table = torch.cat([zero, self.road_special, self.node])
        return table[codes] + self.pos_road[: codes.shape[-1]]

    def image(self, codes: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        """codes: (..., n) image codes; pixels: (num_patches, o*o*c) bank."""
        self._check_len(codes.shape[-1], self.pos_image, "image")
        zero = self.image_special.new_zeros(1, self.image_special.shape[1])
        table = torch.cat([zero, self.image_special, self.patch_proj(pixels)])
        return table[codes] + self.pos_image[: codes.shape[-1]]


def initial_embeddings_road(seq: RoadTokenSeq, tables: EmbeddingTables, vocab: dict[int, int]) -> torch.Tensor:
    codes = torch.from_numpy(road_codes(seq, vocab))
    return tables.road(codes)


def initial_embeddings_image(seq: ImageTokenSeq, tables: EmbeddingTables, bank: PatchBank) -> torch.Tensor:
    codes = torch.from_numpy(image_codes(seq, bank))
    pixels = torch.from_numpy(bank.pixels).to(tables.pos_image.dtype)
    return tables.image(codes, pixels)
