"""Road networks, tile grids, paths and their image-path decomposition.

Coordinates are planar meters (x east, y north). Tiles and patches use
half-open squares so every point belongs to exactly one tile and one patch.
Raster row 0 and patch-lattice row 0 are the southern edge of a tile.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path as FsPath

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import Delaunay

from .errors import ConfigError, DomainError
from .rng import substream

TileId = tuple[int, int]


@dataclass(frozen=True)
class RoadNetwork:
    nodes: dict[int, tuple[float, float]]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for u, v in self.edges:
            if u == v:
                raise ConfigError(f"self-loop edge at node {u}")
            if u not in self.nodes or v not in self.nodes:
                raise ConfigError(f"edge ({u}, {v}) references an unknown node")

    @cached_property
    def adjacency(self) -> dict[int, tuple[int, ...]]:
        adj: dict[int, set[int]] = {n: set() for n in self.nodes}
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        return {n: tuple(sorted(s)) for n, s in adj.items()}

    @cached_property
    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset((min(u, v), max(u, v)) for u, v in self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edge_set

    def xy(self, node: int) -> tuple[float, float]:
        return self.nodes[node]


@dataclass(frozen=True)
class RoadPath:
    path_id: int
    nodes: tuple[int, ...]

    def validate(self, network: RoadNetwork) -> None:
        if len(self.nodes) < 2:
            raise ConfigError(f"path {self.path_id} has fewer than 2 nodes")
        for a, b in zip(self.nodes, self.nodes[1:]):
            if not network.has_edge(a, b):
                raise ConfigError(f"path {self.path_id}: ({a}, {b}) is not an edge")

    def length_m(self, network: RoadNetwork) -> float:
        total = 0.0
        for a, b in zip(self.nodes, self.nodes[1:]):
            (xa, ya), (xb, yb) = network.xy(a), network.xy(b)
            total += math.hypot(xb - xa, yb - ya)
        return total


@dataclass(frozen=True)
class TileGrid:
    cols: int
    rows: int
    origin: tuple[float, float] = (0.0, 0.0)
    meters_per_pixel: float = 2.0
    r: int = 500
    c: int = 3

    @property
    def tile_side(self) -> float:
        return self.r * self.meters_per_pixel

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, y0, x0 + self.cols * self.tile_side, y0 + self.rows * self.tile_side

    def tiles(self) -> list[TileId]:
        return [(i, j) for j in range(self.rows) for i in range(self.cols)]


@dataclass(frozen=True)
class ImagePath:
    path_id: int
    tiles: tuple[TileId, ...]
    # half-open [start, end) spans into the road path, one per tile entry
    sub_paths: tuple[tuple[int, int], ...]


@dataclass
class LabelSet:
    travel_time: dict[int, float] = field(default_factory=dict)
    ranking_score: dict[int, float] = field(default_factory=dict)

    def values(self, task: str, path_ids) -> np.ndarray:
        table = {"travel_time": self.travel_time, "ranking": self.ranking_score}.get(task)
        if table is None:
            raise ConfigError(f"unknown task {task!r}")
        return np.array([table[p] for p in path_ids], dtype=np.float64)


@dataclass(frozen=True)
class WorldConfig:
    cols: int = 3
    rows: int = 3
    r: int = 32
    meters_per_pixel: float = 31.25
    c: int = 3
    patch_side: int = 8
    n_nodes: int = 120
    edge_length: float = 250.0
    n_paths: int = 32
    min_path_nodes: int = 6
    max_path_nodes: int = 14

    @property
    def grid(self) -> TileGrid:
        return TileGrid(cols=self.cols, rows=self.rows, meters_per_pixel=self.meters_per_pixel,
                        r=self.r, c=self.c)


PRESETS: dict[str, WorldConfig] = {
    "tiny": WorldConfig(),
    # 4x4 tiles, 2x2 patch lattice, short paths: graph-rule enumeration world
    "lattice": WorldConfig(cols=4, rows=4, r=16, meters_per_pixel=62.5, patch_side=8,
                           n_nodes=14, edge_length=700.0, n_paths=8,
                           min_path_nodes=2, max_path_nodes=8),
    "small": WorldConfig(cols=5, rows=5, n_nodes=320, n_paths=256, max_path_nodes=20),
}


@dataclass
class World:
    config: WorldConfig
    seed: int
    network: RoadNetwork
    grid: TileGrid
    rasters: dict[TileId, np.ndarray]
    paths: tuple[RoadPath, ...]
    labels: LabelSet | None = None

    def path(self, path_id: int) -> RoadPath:
        for p in self.paths:
            if p.path_id == path_id:
                return p
        raise KeyError(f"no path with id {path_id}")

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return (
            self.config == other.config
            and self.seed == other.seed
            and self.network == other.network
            and self.grid == other.grid
            and self.paths == other.paths
            and self.labels == other.labels
            and self.rasters.keys() == other.rasters.keys()
            and all(np.array_equal(self.rasters[k], other.rasters[k]) for k in self.rasters)
        )


def locate_tile(grid: TileGrid, point) -> TileId:
    x, y = float(point[0]), float(point[1])
    x0, y0 = grid.origin
    s = grid.tile_side
    i = math.floor((x - x0) / s)
    j = math.floor((y - y0) / s)
    if not (0 <= i < grid.cols and 0 <= j < grid.rows):
        raise DomainError(f"point ({x}, {y}) lies outside the tile grid extent {grid.extent}")
    return (i, j)


def patches_per_side(grid: TileGrid, o: int) -> int:
    if o <= 0 or grid.r % o:
        raise ConfigError(f"tile side r={grid.r} is not divisible by patch side o={o}")
    return grid.r // o


def locate_patch(grid: TileGrid, o: int, point) -> tuple[TileId, int]:
    """Return the tile and the 1-based row-major patch index containing ``point``."""
    side = patches_per_side(grid, o)
    tile = locate_tile(grid, point)
    x0, y0 = grid.origin
    s = grid.tile_side
    pm = o * grid.meters_per_pixel
    col = math.floor((float(point[0]) - x0 - tile[0] * s) / pm)
    row = math.floor((float(point[1]) - y0 - tile[1] * s) / pm)
    col = min(max(col, 0), side - 1)
    row = min(max(row, 0), side - 1)
    return tile, row * side + col + 1


def derive_image_path(path: RoadPath, network: RoadNetwork, grid: TileGrid) -> ImagePath:
    tiles: list[TileId] = []
    spans: list[tuple[int, int]] = []
    start = 0
    prev = None
    for idx, node in enumerate(path.nodes):
        t = locate_tile(grid, network.xy(node))
        if prev is not None and t != prev:
            tiles.append(prev)
            spans.append((start, idx))
            start = idx
        prev = t
    tiles.append(prev)
    spans.append((start, len(path.nodes)))
    return ImagePath(path.path_id, tuple(tiles), tuple(spans))


# ---------------------------------------------------------------- generator

def _place_nodes(seed: int, cfg: WorldConfig, grid: TileGrid) -> np.ndarray:
    rng = substream(seed, "nodes")
    x0, y0, x1, y1 = grid.extent
    margin = 0.01 * grid.tile_side
    min_dist = 0.5 * cfg.edge_length
    pts: list[np.ndarray] = []
    for _ in range(200 * cfg.n_nodes):
        if len(pts) == cfg.n_nodes:
            break
        p = np.array([rng.uniform(x0 + margin, x1 - margin), rng.uniform(y0 + margin, y1 - margin)])
        if pts and np.min(np.hypot(*(np.asarray(pts) - p).T)) < min_dist:
            continue
        pts.append(p)
    if len(pts) < cfg.n_nodes:
        raise ConfigError(
            f"could only place {len(pts)} of {cfg.n_nodes} nodes at spacing {min_dist} m; "
            "reduce n_nodes or edge_length"
        )
    return np.asarray(pts)


def _connect(xy: np.ndarray, edge_length: float) -> list[tuple[int, int]]:
    n = len(xy)
    if n < 4:
        cand = {(a, b) for a in range(n) for b in range(a + 1, n)}
    else:
        tri = Delaunay(xy)
        cand = set()
        for simplex in tri.simplices:
            for a in range(3):
                u, v = sorted((int(simplex[a]), int(simplex[(a + 1) % 3])))
                cand.add((u, v))
    cand = sorted(cand)
    lengths = np.array([np.hypot(*(xy[u] - xy[v])) for u, v in cand])
    m = coo_matrix((lengths, ([u for u, _ in cand], [v for _, v in cand])), shape=(n, n))
    mst = minimum_spanning_tree(m).tocoo()
    keep = {(min(int(u), int(v)), max(int(u), int(v))) for u, v in zip(mst.row, mst.col)}
    keep |= {e for e, ln in zip(cand, lengths) if ln <= 1.5 * edge_length}
    return sorted(keep)


def _walk(rng: np.random.Generator, network: RoadNetwork, target: int, min_nodes: int):
    ids = sorted(network.nodes)
    node = ids[int(rng.integers(len(ids)))]
    heading = rng.uniform(0, 2 * math.pi)
    walk = [node]
    seen = {node}
    while len(walk) < target:
        options = [n for n in network.adjacency[node] if n not in seen]
        if not options:
            break
        x, y = network.xy(node)
        angles = np.array([math.atan2(network.xy(n)[1] - y, network.xy(n)[0] - x) for n in options])
        w = np.exp(2.0 * np.cos(angles - heading))
        node = options[int(rng.choice(len(options), p=w / w.sum()))]
        heading += rng.normal(0.0, 0.3)
        walk.append(node)
        seen.add(node)
    return walk if len(walk) >= min_nodes else None


def _segments(network: RoadNetwork, step: float) -> np.ndarray:
    chunks = []
    for u, v in network.edges:
        a, b = np.array(network.xy(u)), np.array(network.xy(v))
        k = max(2, int(np.hypot(*(b - a)) / step) + 1)
        t = np.linspace(0.0, 1.0, k)[:, None]
        chunks.append(a + t * (b - a))
    return np.concatenate(chunks) if chunks else np.zeros((0, 2))


_CLASS_COLORS = np.array([
    [40, 80, 160],   # water
    [40, 120, 50],   # forest
    [150, 150, 150],  # urban
    [190, 170, 90],  # farmland
], dtype=np.float64)


def _tile_raster(seed: int, grid: TileGrid, tile: TileId, road_pts: np.ndarray) -> np.ndarray:
    rng = substream(seed, "raster", tile[0], tile[1])
    r, c = grid.r, grid.c
    cls = int(rng.integers(len(_CLASS_COLORS)))
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)
    base = np.resize(_CLASS_COLORS[cls], c)
    phase = rng.uniform(0, 2 * math.pi)
    if cls == 0:
        pattern = 10 * np.sin(xx / 3.0 + phase)
    elif cls == 1:
        pattern = 25 * (rng.random((r, r)) - 0.5)
    elif cls == 2:
        pattern = 30 * (((xx // 4) + (yy // 4)) % 2) - 15
    else:
        theta = rng.uniform(0, math.pi)
        pattern = 20 * np.sign(np.sin((xx * math.cos(theta) + yy * math.sin(theta)) / 2.0 + phase))
    img = base[None, None, :] + pattern[:, :, None] + rng.normal(0.0, 6.0, (r, r, c))
    x0, y0 = grid.origin
    s = grid.tile_side
    px = np.floor((road_pts[:, 0] - x0 - tile[0] * s) / grid.meters_per_pixel).astype(int)
    py = np.floor((road_pts[:, 1] - y0 - tile[1] * s) / grid.meters_per_pixel).astype(int)
    inside = (px >= 0) & (px < r) & (py >= 0) & (py < r)
    img[py[inside], px[inside], :] = 25.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_world(seed: int, cfg: WorldConfig | None = None) -> World:
    cfg = cfg or WorldConfig()
    if cfg.n_nodes < 2:
        raise ConfigError("a world needs at least 2 nodes")
    if cfg.n_paths < 1:
        raise ConfigError("n_paths must be positive")
    if not 2 <= cfg.min_path_nodes <= cfg.max_path_nodes:
        raise ConfigError("path length range must satisfy 2 <= min <= max")
    if cfg.cols < 1 or cfg.rows < 1 or cfg.edge_length <= 0:
        raise ConfigError("grid dimensions and edge length must be positive")
    grid = cfg.grid
    patches_per_side(grid, cfg.patch_side)

    xy = _place_nodes(seed, cfg, grid)
    nodes = {i: (float(x), float(y)) for i, (x, y) in enumerate(xy)}
    network = RoadNetwork(nodes=nodes, edges=tuple(_connect(xy, cfg.edge_length)))

    paths = []
    for pid in range(cfg.n_paths):
        rng = substream(seed, "path", pid)
        walk = None
        for _ in range(500):
            target = int(rng.integers(cfg.min_path_nodes, cfg.max_path_nodes + 1))
            walk = _walk(rng, network, target, cfg.min_path_nodes)
            if walk is not None:
                break
        if walk is None:
            raise ConfigError(f"could not generate path {pid} with >= {cfg.min_path_nodes} nodes")
        paths.append(RoadPath(pid, tuple(walk)))

    road_pts = _segments(network, 0.5 * grid.meters_per_pixel)
    rasters = {t: _tile_raster(seed, grid, t, road_pts) for t in grid.tiles()}
    return World(cfg, seed, network, grid, rasters, tuple(paths))


def synth_labels(world: World, seed: int, noise_level: float = 0.0,
                 delay_scale: float = 2.0) -> LabelSet:
    """Travel time = a * length + per-node delays + N(0, noise_level); ranking from detour ratio."""
    rng = substream(seed, "labels")
    a = 1.0 / rng.uniform(8.0, 14.0)
    ids = sorted(world.network.nodes)
    delays = dict(zip(ids, rng.uniform(0.0, delay_scale, len(ids)))) if delay_scale > 0 else {}
    noise = substream(seed, "label-noise").normal(0.0, 1.0, len(world.paths))

    labels = LabelSet()
    ratios = {}
    for p, eps in zip(world.paths, noise):
        length = p.length_m(world.network)
        t = a * length + sum(delays.get(n, 0.0) for n in p.nodes) + noise_level * eps
        labels.travel_time[p.path_id] = max(float(t), 1e-3)
        (xa, ya), (xb, yb) = world.network.xy(p.nodes[0]), world.network.xy(p.nodes[-1])
        ratios[p.path_id] = length / max(math.hypot(xb - xa, yb - ya), 1e-9)
    lo, hi = min(ratios.values()), max(ratios.values())
    for pid, d in ratios.items():
        score = 1.0 if hi == lo else (hi - d) / (hi - lo)
        labels.ranking_score[pid] = float(min(max(score, 0.0), 1.0))
    return labels


# ---------------------------------------------------------------------- I/O

def _raster_name(tile: TileId) -> str:
    return f"rasters/tile_{tile[0]}_{tile[1]}.u8"


def save_world(world: World, directory) -> None:
    d = FsPath(directory)
    (d / "rasters").mkdir(parents=True, exist_ok=True)
    with open(d / "network.jsonl", "w") as fh:
        for nid in sorted(world.network.nodes):
            x, y = world.network.nodes[nid]
            fh.write(json.dumps({"kind": "node", "id": nid, "x": x, "y": y}) + "\n")
        for u, v in world.network.edges:
            fh.write(json.dumps({"kind": "edge", "u": u, "v": v}) + "\n")
    g = world.grid
    manifest = {
        "origin": list(g.origin), "meters_per_pixel": g.meters_per_pixel, "r": g.r, "c": g.c,
        "cols": g.cols, "rows": g.rows,
        "tiles": [{"col": t[0], "row": t[1], "file": _raster_name(t)} for t in sorted(world.rasters)],
    }
    (d / "tiles.json").write_text(json.dumps(manifest, indent=1) + "\n")
    for t, arr in sorted(world.rasters.items()):
        (d / _raster_name(t)).write_bytes(np.ascontiguousarray(arr, dtype="<u1").tobytes())
    with open(d / "paths.jsonl", "w") as fh:
        for p in world.paths:
            fh.write(json.dumps({"path_id": p.path_id, "nodes": list(p.nodes)}) + "\n")
    (d / "world.json").write_text(json.dumps({"seed": world.seed, "config": asdict(world.config)},
                                             indent=1) + "\n")
    if world.labels is not None:
        write_labels(world.labels, d / "labels.csv")


def write_labels(labels: LabelSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "travel_time_s", "ranking_score"])
        for pid in sorted(labels.travel_time):
            w.writerow([pid, repr(labels.travel_time[pid]), repr(labels.ranking_score[pid])])


def read_labels(path) -> LabelSet:
    labels = LabelSet()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid = int(row["path_id"])
            labels.travel_time[pid] = float(row["travel_time_s"])
            labels.ranking_score[pid] = float(row["ranking_score"])
    return labels


def load_world(directory) -> World:
    d = FsPath(directory)
    nodes, edges = {}, []
    with open(d / "network.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["kind"] == "node":
                nodes[int(rec["id"])] = (float(rec["x"]), float(rec["y"]))
            elif rec["kind"] == "edge":
                edges.append((int(rec["u"]), int(rec["v"])))
            else:
                raise ConfigError(f"unknown network record kind {rec['kind']!r}")
    network = RoadNetwork(nodes, tuple(edges))
    m = json.loads((d / "tiles.json").read_text())
    grid = TileGrid(cols=int(m["cols"]), rows=int(m["rows"]), origin=tuple(float(v) for v in m["origin"]),
                    meters_per_pixel=float(m["meters_per_pixel"]), r=int(m["r"]), c=int(m["c"]))
    rasters = {}
    for t in m["tiles"]:
        raw = np.frombuffer((d / t["file"]).read_bytes(), dtype="<u1")
        if raw.size != grid.r * grid.r * grid.c:
            raise ConfigError(f"raster {t['file']} has {raw.size} bytes, expected {grid.r ** 2 * grid.c}")
        rasters[(int(t["col"]), int(t["row"]))] = raw.reshape(grid.r, grid.r, grid.c).copy()
    paths = []
    with open(d / "paths.jsonl") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                paths.append(RoadPath(int(rec["path_id"]), tuple(int(n) for n in rec["nodes"])))
    meta_file = d / "world.json"
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        cfg, seed = WorldConfig(**meta["config"]), int(meta["seed"])
    else:
        cfg = WorldConfig(cols=grid.cols, rows=grid.rows, r=grid.r, meters_per_pixel=grid.meters_per_pixel,
                          c=grid.c, n_nodes=len(nodes), n_paths=len(paths))
        seed = 0
    labels = read_labels(d / "labels.csv") if (d / "labels.csv").exists() else None
    for p in paths:
        p.validate(network)
    return World(cfg, seed, network, grid, rasters, tuple(paths), labels)
