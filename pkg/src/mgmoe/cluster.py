"""K-means (k-means++ init, Lloyd iterations) and the top-down granularity tree."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class ClusterError(ValueError):
    pass


@dataclass
class KMeansConfig:
    max_iters: int = 300
    restarts: int = 8
    seed: int = 0


@dataclass
class ClusterConfig:
    level_counts: list = field(default_factory=lambda: [1, 4, 8])
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)

    def __post_init__(self):
        lc = list(self.level_counts)
        if not lc or lc[0] != 1:
            raise ClusterError(f"level_counts must start with 1, got {lc}")
        for a, b in zip(lc, lc[1:]):
            if b <= a:
                raise ClusterError(f"level_counts must be strictly increasing, got {lc}")
        self.level_counts = lc


def sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum: ties go to the lowest index
    return np.argmin(sq_dists(points, centers), axis=1)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    idx = [int(rng.integers(n))]
    d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k; pick any not yet chosen
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(rest[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[idx].copy()


def _inertia(points, centers, labels):
    return float(((points - centers[labels]) ** 2).sum())


def _lloyd(points, centers, max_iters, history=None):
    """Lloyd iterations until the partition stops changing (or max_iters)."""
    k = len(centers)
    labels = nearest(points, centers)
    prev = _inertia(points, centers, labels)
    for _ in range(max_iters):
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        # empty clusters take the point farthest from its center
        for j in range(k):
            if not (labels == j).any():
                far = int(np.argmax(((points - new[labels]) ** 2).sum(axis=1)))
                new[j] = points[far]
                labels[far] = j
        centers = new
        old = labels
        labels = nearest(points, centers)
        cur = _inertia(points, centers, labels)
        if history is not None:
            history.append(cur)
        if cur > prev + 1e-9 * max(1.0, abs(prev)):
            raise AssertionError(f"k-means inertia increased: {prev} -> {cur}")
        if np.array_equal(labels, old):
            break
        prev = cur
    # settle centers on the final partition
    for j in range(k):
        members = labels == j
        if members.any():
            centers[j] = points[members].mean(axis=0)
    return centers, labels, _inertia(points, centers, labels)


def kmeans(points, k: int, seed: int = 0, max_iters: int = 300, restarts: int = 8,
           history: list | None = None):
    """Best-of-`restarts` Lloyd k-means; returns (centers, labels, inertia)."""
    X = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ClusterError(f"k must be >= 1, got {k}")
    if k > len(X):
        raise ClusterError(f"k={k} exceeds number of points {len(X)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        hist = [] if history is not None else None
        res = _lloyd(X, kmeans_pp_init(X, k, rng), max_iters, hist)
        if best is None or res[2] < best[0][2]:
            best = (res, hist)
    if history is not None:
        history.extend(best[1])
    return best[0]


def allocate_children(member_counts, total: int) -> list[int]:
    """Largest-remainder split of `total` children over parents, at least 1 each,
    never more than a parent's member count."""
    m = np.asarray(member_counts, dtype=np.float64)
    if total < len(m):
        raise ClusterError(f"{total} children cannot cover {len(m)} parents")
    if total > m.sum():
        raise ClusterError(f"{total} clusters exceed {int(m.sum())} points")
    quota = total * m / m.sum()
    alloc = np.maximum(1, np.floor(quota)).astype(int)
    alloc = np.minimum(alloc, m.astype(int))
    rem = quota - np.floor(quota)
    order = sorted(range(len(m)), key=lambda i: (-rem[i], i))
    while alloc.sum() < total:
        for i in order:
            if alloc.sum() >= total:
                break
            if alloc[i] < m[i]:
                alloc[i] += 1
    while alloc.sum() > total:
        for i in sorted(range(len(m)), key=lambda i: (rem[i], -alloc[i], i)):
            if alloc.sum() <= total:
                break
            if alloc[i] > 1:
                alloc[i] -= 1
    return alloc.tolist()


@dataclass
class Node:
    level: int
    index: int
    parent: int  # index at level - 1, -1 for the root
    center: np.ndarray
    members: list  # image ids


@dataclass
class GranularityTree:
    level_counts: list
    levels: list  # levels[i] -> list[Node]
    assignment: dict  # id -> finest index

    @property
    def n_levels(self) -> int:
        return len(self.level_counts)

    def node(self, level: int, index: int) -> Node:
        return self.levels[level][index]

    def centers(self, level: int) -> np.ndarray:
        return np.array([n.center for n in self.levels[level]])

    def children(self, level: int, index: int) -> list[int]:
        return [n.index for n in self.levels[level + 1] if n.parent == index]

    def chain(self, finest: int) -> list[tuple[int, int]]:
        """Ancestor chain (0, 0), ..., (n-1, finest)."""
        out = []
        level, idx = self.n_levels - 1, finest
        while level >= 0:
            out.append((level, idx))
            idx = self.levels[level][idx].parent
            level -= 1
        return out[::-1]

    def path_of(self, image_id) -> list[int]:
        """Node index per level for a training id."""
        return [i for _, i in self.chain(self.assignment[image_id])]

    def assign(self, dr, level: int) -> int:
        """Top-down descent: nearest child center at each level, lowest index on ties."""
        if not (0 <= level < self.n_levels):
            raise ClusterError(f"level {level} outside 0..{self.n_levels - 1}")
        dr = np.asarray(dr, dtype=np.float64)
        idx = 0
        for lv in range(1, level + 1):
            kids = self.children(lv - 1, idx)
            d = [float(((self.levels[lv][c].center - dr) ** 2).sum()) for c in kids]
            idx = kids[int(np.argmin(d))]
        return idx

    def to_dict(self) -> dict:
        return {
            "level_counts": list(self.level_counts),
            "nodes": [{"level": n.level, "index": n.index, "parent": n.parent,
                       "center": [float(v) for v in n.center], "member_count": len(n.members),
                       "members": list(n.members)}
                      for lv in self.levels for n in lv],
        }

    @classmethod
    def from_dict(cls, d) -> "GranularityTree":
        levels = [[] for _ in d["level_counts"]]
        for nd in d["nodes"]:
            levels[nd["level"]].append(Node(nd["level"], nd["index"], nd["parent"],
                                            np.asarray(nd["center"], dtype=np.float64),
                                            list(nd["members"])))
        for lv in levels:
            lv.sort(key=lambda n: n.index)
        finest = levels[-1]
        assignment = {m: n.index for n in finest for m in n.members}
        return cls(list(d["level_counts"]), levels, assignment)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def write_assignment_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "finest_index"])
            for k in sorted(self.assignment):
                w.writerow([k, self.assignment[k]])


def build_tree(drs: dict, config: ClusterConfig) -> GranularityTree:
    """Top-down hierarchical k-means: each level clusters within each parent group."""
    if not isinstance(config, ClusterConfig):
        config = ClusterConfig(**config)
    ids = sorted(drs)
    if not ids:
        raise ClusterError("empty corpus")
    X = {i: np.asarray(drs[i], dtype=np.float64) for i in ids}
    counts = config.level_counts
    if counts[-1] > len(ids):
        raise ClusterError(f"{counts[-1]} clusters exceed corpus size {len(ids)}")
    km = config.kmeans
    all_pts = np.array([X[i] for i in ids])
    levels = [[Node(0, 0, -1, all_pts.mean(axis=0), list(ids))]]
    for lv in range(1, len(counts)):
        parents = levels[-1]
        alloc = allocate_children([len(p.members) for p in parents], counts[lv])
        nodes = []
        for p, k in zip(parents, alloc):
            pts = np.array([X[i] for i in p.members])
            seed = int(np.random.SeedSequence([km.seed, lv, p.index]).generate_state(1)[0])
            centers, labels, _ = kmeans(pts, k, seed=seed, max_iters=km.max_iters,
                                        restarts=km.restarts)
            for j in range(k):
                mem = [p.members[t] for t in np.flatnonzero(labels == j)]
                nodes.append(Node(lv, len(nodes), p.index, centers[j].copy(), mem))
        levels.append(nodes)
    assignment = {m: n.index for n in levels[-1] for m in n.members}
    return GranularityTree(list(counts), levels, assignment)


def check_tree(tree: GranularityTree, drs: dict | None = None, tol: float = 1e-5) -> None:
    """Raise AssertionError when a structural invariant fails."""
    everyone = set(tree.levels[0][0].members)
    assert len(tree.levels[0]) == 1
    for lv, nodes in enumerate(tree.levels):
        assert len(nodes) == tree.level_counts[lv]
        seen = [m for n in nodes for m in n.members]
        assert len(seen) == len(set(seen)) and set(seen) == everyone, f"level {lv} is not a partition"
        if lv > 0:
            for n in nodes:
                assert set(n.members) <= set(tree.levels[lv - 1][n.parent].members), "nesting broken"
        if drs is not None:
            for n in nodes:
                mean = np.mean([drs[m] for m in n.members], axis=0)
                assert np.max(np.abs(mean - n.center)) <= tol, "center is not the member mean"
