"""Connected-component instance labeling with graph-cut splitting.

Foreground components use 8-connectivity and are found with the classic
two-pass equivalence-class scan: provisional labels from the W, NW, N, NE
neighbours on the first pass, union-find resolution on the second.
Components whose shape looks wrong (low solidity, outlying area) can be
split by an s-t minimum cut over the component's 8-connected pixel graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numba
import numpy as np


# --------------------------------------------------------------------------
# union-find over provisional labels


@numba.njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@numba.njit(cache=True)
def _union(parent, rank, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra == rb:
        return ra
    if rank[ra] < rank[rb]:
        ra, rb = rb, ra
    parent[rb] = ra
    if rank[ra] == rank[rb]:
        rank[ra] += 1
    return ra


class UnionFind:
    """Disjoint sets over 0..n-1 with path compression and union by rank."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.rank = np.zeros(n, dtype=np.int64)

    def find(self, x: int) -> int:
        return int(_find(self.parent, x))

    def union(self, a: int, b: int) -> int:
        return int(_union(self.parent, self.rank, a, b))


@numba.njit(cache=True)
def _two_pass(bits):
    h, w = bits.shape
    prov = np.zeros((h, w), dtype=np.int64)
    cap = h * w + 1
    parent = np.arange(cap, dtype=np.int64)
    rank = np.zeros(cap, dtype=np.int64)
    nxt = 1
    for r in range(h):
        for c in range(w):
            if bits[r, c] == 0:
                continue
            best = 0
            # W, NW, N, NE
            for dr, dc in ((0, -1), (-1, -1), (-1, 0), (-1, 1)):
                rr = r + dr
                cc = c + dc
                if rr < 0 or cc < 0 or cc >= w:
                    continue
                lab = prov[rr, cc]
                if lab == 0:
                    continue
                if best == 0:
                    best = lab
                elif lab != best:
                    _union(parent, rank, best, lab)
                    if lab < best:
                        best = lab
            if best == 0:
                best = nxt
                nxt += 1
            prov[r, c] = best
    remap = np.zeros(nxt, dtype=np.int64)
    out = np.zeros((h, w), dtype=np.int64)
    k = 0
    for r in range(h):
        for c in range(w):
            lab = prov[r, c]
            if lab == 0:
                continue
            root = _find(parent, lab)
            if remap[root] == 0:
                k += 1
                remap[root] = k
            out[r, c] = remap[root]
    return out, k


# --------------------------------------------------------------------------
# component records


@dataclass(frozen=True)
class Component:
    label: int
    area: int
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (inclusive)
    centroid: tuple[float, float]  # row, col of pixel centres
    solidity: float
    suspicious: bool = False
    split_from: int | None = None


@dataclass(frozen=True)
class ComponentSet:
    labels: np.ndarray
    components: tuple[Component, ...] = field(default_factory=tuple)

    @property
    def k(self) -> int:
        return len(self.components)

    def get(self, label: int) -> Component:
        for comp in self.components:
            if comp.label == label:
                return comp
        raise KeyError(label)

    def to_json(self) -> list[dict]:
        return [
            {
                "label": c.label,
                "area": c.area,
                "bbox": list(c.bbox),
                "centroid": list(c.centroid),
                "solidity": c.solidity,
                "suspicious": c.suspicious,
                "split_from": c.split_from,
            }
            for c in self.components
        ]


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_area(points: np.ndarray) -> float:
    """Area of the convex hull of 2-D points (Andrew's monotone chain)."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) < 3:
        return 0.0
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    x = np.array([p[0] for p in hull])
    y = np.array([p[1] for p in hull])
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _corner_points(rows: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Corners of the unit squares at each row's leftmost and rightmost pixel."""
    return np.concatenate(
        [np.stack([rows, lo], 1), np.stack([rows + 1, lo], 1),
         np.stack([rows, hi + 1], 1), np.stack([rows + 1, hi + 1], 1)]
    )


def pixel_solidity(rows: np.ndarray, cols: np.ndarray) -> float:
    """Pixel count over the hull area of the pixels taken as unit squares."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    r0 = rows.min()
    nr = rows.max() - r0 + 1
    lo = np.full(nr, np.iinfo(np.int64).max)
    hi = np.full(nr, -1)
    np.minimum.at(lo, rows - r0, cols)
    np.maximum.at(hi, rows - r0, cols)
    present = hi >= 0
    corners = _corner_points(np.arange(nr)[present] + r0, lo[present], hi[present])
    return rows.size / convex_hull_area(corners)


def _records(labels: np.ndarray, k: int) -> tuple[Component, ...]:
    if k == 0:
        return ()
    h, w = labels.shape
    rows, cols = np.nonzero(labels)
    labs = labels[rows, cols]
    area = np.bincount(labs, minlength=k + 1)
    rsum = np.bincount(labs, weights=rows, minlength=k + 1)
    csum = np.bincount(labs, weights=cols, minlength=k + 1)
    big = np.iinfo(np.int64).max
    rmin = np.full(k + 1, big)
    cmin = np.full(k + 1, big)
    rmax = np.full(k + 1, -1)
    cmax = np.full(k + 1, -1)
    np.minimum.at(rmin, labs, rows)
    np.minimum.at(cmin, labs, cols)
    np.maximum.at(rmax, labs, rows)
    np.maximum.at(cmax, labs, cols)
    # leftmost/rightmost pixel of every (label, row)
    key = labs * h + rows
    lo = np.full((k + 1) * h, big)
    hi = np.full((k + 1) * h, -1)
    np.minimum.at(lo, key, cols)
    np.maximum.at(hi, key, cols)
    lo = lo.reshape(k + 1, h)
    hi = hi.reshape(k + 1, h)
    out = []
    for lab in range(1, k + 1):
        rr = np.arange(rmin[lab], rmax[lab] + 1)
        present = hi[lab, rr] >= 0
        rr = rr[present]
        hull = convex_hull_area(_corner_points(rr, lo[lab, rr], hi[lab, rr]))
        out.append(
            Component(
                label=lab,
                area=int(area[lab]),
                bbox=(int(rmin[lab]), int(cmin[lab]), int(rmax[lab]), int(cmax[lab])),
                centroid=(float(rsum[lab] / area[lab]) + 0.5, float(csum[lab] / area[lab]) + 0.5),
                solidity=float(area[lab] / hull),
            )
        )
    return tuple(out)


# --------------------------------------------------------------------------
# operations


def binarize(r: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where sample > threshold, from a (1, H, W) raster or (H, W) array."""
    r = np.asarray(r)
    if r.ndim == 3:
        if r.shape[0] != 1:
            raise ValueError(f"binarize expects a single-channel raster, got {r.shape[0]} channels")
        r = r[0]
    if r.ndim != 2:
        raise ValueError(f"binarize expects a 2-D raster, got shape {r.shape}")
    return (r > threshold).astype(np.uint8)


def label_components(b: np.ndarray) -> ComponentSet:
    b = np.ascontiguousarray(np.asarray(b) != 0, dtype=np.uint8)
    labels, k = _two_pass(b)
    return ComponentSet(labels, _records(labels, k))


@dataclass(frozen=True)
class SuspicionCriteria:
    s_min: float = 0.5
    k_mad: float = 3.0


def detect_suspicious(cs: ComponentSet, expected: SuspicionCriteria = SuspicionCriteria()) -> list[int]:
    """Labels with low solidity or (for k >= 3) an outlying area by the MAD rule."""
    areas = np.array([c.area for c in cs.components], dtype=np.float64)
    flagged = set()
    if len(areas) >= 3:
        med = np.median(areas)
        mad = np.median(np.abs(areas - med))
        for comp, a in zip(cs.components, areas):
            if (mad == 0 and a != med) or (mad > 0 and abs(a - med) > expected.k_mad * mad):
                flagged.add(comp.label)
    for comp in cs.components:
        if comp.solidity < expected.s_min:
            flagged.add(comp.label)
    return sorted(flagged)


@dataclass(frozen=True)
class CutConfig:
    sigma_g: float = 0.1
    a_min: int = 16


def principal_axis_seeds(rows: np.ndarray, cols: np.ndarray) -> tuple[int, int]:
    """Indices of the two pixels at the extremes of the principal axis."""
    pts = np.stack([rows, cols], axis=1).astype(np.float64)
    centred = pts - pts.mean(axis=0)
    cov = centred.T @ centred
    _, vecs = np.linalg.eigh(cov)
    proj = centred @ vecs[:, -1]
    return int(np.argmin(proj)), int(np.argmax(proj))


_DIRS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def grid_graph(rows: np.ndarray, cols: np.ndarray, intensity: np.ndarray, sigma_g: float):
    """8-neighbour adjacency (node, direction) -> neighbour and capacities.

    Directions run clockwise from north, so ``(d + 4) % 8`` is the reverse arc.
    """
    index = {(r, c): i for i, (r, c) in enumerate(zip(rows.tolist(), cols.tolist()))}
    n = rows.size
    nbr = np.full((n, 8), -1, dtype=np.int64)
    cap = np.zeros((n, 8))
    for i, (r, c) in enumerate(zip(rows.tolist(), cols.tolist())):
        for d, (dr, dc) in enumerate(_DIRS):
            j = index.get((r + dr, c + dc))
            if j is not None:
                nbr[i, d] = j
                diff = intensity[i] - intensity[j]
                cap[i, d] = np.exp(-(diff * diff) / (2.0 * sigma_g**2))
    return nbr, cap


def max_flow(nbr: np.ndarray, cap: np.ndarray, s: int, t: int, eps: float = 1e-300):
    """Edmonds-Karp on a degree-8 graph; returns (flow value, source-side bool mask)."""
    res = cap.copy()
    n = nbr.shape[0]
    total = 0.0
    while True:
        prev = np.full(n, -1, dtype=np.int64)
        prev_dir = np.full(n, -1, dtype=np.int64)
        prev[s] = s
        queue = deque([s])
        while queue and prev[t] < 0:
            u = queue.popleft()
            for d in range(8):
                v = nbr[u, d]
                if v >= 0 and prev[v] < 0 and res[u, d] > eps:
                    prev[v] = u
                    prev_dir[v] = d
                    queue.append(v)
        if prev[t] < 0:
            return total, prev >= 0
        bottleneck = np.inf
        v = t
        while v != s:
            bottleneck = min(bottleneck, res[prev[v], prev_dir[v]])
            v = prev[v]
        v = t
        while v != s:
            u, d = prev[v], prev_dir[v]
            res[u, d] -= bottleneck
            res[v, (d + 4) % 8] += bottleneck
            v = u
        total += bottleneck


def refine_split(b: np.ndarray, img: np.ndarray, suspicious: int, cs: ComponentSet,
                 config: CutConfig = CutConfig()) -> ComponentSet:
    """Try to split one component along a minimum cut.

    When both sides hold at least ``a_min`` pixels, the source side keeps the
    component's label slot and the sink side is appended as label k+1; both
    records carry ``split_from``. Otherwise ``cs`` is returned unchanged.
    """
    cs.get(suspicious)
    rows, cols = np.nonzero(cs.labels == suspicious)
    img = np.asarray(img, dtype=np.float64)
    gray = img.mean(axis=0) if img.ndim == 3 else img
    nbr, cap = grid_graph(rows, cols, gray[rows, cols], config.sigma_g)
    s, t = principal_axis_seeds(rows, cols)
    if s == t:
        return cs
    _, source_side = max_flow(nbr, cap, s, t)
    n_src = int(source_side.sum())
    if n_src < config.a_min or rows.size - n_src < config.a_min:
        return cs
    labels = cs.labels.copy()
    new_label = cs.k + 1
    labels[rows[~source_side], cols[~source_side]] = new_label
    recs = {c.label: c for c in _records(labels, new_label)}
    comps = []
    for c in cs.components:
        comps.append(replace(recs[c.label], split_from=suspicious) if c.label == suspicious else c)
    comps.append(replace(recs[new_label], split_from=suspicious))
    return ComponentSet(labels, tuple(comps))


def segment_instances(prob: np.ndarray, img: np.ndarray | None = None, threshold: float = 0.5,
                      criteria: SuspicionCriteria = SuspicionCriteria(),
                      cut: CutConfig = CutConfig()) -> ComponentSet:
    """binarize -> label -> flag suspicious -> graph-cut split."""
    b = binarize(prob, threshold)
    cs = label_components(b)
    if cs.k == 0:
        return cs
    flagged = detect_suspicious(cs, criteria)
    guide = np.asarray(prob if img is None else img, dtype=np.float64)
    for lab in flagged:
        cs = refine_split(b, guide, lab, cs, cut)
    marked = tuple(replace(c, suspicious=(c.label in flagged) or c.split_from is not None) for c in cs.components)
    return ComponentSet(cs.labels, marked)
