"""Inexact matching of per-class landmark graphs.

Landmarks of one class become nodes of a complete graph whose edge
attributes are Euclidean distances in cell units.  Matching two graphs
means choosing a partial injection between their real nodes that
minimizes total edge-length discrepancy plus a fixed penalty for every
real node paired with a dummy; because the cost depends only on pairwise
distances it is invariant under rotation and translation of either
scene.

The search is exhaustive for up to six real nodes per side.  Larger
graphs use depth-first branch and bound: a similarity transform
hypothesized from high-prominence node pairs votes an initial
assignment, which bounds the search; an admissible lower bound
(accumulated cost plus unavoidable dummy penalties) prunes the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ClassMismatch, NoUsableClass, SizeMismatch
from .landmarks import Landmark, LandmarkClass

#: Node cap per graph; highest-prominence landmarks are kept.
MAX_NODES = 32

#: Exhaustive search is used when both sides have at most this many reals.
EXACT_LIMIT = 6


@dataclass(frozen=True)
class GraphNode:
    row: float
    col: float
    prominence: float
    is_dummy: bool = False


@dataclass(frozen=True)
class LandmarkGraph:
    """Complete graph over one class's landmarks, plus optional dummies.

    Edges exist only between real nodes, stored once with i < j; their
    length is the Euclidean distance between node positions in cells.
    """

    cls: LandmarkClass
    nodes: tuple[GraphNode, ...]
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        seen = set()
        for i, j, _length in self.edges:
            if i >= j:
                raise ValueError(f"edge ({i}, {j}) must satisfy i < j")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            if self.nodes[i].is_dummy or self.nodes[j].is_dummy:
                raise ValueError("dummy nodes cannot carry edges")
            seen.add((i, j))

    @property
    def real_count(self) -> int:
        return sum(1 for n in self.nodes if not n.is_dummy)

    def real_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if not n.is_dummy]


@dataclass(frozen=True)
class Matching:
    """A partial injection between the real nodes of two graphs.

    pairs hold (ref node index, cand node index), sorted by ref index;
    distortion is the summed edge-length discrepancy over matched pairs.
    """

    pairs: tuple[tuple[int, int], ...]
    distortion: float
    matched_count: int

    def __post_init__(self):
        refs = [a for a, _ in self.pairs]
        cands = [b for _, b in self.pairs]
        if len(set(refs)) != len(refs) or len(set(cands)) != len(cands):
            raise ValueError("matching pairs must form a partial injection")
        if self.matched_count != len(self.pairs):
            raise ValueError("matched_count must equal the number of pairs")


def build_graph(landmarks: list[Landmark], cls: LandmarkClass) -> LandmarkGraph:
    """Complete graph over the given class, majors first.

    Nodes are ordered majors before minors, then by descending
    prominence (ties row-major), and capped at MAX_NODES.
    """
    members = [lm for lm in landmarks if lm.cls is cls]
    members.sort(key=lambda lm: (not lm.is_major, -lm.prominence,
                                 lm.row, lm.col))
    members = members[:MAX_NODES]
    nodes = tuple(GraphNode(row=lm.row, col=lm.col, prominence=lm.prominence)
                  for lm in members)
    edges = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            length = math.hypot(nodes[i].row - nodes[j].row,
                                nodes[i].col - nodes[j].col)
            edges.append((i, j, length))
    return LandmarkGraph(cls=cls, nodes=nodes, edges=tuple(edges))


def pad_dummy(graph: LandmarkGraph, target_size: int) -> LandmarkGraph:
    """Append dummy nodes until the graph has target_size nodes."""
    if target_size < len(graph.nodes):
        raise ValueError(
            f"target size {target_size} is below the current "
            f"{len(graph.nodes)} nodes")
    if target_size == len(graph.nodes):
        return graph
    extra = tuple(GraphNode(row=math.nan, col=math.nan, prominence=0.0,
                            is_dummy=True)
                  for _ in range(target_size - len(graph.nodes)))
    return LandmarkGraph(cls=graph.cls, nodes=graph.nodes + extra,
                         edges=graph.edges)


def graph_to_dict(graph: LandmarkGraph) -> dict:
    """JSON-ready form; dummy positions serialize as null."""
    nodes = []
    for n in graph.nodes:
        nodes.append({
            "row": None if n.is_dummy else n.row,
            "col": None if n.is_dummy else n.col,
            "prominence": n.prominence,
            "is_dummy": n.is_dummy,
        })
    return {"class": graph.cls.name, "nodes": nodes,
            "edges": [[i, j, length] for i, j, length in graph.edges]}


def graph_from_dict(d: dict) -> LandmarkGraph:
    nodes = tuple(
        GraphNode(row=math.nan if n["row"] is None else float(n["row"]),
                  col=math.nan if n["col"] is None else float(n["col"]),
                  prominence=float(n["prominence"]),
                  is_dummy=bool(n["is_dummy"]))
        for n in d["nodes"])
    edges = tuple((int(i), int(j), float(length)) for i, j, length in d["edges"])
    return LandmarkGraph(cls=LandmarkClass[d["class"]], nodes=nodes,
                         edges=edges)


# --- matching ---------------------------------------------------------------

def _distance_matrix(positions: np.ndarray) -> np.ndarray:
    n = len(positions)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = math.hypot(positions[i, 0] - positions[j, 0],
                           positions[i, 1] - positions[j, 1])
            out[i, j] = d
            out[j, i] = d
    return out


def _canonical_cost(d_ref: np.ndarray, d_cand: np.ndarray,
                    pairs: tuple[tuple[int, int], ...], penalty: float) -> float:
    """Cost of a pair set, summed in a fixed order for reproducibility."""
    terms = []
    ordered = sorted(pairs)
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            i, ip = ordered[a]
            j, jp = ordered[b]
            terms.append(abs(d_ref[i, j] - d_cand[ip, jp]))
    dummy_hits = d_ref.shape[0] + d_cand.shape[0] - 2 * len(ordered)
    return math.fsum(terms) + penalty * dummy_hits


def _geometric_seed(ref_pos: np.ndarray, cand_pos: np.ndarray,
                    tolerance: float) -> Optional[tuple[tuple[int, int], ...]]:
    """Assignment voted by two-point similarity hypotheses.

    Base pairs come from the highest-prominence reference nodes (the
    node order); candidate pairs range over the top candidates.  Each
    hypothesis maps candidate positions into the reference frame and
    greedily pairs nearest neighbors within the tolerance; the
    assignment with the most inliers wins.
    """
    n_ref = len(ref_pos)
    n_cand = len(cand_pos)
    if n_ref < 2 or n_cand < 2:
        return None
    ref_bases = [(0, 1)]
    if n_ref >= 3:
        ref_bases += [(0, 2), (1, 2)]
    top_cand = range(min(n_cand, 8))
    best_pairs: Optional[tuple[tuple[int, int], ...]] = None
    best_score = (-1, math.inf)
    for a, b in ref_bases:
        base = ref_pos[b] - ref_pos[a]
        ref_len = math.hypot(base[0], base[1])
        if ref_len < 1e-9:
            continue
        ref_angle = math.atan2(base[1], base[0])
        for ca in top_cand:
            for cb in top_cand:
                if ca == cb:
                    continue
                vec = cand_pos[cb] - cand_pos[ca]
                cand_len = math.hypot(vec[0], vec[1])
                if cand_len < 1e-9:
                    continue
                scale = ref_len / cand_len
                if not (0.25 <= scale <= 4.0):
                    continue
                angle = ref_angle - math.atan2(vec[1], vec[0])
                cos_a = math.cos(angle) * scale
                sin_a = math.sin(angle) * scale
                moved_r = (cos_a * (cand_pos[:, 0] - cand_pos[ca, 0])
                           - sin_a * (cand_pos[:, 1] - cand_pos[ca, 1])
                           + ref_pos[a, 0])
                moved_c = (sin_a * (cand_pos[:, 0] - cand_pos[ca, 0])
                           + cos_a * (cand_pos[:, 1] - cand_pos[ca, 1])
                           + ref_pos[a, 1])
                used = [False] * n_cand
                pairs = []
                total = 0.0
                for i in range(n_ref):
                    best_j = -1
                    best_d = tolerance
                    for j in range(n_cand):
                        if used[j]:
                            continue
                        d = math.hypot(moved_r[j] - ref_pos[i, 0],
                                       moved_c[j] - ref_pos[i, 1])
                        if d < best_d:
                            best_d = d
                            best_j = j
                    if best_j >= 0:
                        used[best_j] = True
                        pairs.append((i, best_j))
                        total += best_d
                score = (len(pairs), -total)
                if score > (best_score[0], -best_score[1]):
                    best_score = (len(pairs), total)
                    best_pairs = tuple(pairs)
    return best_pairs


def _search_min_cost(d_ref: np.ndarray, d_cand: np.ndarray, penalty: float,
                     seed: Optional[tuple[tuple[int, int], ...]],
                     max_expansions: int) -> tuple[tuple[int, int], ...]:
    """Depth-first search over partial injections, cheapest-first.

    The bound cost + penalty * |remaining_ref - unused_cand| is a valid
    lower bound on any completion: every future pair adds a non-negative
    discrepancy and the imbalance between the two sides forces at least
    that many dummy assignments.  With the default expansion budget the
    search is exhaustive at small sizes; if the budget runs out the best
    assignment found so far is returned.
    """
    n_ref = d_ref.shape[0]
    n_cand = d_cand.shape[0]
    best_cost = penalty * (n_ref + n_cand)
    best_pairs: tuple[tuple[int, int], ...] = ()
    if seed:
        seed_cost = _canonical_cost(d_ref, d_cand, seed, penalty)
        if seed_cost < best_cost:
            best_cost = seed_cost
            best_pairs = tuple(sorted(seed))
    matched_ref: list[int] = []
    matched_cand: list[int] = []
    used = [False] * n_cand
    expansions = 0

    def recurse(i: int, cost: float) -> None:
        nonlocal best_cost, best_pairs, expansions
        if expansions >= max_expansions:
            return
        expansions += 1
        if i == n_ref:
            total = cost + penalty * (n_cand - len(matched_cand))
            if total < best_cost:
                best_cost = total
                best_pairs = tuple(sorted(zip(matched_ref, matched_cand)))
            return
        remaining = n_ref - i
        unused = n_cand - len(matched_cand)
        if cost + penalty * abs(remaining - unused) >= best_cost:
            return
        options = []
        for j in range(n_cand):
            if used[j]:
                continue
            inc = 0.0
            for r, c in zip(matched_ref, matched_cand):
                inc += abs(d_ref[i, r] - d_cand[j, c])
            options.append((inc, j))
        options.sort()
        for inc, j in options:
            used[j] = True
            matched_ref.append(i)
            matched_cand.append(j)
            recurse(i + 1, cost + inc)
            matched_ref.pop()
            matched_cand.pop()
            used[j] = False
        # leave ref node i unmatched (paired with a dummy)
        recurse(i + 1, cost + penalty)

    recurse(0, 0.0)
    return best_pairs


def default_dummy_penalty(graph: LandmarkGraph) -> float:
    """Three times the median edge length, or 1 for edgeless graphs."""
    if not graph.edges:
        return 1.0
    return 3.0 * float(np.median([length for _, _, length in graph.edges]))


def match_graphs(g_ref: LandmarkGraph, g_cand: LandmarkGraph, *,
                 dummy_penalty: Optional[float] = None,
                 distortion_tolerance: float = 2.0,
                 max_expansions: int = 250_000) -> Matching:
    """Minimum-cost partial injection between two graphs' real nodes.

    Cost is the summed |edge length difference| over matched pairs plus
    dummy_penalty for each real node matched to a dummy (on either
    side).  Graphs must share a class and have been padded to the same
    node count.  distortion_tolerance is the inlier radius used by the
    geometric seeding stage on large graphs.
    """
    if g_ref.cls is not g_cand.cls:
        raise ClassMismatch(
            f"cannot match {g_ref.cls.name} graph against {g_cand.cls.name}")
    if len(g_ref.nodes) != len(g_cand.nodes):
        raise SizeMismatch(
            f"graphs must be padded to equal size, got "
            f"{len(g_ref.nodes)} and {len(g_cand.nodes)}")
    ref_idx = g_ref.real_indices()
    cand_idx = g_cand.real_indices()
    ref_pos = np.array([[g_ref.nodes[i].row, g_ref.nodes[i].col]
                        for i in ref_idx], dtype=float).reshape(-1, 2)
    cand_pos = np.array([[g_cand.nodes[i].row, g_cand.nodes[i].col]
                         for i in cand_idx], dtype=float).reshape(-1, 2)
    d_ref = _distance_matrix(ref_pos)
    d_cand = _distance_matrix(cand_pos)
    penalty = (default_dummy_penalty(g_ref)
               if dummy_penalty is None else float(dummy_penalty))
    if not (penalty > 0):
        raise ValueError(f"dummy_penalty must be positive, got {penalty}")
    seed = None
    if len(ref_idx) > EXACT_LIMIT or len(cand_idx) > EXACT_LIMIT:
        seed = _geometric_seed(ref_pos, cand_pos, distortion_tolerance)
    local_pairs = _search_min_cost(d_ref, d_cand, penalty, seed,
                                   max_expansions)
    pairs = tuple(sorted((ref_idx[a], cand_idx[b]) for a, b in local_pairs))
    terms = []
    ordered = sorted(local_pairs)
    for x in range(len(ordered)):
        for y in range(x + 1, len(ordered)):
            i, ip = ordered[x]
            j, jp = ordered[y]
            terms.append(abs(d_ref[i, j] - d_cand[ip, jp]))
    return Matching(pairs=pairs, distortion=math.fsum(terms),
                    matched_count=len(pairs))


def select_class(per_class: dict) -> LandmarkClass:
    """Class whose matching kept the most pairs.

    Requires at least one class with three matched pairs; ties fall to
    the lower mean distortion per pair, then to enum order.
    """
    usable = [(cls, m) for cls, m in per_class.items()
              if m.matched_count >= 3]
    if not usable:
        counts = {cls.name: m.matched_count for cls, m in per_class.items()}
        raise NoUsableClass(
            f"no class matched 3 or more landmark pairs: {counts}")
    return min(usable,
               key=lambda item: (-item[1].matched_count,
                                 item[1].distortion / item[1].matched_count,
                                 int(item[0])))[0]
