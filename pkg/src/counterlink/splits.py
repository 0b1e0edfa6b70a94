"""Structural-shift dataset splits by thresholding link heuristics.

A split buckets every edge of the source graph by one heuristic value (CN,
SP, or PA, computed once on the full graph; SP uses the exclude-edge
convention so existing edges never trivially score 1). The two thresholds
are treated as sorted bucket boundaries (lo, hi):

    forward   train [0, lo)   valid [lo, hi)   test [hi, inf)
    backward  train [hi, inf) valid [lo, hi)   test [0, lo)

so values grow from train to test in forward splits and shrink in backward
ones regardless of the order the two parameters are written in. Unreachable
SP values sort above every threshold.
"""

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import bruteforce
from .errors import DegenerateSplitError, InputError, ValidationError
from .graphs import Graph, common_neighbors, preferential_attachment, shortest_path_length
from .rng import stream_rng

HEURISTICS = ("CN", "SP", "PA")
DIRECTIONS = ("forward", "backward")
BUCKETS = ("train", "valid", "test")


@dataclass(frozen=True)
class SplitSpec:
    heuristic: str
    direction: str
    t1: float
    t2: float
    neg_ratio: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.heuristic not in HEURISTICS:
            raise InputError(f"heuristic must be one of {HEURISTICS}, got {self.heuristic!r}")
        if self.direction not in DIRECTIONS:
            raise InputError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.t1 < 0 or self.t2 < 0:
            raise InputError("thresholds must be non-negative")
        if self.heuristic in ("CN", "SP") and not (
            float(self.t1).is_integer() and float(self.t2).is_integer()
        ):
            raise InputError(f"{self.heuristic} thresholds must be integers")
        if self.t1 == self.t2:
            raise InputError("thresholds must differ")
        if self.neg_ratio < 1:
            raise InputError("neg_ratio must be >= 1")

    def bucket_ranges(self):
        """Resolved half-open value range per bucket, surfacing the sorted
        interpretation of the two parameters."""
        lo, hi = sorted((float(self.t1), float(self.t2)))
        if self.direction == "forward":
            return {"train": (0.0, lo), "valid": (lo, hi), "test": (hi, math.inf)}
        return {"train": (hi, math.inf), "valid": (lo, hi), "test": (0.0, lo)}


@dataclass
class DatasetSplit:
    train_pos: np.ndarray
    valid_pos: np.ndarray
    test_pos: np.ndarray
    train_neg: np.ndarray
    valid_neg: np.ndarray
    test_neg: np.ndarray
    observed_graph: Graph
    spec: SplitSpec

    def pos(self, bucket):
        return getattr(self, f"{bucket}_pos")

    def neg(self, bucket):
        return getattr(self, f"{bucket}_neg")


def heuristic_value(g: Graph, u: int, v: int, name: str):
    """Production-path heuristic with the split's exclude-edge SP convention."""
    if name == "CN":
        return common_neighbors(g, u, v)
    if name == "SP":
        return shortest_path_length(g, u, v, exclude_edge=True)
    if name == "PA":
        return preferential_attachment(g, u, v)
    raise InputError(f"unknown heuristic {name!r}")


def _bucket_of(value, ranges):
    for bucket in BUCKETS:
        lo, hi = ranges[bucket]
        if lo <= value < hi or (value == math.inf and hi == math.inf):
            return bucket
    raise AssertionError(f"value {value} fell outside all buckets")


def sample_negatives(g: Graph, count: int, seed=None, rng=None):
    """Uniform distinct non-edges (u < v) of g, deterministic per seed."""
    if count < 0:
        raise InputError("negative sample count must be >= 0")
    pool = g.non_edge_count()
    if count > pool:
        raise InputError(f"requested {count} negatives but only {pool} non-edges exist")
    if rng is None:
        rng = stream_rng(0 if seed is None else seed, "negatives")
    if count == 0:
        return np.empty((0, 2), dtype=np.int64)
    n = g.num_nodes
    # Dense graphs: enumerate; sparse: rejection sample.
    if count * 3 > pool:
        dense = np.zeros((n, n), dtype=bool)
        e = g.edges()
        if e.size:
            dense[e[:, 0], e[:, 1]] = True
        iu, ju = np.triu_indices(n, k=1)
        cand = np.stack([iu, ju], axis=1)[~dense[iu, ju]]
        pick = rng.choice(cand.shape[0], size=count, replace=False)
        return cand[np.sort(pick)]
    chosen = set()
    out = []
    while len(out) < count:
        u = int(rng.integers(0, n))
        v = int(rng.integers(0, n))
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in chosen or g.has_edge(*key):
            continue
        chosen.add(key)
        out.append(key)
    return np.array(out, dtype=np.int64)


def generate_split(g: Graph, spec: SplitSpec) -> DatasetSplit:
    """Bucket every edge by its heuristic value; sample negatives per bucket.

    Heuristics are computed on the full source graph before any edges are
    hidden. The observed graph keeps only train positives, so validation and
    test structure never enters message passing by default.
    """
    if g.edge_count < 1:
        raise InputError("cannot split a graph with no edges")
    ranges = spec.bucket_ranges()
    edges = g.edges()
    buckets = {b: [] for b in BUCKETS}
    for u, v in edges:
        val = heuristic_value(g, int(u), int(v), spec.heuristic)
        buckets[_bucket_of(val, ranges)].append((int(u), int(v)))
    for b in BUCKETS:
        if not buckets[b]:
            raise DegenerateSplitError(
                f"{b} bucket received zero edges for {spec.heuristic} "
                f"{spec.direction} split with ranges {ranges[b]}"
            )
    pos = {b: np.array(buckets[b], dtype=np.int64) for b in BUCKETS}
    counts = {b: spec.neg_ratio * pos[b].shape[0] for b in BUCKETS}
    rng = stream_rng(spec.seed, "negatives")
    allneg = sample_negatives(g, sum(counts.values()), rng=rng)
    neg = {}
    at = 0
    for b in BUCKETS:
        neg[b] = allneg[at : at + counts[b]]
        at += counts[b]
    observed = g.subgraph_on(pos["train"])
    return DatasetSplit(
        train_pos=pos["train"],
        valid_pos=pos["valid"],
        test_pos=pos["test"],
        train_neg=neg["train"],
        valid_neg=neg["valid"],
        test_neg=neg["test"],
        observed_graph=observed,
        spec=spec,
    )


@dataclass
class SplitReport:
    bucket_counts: dict
    bucket_ranges: dict
    histograms: dict
    violations: list
    interpretation: str


def verify_split(g: Graph, split: DatasetSplit) -> SplitReport:
    """Recheck every bucket assignment with the set/BFS reference heuristics.

    Independent of the CSR production path by design. Raises ValidationError
    on any violated membership, non-edge negatives, or empty negative sets.
    """
    spec = split.spec
    ranges = spec.bucket_ranges()
    adj = bruteforce.adjacency_sets(g.num_nodes, g.edges())
    violations = []
    counts = {}
    hists = {}
    for bucket in BUCKETS:
        edges = split.pos(bucket)
        counts[bucket] = int(edges.shape[0])
        values = []
        lo, hi = ranges[bucket]
        for u, v in edges:
            val = bruteforce.heuristic_brute(
                adj, int(u), int(v), spec.heuristic, exclude_edge=spec.heuristic == "SP"
            )
            values.append(val)
            inside = lo <= val < hi or (val == math.inf and hi == math.inf)
            if not inside:
                violations.append(
                    {"bucket": bucket, "edge": [int(u), int(v)], "value": float(val)}
                )
        finite = [v for v in values if v != math.inf]
        hists[bucket] = {
            "n": len(values),
            "n_unreachable": len(values) - len(finite),
            "mean_finite": float(np.mean(finite)) if finite else None,
            "counts": _int_histogram(finite),
        }
        if split.neg(bucket).shape[0] == 0:
            raise ValidationError(f"{bucket} negative set is empty")
        for u, v in split.neg(bucket):
            if int(v) in adj[int(u)]:
                violations.append(
                    {"bucket": f"{bucket}_neg", "edge": [int(u), int(v)], "value": None}
                )
    report = SplitReport(
        bucket_counts=counts,
        bucket_ranges={b: [ranges[b][0], ranges[b][1]] for b in BUCKETS},
        histograms=hists,
        violations=violations,
        interpretation=(
            f"{spec.heuristic} {spec.direction} thresholds ({spec.t1}, {spec.t2}) "
            f"resolved as sorted boundaries lo={min(spec.t1, spec.t2)}, "
            f"hi={max(spec.t1, spec.t2)}"
        ),
    )
    if violations:
        shown = violations[:10]
        raise ValidationError(
            f"{len(violations)} bucket violation(s), first {len(shown)}: {shown}"
        )
    return report


def _int_histogram(values):
    out = {}
    for v in values:
        key = str(int(v)) if float(v).is_integer() else str(float(v))
        out[key] = out.get(key, 0) + 1
    return out


# ---------------------------------------------------------------------------
# Persistence


def save_split(split: DatasetSplit, path):
    doc = {
        "spec": asdict(split.spec),
        "seed": split.spec.seed,
        "bucket_ranges": {
            b: [r[0], "inf" if r[1] == math.inf else r[1]]
            for b, r in split.spec.bucket_ranges().items()
        },
        "edges": {
            f"{b}_{kind}": getattr(split, f"{b}_{kind}").tolist()
            for b in BUCKETS
            for kind in ("pos", "neg")
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_split(path, g: Graph) -> DatasetSplit:
    """Load a persisted split and revalidate it against the source graph."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        spec = SplitSpec(**doc["spec"])
        arrays = {
            key: np.array(doc["edges"][key], dtype=np.int64).reshape(-1, 2)
            for key in (f"{b}_{kind}" for b in BUCKETS for kind in ("pos", "neg"))
        }
    except KeyError as exc:
        raise ValidationError(f"{path}: missing field {exc}")
    split = DatasetSplit(
        observed_graph=g.subgraph_on(arrays["train_pos"]),
        spec=spec,
        **arrays,
    )
    pos_keys = {tuple(e) for b in BUCKETS for e in split.pos(b).tolist()}
    total = sum(split.pos(b).shape[0] for b in BUCKETS)
    if len(pos_keys) != total:
        raise ValidationError(f"{path}: positive buckets overlap")
    verify_split(g, split)
    return split
