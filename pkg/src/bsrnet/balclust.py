"""Class-balanced subclass generation.

Each foreground class gets a number of subclasses proportional to its pixel
population; its pixels (in backbone feature space) are then split by a
capacity-constrained k-means so every subclass holds nearly the same number
of pixels.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class ClassCensus:
    pixel_count: np.ndarray  # index c -> pixels of class c

    @property
    def K(self) -> int:
        return len(self.pixel_count) - 1


def census(labels: Sequence[np.ndarray], K: int) -> ClassCensus:
    counts = np.zeros(K + 1, dtype=np.int64)
    for i, lab in enumerate(labels):
        lab = np.asarray(lab)
        if lab.size and (lab.min() < 0 or lab.max() > K):
            raise ValueError(f"label map {i} has values outside 0..{K}")
        counts += np.bincount(lab.ravel().astype(np.int64), minlength=K + 1)
    return ClassCensus(counts)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def allocate_subclass_counts(c: ClassCensus, background_k: int = 1,
                             split_background: bool = False) -> dict[int, int]:
    """Subclass count per class: ``max(1, round(count / S))`` with ``S`` the
    smallest nonzero foreground population.

    Foreground classes with no pixels get zero subclasses (and a warning).
    """
    fg = c.pixel_count[1:]
    nonzero = fg[fg > 0]
    if nonzero.size == 0:
        raise ValueError("labeled set contains no foreground pixels")
    target = int(nonzero.min())
    counts = {}
    if split_background:
        counts[0] = max(1, _round_half_up(c.pixel_count[0] / target))
    else:
        counts[0] = background_k
    for cls in range(1, len(c.pixel_count)):
        n = int(c.pixel_count[cls])
        if n == 0:
            logger.warning("class %d absent from the labeled set; it gets no subclasses", cls)
            counts[cls] = 0
        else:
            counts[cls] = max(1, _round_half_up(n / target))
    return counts


@dataclass
class SubclassMap:
    parent_of: list[int]
    counts: dict[int, int]

    @property
    def k_sub(self) -> int:
        return len(self.parent_of) - 1

    @property
    def K(self) -> int:
        return max(self.counts)

    @classmethod
    def from_counts(cls, counts: dict[int, int]) -> "SubclassMap":
        """Contiguous numbering: background subclasses first, then class 1's, ..."""
        if counts.get(0, 0) < 1:
            raise ValueError("background needs at least one subclass")
        parent = []
        for c in sorted(counts):
            parent.extend([c] * counts[c])
        return cls(parent, dict(sorted(counts.items())))

    def first_id(self, cls: int) -> int:
        return self.parent_of.index(cls)

    def to_json(self) -> str:
        return json.dumps({"k_sub": self.k_sub, "parent_of": self.parent_of,
                           "counts": {str(k): v for k, v in self.counts.items()}}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SubclassMap":
        d = json.loads(text)
        smap = cls([int(p) for p in d["parent_of"]], {int(k): int(v) for k, v in d["counts"].items()})
        if smap.k_sub != d["k_sub"]:
            raise ValueError(f"k_sub {d['k_sub']} disagrees with parent_of length {len(smap.parent_of)}")
        return smap

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "SubclassMap":
        path = Path(path)
        try:
            return cls.from_json(path.read_text())
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"{path}: malformed subclass map ({exc})") from exc


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterResult:
    assignment: np.ndarray
    centers: np.ndarray
    within_sse: float
    sse_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=len(self.centers))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points ** 2).sum(1)[:, None] - 2 * points @ centers.T + (centers ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _sse(points, assignment, centers) -> float:
    diff = points - centers[assignment]
    return float((diff * diff).sum())


def _means(points, assignment, k, fallback):
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, assignment, points)
    sizes = np.bincount(assignment, minlength=k)
    centers = fallback.copy()
    nz = sizes > 0
    centers[nz] = sums[nz] / sizes[nz, None]
    return centers


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    p = len(points)
    idx = [int(rng.integers(p))]
    d2 = _sq_dists(points, points[idx[0]][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(p))
        else:
            nxt = int(rng.choice(p, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[nxt][None])[:, 0])
    return points[idx].copy()


def capacity_assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Greedy balanced assignment.

    Cluster sizes end up as ``floor(p/k)`` or ``ceil(p/k)``.  Points are taken
    in descending order of (second-nearest minus nearest open-center distance)
    and go to their nearest open center; margins are recomputed whenever a
    center fills up.
    """
    p, k = len(points), len(centers)
    lo, rem = divmod(p, k)
    hi = lo + (1 if rem else 0)
    dist = np.sqrt(_sq_dists(points, centers))
    assign = np.full(p, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    n_hi = 0  # clusters that reached the larger capacity
    is_open = np.ones(k, dtype=bool)
    remaining = np.arange(p)
    while remaining.size:
        open_ids = np.flatnonzero(is_open)
        d = dist[np.ix_(remaining, open_ids)]
        if len(open_ids) == 1:
            nearest = np.zeros(len(remaining), dtype=np.int64)
            margin = np.zeros(len(remaining))
        else:
            part = np.partition(d, 1, axis=1)
            margin = part[:, 1] - part[:, 0]
            nearest = d.argmin(axis=1)
        order = np.argsort(-margin, kind="stable")
        targets = open_ids[nearest[order]]

        onehot = np.zeros((len(order), k), dtype=np.int64)
        onehot[np.arange(len(order)), targets] = 1
        new_size = sizes[targets] + np.cumsum(onehot, axis=0)[np.arange(len(order)), targets]
        hi_event = (new_size == hi) & (hi > lo)
        valid = (new_size <= lo) | (hi_event & (n_hi + np.cumsum(hi_event) <= rem))
        bad = np.flatnonzero(~valid)
        stop = bad[0] if bad.size else len(order)

        take = order[:stop]
        assign[remaining[take]] = targets[:stop]
        np.add.at(sizes, targets[:stop], 1)
        n_hi += int(hi_event[:stop].sum())
        remaining = remaining[np.sort(order[stop:])]
        is_open = (sizes < hi) & ~((sizes >= lo) & (n_hi >= rem))
        if remaining.size and not is_open.any():
            raise RuntimeError("capacity bookkeeping failed: no open cluster left")
    return assign


def swap_refine(points: np.ndarray, assign: np.ndarray, k: int, max_passes: int = 100) -> np.ndarray:
    """Local search over balance-preserving moves.

    Tries exchanging one point between two clusters and moving one point
    from a larger cluster to one exactly one smaller; applies the best
    strictly improving move per cluster pair until none is left.
    """
    assign = assign.copy()
    tol = 1e-12
    for _ in range(max_passes):
        improved = False
        for a in range(k):
            for b in range(a + 1, k):
                ia, ib = np.flatnonzero(assign == a), np.flatnonzero(assign == b)
                na, nb = len(ia), len(ib)
                if na == 0 or nb == 0:
                    continue
                xa, xb = points[ia], points[ib]
                mu_a, mu_b = xa.mean(0), xb.mean(0)
                da_a = ((xa - mu_a) ** 2).sum(1)  # |x - mu_a|^2 for x in a
                da_b = ((xa - mu_b) ** 2).sum(1)
                db_b = ((xb - mu_b) ** 2).sum(1)
                db_a = ((xb - mu_a) ** 2).sum(1)
                best, move = -tol, None
                # exchange x in a with y in b
                if na > 1 or nb > 1:
                    cross = _sq_dists(xa, xb)
                    delta = (db_a[None, :] - da_a[:, None] - cross / na
                             + da_b[:, None] - db_b[None, :] - cross / nb)
                    i, j = np.unravel_index(delta.argmin(), delta.shape)
                    if delta[i, j] < best:
                        best, move = delta[i, j], ("swap", i, j)
                # single move from the larger cluster to the smaller
                if na == nb + 1 and na > 1:
                    gain = da_b * nb / (nb + 1) - da_a * na / (na - 1)
                    i = int(gain.argmin())
                    if gain[i] < best:
                        best, move = gain[i], ("a2b", i, None)
                elif nb == na + 1 and nb > 1:
                    gain = db_a * na / (na + 1) - db_b * nb / (nb - 1)
                    j = int(gain.argmin())
                    if gain[j] < best:
                        best, move = gain[j], ("b2a", None, j)
                if move is None:
                    continue
                kind, i, j = move
                if kind in ("swap", "a2b"):
                    assign[ia[i]] = b
                if kind in ("swap", "b2a"):
                    assign[ib[j]] = a
                improved = True
        if not improved:
            break
    return assign


def _validate(points, k):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(points):
        raise ValueError(f"cannot form {k} clusters from {len(points)} points")
    return points


def balanced_kmeans(points, k: int, seed: int = 0, max_iters: int = 50, n_init: int = 5,
                    refine_limit: int = 5000) -> ClusterResult:
    """Capacity-constrained k-means (cluster sizes differ by at most one).

    Alternates :func:`capacity_assign` with mean updates from a k-means++
    start.  A new assignment is only accepted if it does not raise the SSE
    under the current centers, so ``sse_history`` is non-increasing.  Inputs
    with at most ``refine_limit`` points are polished by :func:`swap_refine`.
    The lowest-SSE of ``n_init`` runs is kept.
    """
    points = _validate(points, k)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = kmeans_pp_init(points, k, rng)
        prev = None
        history = []
        it = 0
        for it in range(1, max_iters + 1):
            assign = capacity_assign(points, centers)
            if prev is not None:
                if _sse(points, assign, centers) > _sse(points, prev, centers):
                    assign = prev
                if np.array_equal(assign, prev):
                    break
            centers = _means(points, assign, k, centers)
            history.append(_sse(points, assign, centers))
            prev = assign
        if len(points) <= refine_limit and k > 1:
            refined = swap_refine(points, prev, k)
            if not np.array_equal(refined, prev):
                prev = refined
                centers = _means(points, prev, k, centers)
                history.append(_sse(points, prev, centers))
        res = ClusterResult(prev, centers, history[-1], history, it)
        if best is None or res.within_sse < best.within_sse:
            best = res
    return best


def kmeans(points, k: int, seed: int = 0, max_iters: int = 50) -> ClusterResult:
    """Plain Lloyd k-means with the same seeding, no size constraint."""
    points = _validate(points, k)
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(points, k, rng)
    prev = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        assign = _sq_dists(points, centers).argmin(axis=1)
        if prev is not None and np.array_equal(assign, prev):
            break
        centers = _means(points, assign, k, centers)
        history.append(_sse(points, assign, centers))
        prev = assign
    return ClusterResult(prev, centers, history[-1], history, it)


# ---------------------------------------------------------------------------
# subclass labels


@dataclass
class SubclassResult:
    sub_labels: list[np.ndarray]
    smap: SubclassMap
    census: ClassCensus
    cluster_sizes: dict[int, np.ndarray]


def generate_subclass_labels(images: Sequence[np.ndarray], labels: Sequence[np.ndarray], backbone, K: int,
                             *, balanced: bool = True, seed: int = 0, max_points_per_class: int = 20000,
                             max_iters: int = 50, split_background: bool = False) -> SubclassResult:
    """Split every class of the labeled set into feature-space subclasses.

    ``backbone`` is a trained single- or dual-decoder :class:`ModelParams`;
    features come from its MoS decoder.  ``balanced=False`` swaps in plain
    k-means with the same subclass counts.
    """
    from .segnet import extract_features

    labels = [np.asarray(lab) for lab in labels]
    cen = census(labels, K)
    counts = allocate_subclass_counts(cen, split_background=split_background)
    smap = SubclassMap.from_counts(counts)

    need_features = any(k >= 2 for k in counts.values())
    feats = None
    if need_features:
        batch = np.stack([np.asarray(im, dtype=np.float64)[None] if np.ndim(im) == 2 else im for im in images])
        feats = extract_features(backbone, batch)  # N x HW x C
        feats = feats.reshape(-1, feats.shape[-1])
    flat_labels = np.concatenate([lab.ravel() for lab in labels]).astype(np.int64)
    flat_sub = np.zeros_like(flat_labels)

    rng = np.random.default_rng(seed)
    sizes = {}
    for cls in range(K + 1):
        k_c = counts.get(cls, 0)
        if k_c == 0:
            continue
        members = np.flatnonzero(flat_labels == cls)
        base = smap.first_id(cls)
        if k_c == 1 or len(members) == 0:
            flat_sub[members] = base
            sizes[cls] = np.array([len(members)])
            continue
        if len(members) < k_c:
            raise ValueError(f"class {cls} has {len(members)} pixels, fewer than its {k_c} subclasses")
        if len(members) > max_points_per_class:
            sample = np.sort(rng.choice(len(members), max_points_per_class, replace=False))
        else:
            sample = np.arange(len(members))
        pts = feats[members[sample]]
        cseed = int(rng.integers(2 ** 31))
        if balanced:
            res = balanced_kmeans(pts, k_c, seed=cseed, max_iters=max_iters)
        else:
            res = kmeans(pts, k_c, seed=cseed, max_iters=max_iters)
        local = _sq_dists(feats[members], res.centers).argmin(axis=1)
        local[sample] = res.assignment
        flat_sub[members] = base + local
        sizes[cls] = np.bincount(local, minlength=k_c)
        logger.info("class %d: %d pixels -> %d subclasses, sizes %d..%d",
                    cls, len(members), k_c, sizes[cls].min(), sizes[cls].max())

    out, pos = [], 0
    for lab in labels:
        out.append(flat_sub[pos:pos + lab.size].reshape(lab.shape).astype(np.int64))
        pos += lab.size
    return SubclassResult(out, smap, cen, sizes)


def map_to_parent(scs_probs: np.ndarray, smap: SubclassMap, mode: str = "soft-sum") -> np.ndarray:
    """Project subclass probabilities onto parent classes.

    ``soft-sum`` adds the subclass probabilities of each parent; ``hard-argmax``
    one-hot encodes the parent of the most probable subclass.
    """
    axis = scs_probs.ndim - 3
    if scs_probs.shape[axis] != smap.k_sub + 1:
        raise ValueError(f"expected {smap.k_sub + 1} subclass channels, got {scs_probs.shape[axis]}")
    n_parent = smap.K + 1
    parent = np.asarray(smap.parent_of)
    if mode == "soft-sum":
        proj = (np.arange(n_parent)[:, None] == parent[None, :]).astype(np.float64)
        out = np.tensordot(proj, scs_probs, axes=([1], [axis]))
        return np.moveaxis(out, 0, axis)
    if mode == "hard-argmax":
        hard = parent[scs_probs.argmax(axis=axis)]
        onehot = np.arange(n_parent).reshape((n_parent,) + (1,) * 2) == np.expand_dims(hard, axis)
        return onehot.astype(np.float64)
    raise ValueError(f"unknown map mode {mode!r}")
