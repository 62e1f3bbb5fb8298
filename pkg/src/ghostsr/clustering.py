"""Intrinsic-filter selection by k-means over vectorized conv filters.

A pre-trained layer's filters are flattened to rows, clustered into
(1 - ghost_ratio) * c_out groups, and the member nearest each centroid is
kept as a real convolution filter.  Every other filter becomes a ghost
channel shifted from its cluster's keeper.  The resulting plan (intrinsic
indices, ghost assignment, channel permutation) is written to a plain-text
file consumed by the conversion step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FilterClustering:
    """k-means result over filter rows: labels, centroids, objective trace."""

    points: np.ndarray
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def vectorize_filters(weight: np.ndarray) -> np.ndarray:
    """Flatten (c_out, c_in, s, s) weights to (c_out, c_in*s*s) rows.

    Row i is filter i in (c_in, s, s) row-major order, so the reshape is
    invertible.
    """
    w = np.asarray(weight)
    if w.ndim != 4:
        raise ValueError(f"expected rank-4 weight, got ndim={w.ndim}")
    return w.reshape(w.shape[0], -1)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared euclidean distances, computed stably in float64
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _sse(points, centroids, labels) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center: pick the first unused
            unused = [i for i in range(n) if i not in chosen]
            nxt = unused[0]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _update_with_repair(points, labels, k):
    """Recompute centroids; repair empty clusters by stealing the point
    farthest from its own centroid (donor clusters must keep >= 1 member)."""
    n, dim = points.shape
    labels = labels.copy()
    while True:
        centroids = np.zeros((k, dim), dtype=points.dtype)
        counts = np.bincount(labels, minlength=k)
        np.add.at(centroids, labels, points)
        nonzero = counts > 0
        centroids[nonzero] /= counts[nonzero, None]
        empties = np.flatnonzero(~nonzero)
        if empties.size == 0:
            return centroids, labels
        empty = int(empties[0])
        own_d2 = ((points - centroids[labels]) ** 2).sum(axis=1)
        own_d2[counts[labels] <= 1] = -np.inf
        donor = int(np.argmax(own_d2))
        labels[donor] = empty


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 50,
) -> FilterClustering:
    """Lloyd iterations from k-means++ seeding.

    Terminates on an assignment fixpoint or after ``max_iters`` iterations.
    The recorded objective history is non-increasing; empty clusters are
    repaired so the partition always has exactly k non-empty groups.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")

    centroids = _kmeanspp_init(points, k, rng)
    labels = None
    history: list[float] = []
    for _ in range(max_iters):
        new_labels = _sq_dists(points, centroids).argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids, labels = _update_with_repair(points, labels, k)
        history.append(_sse(points, centroids, labels))
    return FilterClustering(
        points=points,
        k=k,
        labels=labels,
        centroids=centroids,
        objective=history[-1],
        history=history,
    )


def select_intrinsic(clustering: FilterClustering) -> list[int]:
    """Pick one keeper per cluster, sorted ascending.

    Singleton clusters keep their only member; larger clusters keep the
    member nearest the centroid, ties broken by the smallest filter index.
    """
    keepers = []
    for c in range(clustering.k):
        members = clustering.members(c)
        if members.size == 0:
            raise ValueError(f"cluster {c} is empty; partition invalid")
        if members.size == 1:
            keepers.append(int(members[0]))
            continue
        d2 = ((clustering.points[members] - clustering.centroids[c]) ** 2).sum(axis=1)
        keepers.append(int(members[np.argmin(d2)]))
    return sorted(keepers)


@dataclass
class LayerPlan:
    """Conversion plan for one layer.

    ``permutation`` maps new channel position -> original filter index; the
    new order is the intrinsic block (ascending original index) followed by
    the ghost block (ascending original index).  ``assignment`` maps each
    ghost output position to the position of its source inside the
    intrinsic block.
    """

    intrinsic: list[int]
    assignment: dict[int, int]
    permutation: list[int]

    @property
    def c_out(self) -> int:
        return len(self.permutation)

    def inverse_permutation(self) -> np.ndarray:
        inv = np.empty(len(self.permutation), dtype=int)
        inv[np.asarray(self.permutation)] = np.arange(len(self.permutation))
        return inv


def build_ghost_assignment(clustering: FilterClustering) -> LayerPlan:
    """Derive the ghost wiring from a filter clustering.

    Every non-keeper filter becomes a ghost channel sourced from its own
    cluster's keeper.
    """
    intrinsic = select_intrinsic(clustering)
    pos_of_keeper = {orig: pos for pos, orig in enumerate(intrinsic)}
    keeper_of_cluster = {}
    for orig in intrinsic:
        keeper_of_cluster[int(clustering.labels[orig])] = orig

    n = clustering.points.shape[0]
    ghosts = [i for i in range(n) if i not in pos_of_keeper]
    assignment = {}
    for j, orig in enumerate(ghosts):
        keeper = keeper_of_cluster[int(clustering.labels[orig])]
        assignment[len(intrinsic) + j] = pos_of_keeper[keeper]
    return LayerPlan(
        intrinsic=intrinsic,
        assignment=assignment,
        permutation=intrinsic + ghosts,
    )


def scratch_assignment(c_out: int, ghost_ratio: float) -> LayerPlan:
    """From-scratch wiring: ghost channel j sources intrinsic channel j mod k."""
    n_ghost = ghost_ratio * c_out
    if abs(n_ghost - round(n_ghost)) > 1e-9:
        raise ValueError(
            f"ghost ratio {ghost_ratio} does not split {c_out} channels evenly"
        )
    n_ghost = int(round(n_ghost))
    k = c_out - n_ghost
    assignment = {k + j: j % k for j in range(n_ghost)} if n_ghost else {}
    return LayerPlan(
        intrinsic=list(range(k)),
        assignment=assignment,
        permutation=list(range(c_out)),
    )


def plan_layer_from_weight(
    weight: np.ndarray, ghost_ratio: float, rng: np.random.Generator, max_iters: int = 50
) -> LayerPlan:
    """Cluster one layer's filters and derive its conversion plan."""
    c_out = weight.shape[0]
    n_ghost = ghost_ratio * c_out
    if abs(n_ghost - round(n_ghost)) > 1e-9:
        raise ValueError(
            f"ghost ratio {ghost_ratio} does not split {c_out} channels evenly"
        )
    k = c_out - int(round(n_ghost))
    clustering = kmeans(vectorize_filters(weight), k, rng, max_iters=max_iters)
    return build_ghost_assignment(clustering)


# ---------------------------------------------------------------------------
# plan file format: plain structured text, one block per layer


PLAN_HEADER = "# ghostsr-plan v1"


def write_plan(path, layers: dict[str, LayerPlan], meta: dict | None = None) -> None:
    lines = [PLAN_HEADER]
    for key, val in sorted((meta or {}).items()):
        lines.append(f"# {key}: {val}")
    for name, plan in layers.items():
        lines.append(f"layer {name}")
        lines.append("  intrinsic " + " ".join(str(i) for i in plan.intrinsic))
        lines.append(
            "  assignment "
            + " ".join(f"{c1}:{c2}" for c1, c2 in sorted(plan.assignment.items()))
        )
        lines.append("  permutation " + " ".join(str(i) for i in plan.permutation))
        lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_plan(path) -> dict[str, LayerPlan]:
    layers: dict[str, LayerPlan] = {}
    name = None
    fields: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != PLAN_HEADER:
            raise ValueError(f"not a ghostsr plan file: {path}")
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("layer "):
                name = line[len("layer ") :].strip()
                fields = {}
            elif line == "end":
                if name is None:
                    raise ValueError("plan 'end' without a layer")
                intrinsic = [int(t) for t in fields.get("intrinsic", "").split()]
                assignment = {}
                for tok in fields.get("assignment", "").split():
                    c1, c2 = tok.split(":")
                    assignment[int(c1)] = int(c2)
                permutation = [int(t) for t in fields.get("permutation", "").split()]
                layers[name] = LayerPlan(intrinsic, assignment, permutation)
                name = None
            else:
                key, _, rest = line.partition(" ")
                fields[key] = rest
    if name is not None:
        raise ValueError(f"plan file truncated inside layer {name!r}")
    return layers
