"""Multi-view graph samples: data model, JSONL persistence, synthetic generator,
and mini-batch assembly with batch-level context features."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GEOMETRY_VIEW = "geom"
VIEW_IDS = ("topo", "feat", "geom")

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class ViewGraph:
    """One view of a sample: node features, undirected edges, optional 3-D positions.

    Edges are normalized to hold both directions of every undirected edge,
    deduplicated, sorted; self-loops appear once.
    """

    view_id: str
    node_features: np.ndarray  # n x F
    edges: list[tuple[int, int]]
    node_positions: np.ndarray | None = None  # n x 3, geometry view only

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def validate(self) -> None:
        n = self.n_nodes
        for s, d in self.edges:
            if not (0 <= s < n and 0 <= d < n):
                raise DatasetError(f"edge endpoint out of range: ({s}, {d}) with n={n}")
        if self.view_id == GEOMETRY_VIEW:
            if self.node_positions is None:
                raise DatasetError("geometry view requires node positions")
            if self.node_positions.shape != (n, 3):
                raise DatasetError(
                    f"positions shape {self.node_positions.shape} != ({n}, 3)"
                )
        elif self.node_positions is not None:
            raise DatasetError(f"view '{self.view_id}' must not carry positions")


def normalize_edges(pairs) -> list[tuple[int, int]]:
    """Both directions, deduplicated, sorted; a self-loop is kept once."""
    out = set()
    for s, d in pairs:
        s, d = int(s), int(d)
        out.add((s, d))
        out.add((d, s))
    return sorted(out)


@dataclass
class MultiViewSample:
    sample_id: str
    views: dict[str, ViewGraph]
    y: float
    planted_c: float | None = None
    planted_noise: float | None = None
    motif_nodes: list[int] | None = None  # synthetic only; drives saliency checks

    def validate(self) -> None:
        for vid, vg in self.views.items():
            if vid != vg.view_id:
                raise DatasetError(f"view key '{vid}' != view_id '{vg.view_id}'")
            vg.validate()


@dataclass
class Batch:
    samples: list[MultiViewSample]
    context: np.ndarray  # q, length B
    batch_id: int

    def __post_init__(self):
        if len(self.samples) < 2:
            raise DatasetError("a batch needs at least 2 samples")

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.y for s in self.samples], dtype=np.float64)


@dataclass
class SynthScenario:
    """Generator knobs for the planted additive label model y = theta*c(x) + eta."""

    theta: float = 1.0
    noise_sd: float = 0.75
    n_nodes_min: int = 8
    n_nodes_max: int = 14
    motif_size: int = 3
    context_strength: float = 1.0
    n_views: int = 3
    feature_dim: int = 8
    seed: int = 0
    motif_boost: float = 2.0

    def __post_init__(self):
        if self.noise_sd < 0:
            raise DatasetError("noise_sd must be >= 0")
        if self.motif_size > self.n_nodes_min:
            raise DatasetError("motif_size must be <= minimum node count")
        if not (2 <= self.n_views <= 3):
            raise DatasetError("n_views must be 2 or 3")

    @property
    def view_ids(self) -> tuple[str, ...]:
        return VIEW_IDS[: self.n_views]


# ---------------------------------------------------------------------------
# JSONL persistence
#
# Schema per line:
#   {"id": str, "y": float, "c": float|null,
#    "views": {"<view_id>": {"x": [[...]], "edges": [[s,d],...], "pos": [[x,y,z],...]|null}}}
# plus optional "eta" (planted noise) and "motif" (node ids) for synthetic data.


def save_dataset(samples: list[MultiViewSample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.sample_id,
                "y": s.y,
                "c": s.planted_c,
                "views": {
                    vid: {
                        "x": vg.node_features.tolist(),
                        "edges": [[a, b] for a, b in vg.edges],
                        "pos": None
                        if vg.node_positions is None
                        else vg.node_positions.tolist(),
                    }
                    for vid, vg in sorted(s.views.items())
                },
            }
            if s.planted_noise is not None:
                record["eta"] = s.planted_noise
            if s.motif_nodes is not None:
                record["motif"] = list(s.motif_nodes)
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[MultiViewSample]:
    path = Path(path)
    samples: list[MultiViewSample] = []
    feature_dims: dict[str, int] = {}
    view_set: set[str] | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                sample = _sample_from_record(record)
                sample.validate()
            except (DatasetError, KeyError, TypeError) as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
            if view_set is None:
                view_set = set(sample.views)
            elif set(sample.views) != view_set:
                missing = view_set.symmetric_difference(sample.views)
                raise DatasetError(f"line {lineno}: inconsistent views {sorted(missing)}")
            for vid, vg in sample.views.items():
                f = vg.node_features.shape[1]
                if feature_dims.setdefault(vid, f) != f:
                    raise DatasetError(
                        f"line {lineno}: inconsistent feature_dim for view '{vid}':"
                        f" {f} != {feature_dims[vid]}"
                    )
            samples.append(sample)
    return samples


def _sample_from_record(record: dict) -> MultiViewSample:
    views = {}
    for vid, v in record["views"].items():
        x = np.asarray(v["x"], dtype=np.float64)
        if x.ndim != 2:
            raise DatasetError(f"view '{vid}': feature matrix must be 2-D")
        pos = v.get("pos")
        views[vid] = ViewGraph(
            view_id=vid,
            node_features=x,
            edges=normalize_edges(v["edges"]),
            node_positions=None if pos is None else np.asarray(pos, dtype=np.float64),
        )
    c = record.get("c")
    eta = record.get("eta")
    motif = record.get("motif")
    return MultiViewSample(
        sample_id=str(record["id"]),
        views=views,
        y=float(record["y"]),
        planted_c=None if c is None else float(c),
        planted_noise=None if eta is None else float(eta),
        motif_nodes=None if motif is None else [int(i) for i in motif],
    )


def samples_equal(a: MultiViewSample, b: MultiViewSample) -> bool:
    if (a.sample_id, a.y, a.planted_c, a.planted_noise, a.motif_nodes) != (
        b.sample_id,
        b.y,
        b.planted_c,
        b.planted_noise,
        b.motif_nodes,
    ):
        return False
    if set(a.views) != set(b.views):
        return False
    for vid in a.views:
        va, vb = a.views[vid], b.views[vid]
        if va.edges != vb.edges:
            return False
        if not np.array_equal(va.node_features, vb.node_features):
            return False
        if (va.node_positions is None) != (vb.node_positions is None):
            return False
        if va.node_positions is not None and not np.array_equal(
            va.node_positions, vb.node_positions
        ):
            return False
    return True


# ---------------------------------------------------------------------------
# Synthetic generator


def _random_graph_edges(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    # Erdos-Renyi with p = 2 ln(n) / n: connected with high probability.
    p = min(1.0, 2.0 * math.log(max(n, 2)) / n)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                pairs.append((i, j))
    return normalize_edges(pairs)


def generate_synthetic(scenario: SynthScenario, n: int) -> list[MultiViewSample]:
    """Plant y = theta*c(x) + eta where c(x) is the standardized mean of one
    feature coordinate over a motif node subset.

    View 'topo' carries the raw graph; 'feat' a feature-column-permuted copy;
    'geom' adds random unit-ball positions.
    """
    if n < 2:
        raise DatasetError("need at least 2 samples")
    if scenario.motif_size == 0 and scenario.theta != 0.0:
        raise DatasetError("degenerate scenario: motif_size 0 with theta != 0")
    rng = np.random.default_rng(np.random.SeedSequence(scenario.seed))
    F = scenario.feature_dim
    col_perm = rng.permutation(F)  # one permutation per dataset

    raw: list[dict] = []
    c_raw = np.empty(n, dtype=np.float64)
    for i in range(n):
        n_nodes = int(rng.integers(scenario.n_nodes_min, scenario.n_nodes_max + 1))
        edges = _random_graph_edges(rng, n_nodes)
        x = rng.normal(0.0, 1.0, size=(n_nodes, F))
        motif = np.sort(rng.choice(n_nodes, size=scenario.motif_size, replace=False))
        x[motif, 0] += scenario.motif_boost
        c_raw[i] = x[motif, 0].mean() if scenario.motif_size else 0.0
        pos = _unit_ball(rng, n_nodes)
        raw.append({"edges": edges, "x": x, "motif": motif, "pos": pos})

    sd = c_raw.std()
    if scenario.motif_size and sd == 0.0:
        raise DatasetError("degenerate scenario: planted signal has zero variance")
    c_std = (c_raw - c_raw.mean()) / sd if scenario.motif_size else c_raw
    eta = rng.normal(0.0, scenario.noise_sd, size=n) if scenario.noise_sd > 0 else np.zeros(n)

    samples = []
    for i, r in enumerate(raw):
        c_i = float(c_std[i])
        eta_i = float(eta[i])
        y_i = scenario.theta * c_i + eta_i
        views = {"topo": ViewGraph("topo", r["x"], r["edges"])}
        if scenario.n_views >= 2:
            views["feat"] = ViewGraph("feat", r["x"][:, col_perm].copy(), list(r["edges"]))
        if scenario.n_views >= 3:
            views["geom"] = ViewGraph("geom", r["x"].copy(), list(r["edges"]), r["pos"])
        samples.append(
            MultiViewSample(
                sample_id=f"s{i:05d}",
                views=views,
                y=y_i,
                planted_c=c_i,
                planted_noise=eta_i,
                motif_nodes=[int(m) for m in r["motif"]],
            )
        )
    return samples


def _unit_ball(rng: np.random.Generator, n: int) -> np.ndarray:
    pos = rng.normal(size=(n, 3))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    return pos * rng.random(size=(n, 1)) ** (1.0 / 3.0)


# ---------------------------------------------------------------------------
# Batch assembly


def partition_indices(
    n: int,
    batch_size: int,
    shuffle: bool = False,
    seed: int | np.random.SeedSequence = 0,
) -> list[np.ndarray]:
    """Index groups covering 0..n-1 exactly once; a trailing remainder of
    size 1 is merged into the previous group. Pure function of `seed`."""
    if batch_size < 2:
        raise DatasetError("batch_size must be >= 2")
    if n < 2:
        raise DatasetError("dataset must hold at least 2 samples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n) if shuffle else np.arange(n)
    groups = [order[b : b + batch_size] for b in range(0, n, batch_size)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        groups[-2] = np.concatenate([groups[-2], groups[-1]])
        groups.pop()
    return groups


def derive_seed(seed: int | np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """A child seed sequence, distinct per `key`, reproducible from `seed`."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(
            entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key)
        )
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))


def assemble_batches(
    dataset: list[MultiViewSample],
    batch_size: int,
    shuffle: bool = False,
    seed: int | np.random.SeedSequence = 0,
    context_strength: float = 0.0,
) -> list[Batch]:
    """Partition the dataset into batches of `batch_size`.

    Each batch's context q_i is the leave-one-out mean of the other samples'
    labels plus Gaussian noise scaled by `context_strength`. The permutation
    and the context noise are pure functions of `seed`.
    """
    groups = partition_indices(len(dataset), batch_size, shuffle=shuffle, seed=seed)
    noise_rng = np.random.default_rng(derive_seed(seed, 1))
    batches = []
    for bid, idxs in enumerate(groups):
        members = [dataset[int(i)] for i in idxs]
        y = np.array([s.y for s in members], dtype=np.float64)
        b = len(members)
        loo_mean = (y.sum() - y) / (b - 1)
        q = loo_mean + context_strength * noise_rng.normal(0.0, 1.0, size=b)
        batches.append(Batch(samples=members, context=q, batch_id=bid))
    return batches


def split_dataset(
    dataset: list[MultiViewSample], fraction: float, seed: int | np.random.SeedSequence
) -> tuple[list[MultiViewSample], list[MultiViewSample]]:
    """Deterministic (rest, held_out) split; held_out gets `fraction` of samples."""
    if not (0.0 < fraction < 1.0):
        raise DatasetError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_held = max(1, int(round(fraction * len(dataset))))
    held = sorted(int(i) for i in order[:n_held])
    rest = sorted(int(i) for i in order[n_held:])
    return [dataset[i] for i in rest], [dataset[i] for i in held]
