"""Per-view message-passing encoders mapping node features to a shared
D-dimensional embedding space, plus gated node pooling.

The geometry view folds inverse-distance weights into its neighbor
aggregation; all other views use a plain neighbor mean. Parameters live in a
flat name->array dict shared with the peeling stack; `EncoderParams` is the
structured view of one encoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graphs import GEOMETRY_VIEW, MultiViewSample, ViewGraph


@dataclass
class EncoderParams:
    """Weights of one view's encoder. All maps are plain matrices."""

    in_w: np.ndarray  # F x hidden
    msg_w: list  # per round, hidden x hidden
    upd_w: list  # per round, hidden x hidden
    out_w: np.ndarray  # hidden x D

    @property
    def rounds(self) -> int:
        return len(self.msg_w)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_arrays(
    rng: np.random.Generator,
    view_ids,
    feature_dim: int,
    hidden: int,
    out_dim: int,
    rounds: int,
) -> dict[str, np.ndarray]:
    """Flat named arrays for all per-view encoders, in a stable order."""
    params: dict[str, np.ndarray] = {}
    for vid in view_ids:
        params[f"enc.{vid}.in_w"] = _uniform(rng, feature_dim, (feature_dim, hidden))
        for r in range(rounds):
            params[f"enc.{vid}.r{r}.msg_w"] = _uniform(rng, hidden, (hidden, hidden))
            params[f"enc.{vid}.r{r}.upd_w"] = _uniform(rng, hidden, (hidden, hidden))
        params[f"enc.{vid}.out_w"] = _uniform(rng, hidden, (hidden, out_dim))
    return params


def encoder_params(store: dict, view_id: str, rounds: int) -> EncoderParams:
    """Structured view (arrays or leaf tensors) of one encoder in `store`."""
    return EncoderParams(
        in_w=store[f"enc.{view_id}.in_w"],
        msg_w=[store[f"enc.{view_id}.r{r}.msg_w"] for r in range(rounds)],
        upd_w=[store[f"enc.{view_id}.r{r}.upd_w"] for r in range(rounds)],
        out_w=store[f"enc.{view_id}.out_w"],
    )


def aggregation_matrix(graph: ViewGraph) -> np.ndarray:
    """Row-normalized neighbor weights; zero rows for isolated nodes.

    Geometry view: weight 1/(1+dist) per neighbor before normalization.
    """
    n = graph.n_nodes
    w = np.zeros((n, n), dtype=np.float64)
    use_dist = graph.view_id == GEOMETRY_VIEW and graph.node_positions is not None
    for s, d in graph.edges:
        if use_dist:
            w[s, d] = 1.0 / (
                1.0 + np.linalg.norm(graph.node_positions[s] - graph.node_positions[d])
            )
        else:
            w[s, d] = 1.0
    row = w.sum(axis=1, keepdims=True)
    np.divide(w, row, out=w, where=row > 0)
    return w


def encode_view(graph: ViewGraph, params: EncoderParams) -> np.ndarray:
    """Forward-only single-graph encoding (n x D), no tape."""
    agg = aggregation_matrix(graph)
    h = graph.node_features @ params.in_w
    for msg_w, upd_w in zip(params.msg_w, params.upd_w):
        m = (agg @ h) @ msg_w
        h = np.tanh((h + m) @ upd_w)
    return h @ params.out_w


def pool_nodes(embeddings: Tensor, gate: Tensor, eps: float = 1e-8) -> Tensor:
    """Gated mean over nodes: sum(gate_i * emb_i) / (sum(gate_i) + eps)."""
    n = embeddings.value.shape[0]
    g = ad.reshape(gate, (n, 1))
    num = ad.reduce_sum(ad.mul(g, embeddings), axis=0)
    den = ad.reduce_sum(gate)
    return ad.div(num, den, eps)


# ---------------------------------------------------------------------------
# Batched structures: one block-diagonal system per view across a batch.


@dataclass
class PreparedView:
    features: np.ndarray  # N x F, all samples stacked
    agg: np.ndarray  # N x N, block-diagonal aggregation
    member: np.ndarray  # B x N, 0/1 sample membership
    offsets: list[tuple[int, int]]  # per-sample node ranges


@dataclass
class PreparedBatch:
    view_ids: list[str]
    views: dict[str, PreparedView]
    sample_ids: list[str]
    y: np.ndarray

    @property
    def size(self) -> int:
        return len(self.sample_ids)


def sample_matrices(sample: MultiViewSample, view_ids) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {
        vid: (sample.views[vid].node_features, aggregation_matrix(sample.views[vid]))
        for vid in view_ids
    }


class MatrixCache:
    """Per-sample feature/aggregation matrices, keyed by object identity."""

    def __init__(self):
        self._store: dict[int, tuple[MultiViewSample, dict]] = {}

    def get(self, sample: MultiViewSample, view_ids) -> dict:
        entry = self._store.get(id(sample))
        if entry is not None and entry[0] is sample:
            return entry[1]
        mats = sample_matrices(sample, view_ids)
        self._store[id(sample)] = (sample, mats)
        return mats


def prepare_batch(
    samples: list[MultiViewSample], view_ids, cache: MatrixCache | None = None
) -> PreparedBatch:
    if not samples:
        raise ValueError("empty batch")
    per_sample = [
        cache.get(s, view_ids) if cache is not None else sample_matrices(s, view_ids)
        for s in samples
    ]
    views = {}
    for vid in view_ids:
        sizes = [m[vid][0].shape[0] for m in per_sample]
        total = sum(sizes)
        feats = np.concatenate([m[vid][0] for m in per_sample], axis=0)
        agg = np.zeros((total, total), dtype=np.float64)
        member = np.zeros((len(samples), total), dtype=np.float64)
        offsets = []
        at = 0
        for b, m in enumerate(per_sample):
            n = sizes[b]
            agg[at : at + n, at : at + n] = m[vid][1]
            member[b, at : at + n] = 1.0
            offsets.append((at, at + n))
            at += n
        views[vid] = PreparedView(feats, agg, member, offsets)
    return PreparedBatch(
        view_ids=list(view_ids),
        views=views,
        sample_ids=[s.sample_id for s in samples],
        y=np.array([s.y for s in samples], dtype=np.float64),
    )


def encode_prepared(tape: Tape, view: PreparedView, params: EncoderParams) -> Tensor:
    """Tape version of encode_view over a block-diagonal batch (N x D).

    `params` must hold leaf tensors on `tape` (see `encoder_params`).
    """
    feats = tape.leaf(view.features)
    agg = tape.leaf(view.agg)
    h = ad.matmul(feats, params.in_w)
    for msg_w, upd_w in zip(params.msg_w, params.upd_w):
        m = ad.matmul(ad.matmul(agg, h), msg_w)
        h = ad.tanh(ad.matmul(ad.add(h, m), upd_w))
    return ad.matmul(h, params.out_w)
