"""The causal block stack: per-layer node-wise splitting into causal/trivial
branches, cross-view gated fusion, scalar heads, depth recursion, and node
saliency extraction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders
from .autodiff import Tape, Tensor
from .encoders import MatrixCache, PreparedBatch, init_encoder_arrays, prepare_batch
from .graphs import Batch, MultiViewSample

POOL_EPS = 1e-8


@dataclass
class ModelConfig:
    view_ids: list[str]
    feature_dim: int = 8
    hidden_dim: int = 32
    embed_dim: int = 32
    rounds: int = 2
    depth: int = 3
    tau: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not self.view_ids:
            raise ValueError("at least one view required")


@dataclass
class CausalBlockParams:
    """One peeling block. The splitter is per view; the rest is shared."""

    split_w: dict  # view -> D x 1
    split_b: dict  # view -> (1,)
    gate_c_w: np.ndarray  # (V*D) x V, causal fusion gate
    gate_c_b: np.ndarray
    gate_t_w: np.ndarray  # same machinery, own weights, fed trivial vectors
    gate_t_b: np.ndarray
    head_c_w: np.ndarray  # D x 1
    head_c_b: np.ndarray
    head_t_w: np.ndarray  # D x 1
    head_t_b: np.ndarray
    fwd_w: np.ndarray | None  # D x D hand-off to the next block; None at depth L
    fwd_b: np.ndarray | None


def init_block_arrays(
    rng: np.random.Generator, view_ids, embed_dim: int, depth: int
) -> dict[str, np.ndarray]:
    V, D = len(view_ids), embed_dim

    def u(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params: dict[str, np.ndarray] = {}
    for layer in range(depth):
        p = f"block{layer}"
        for vid in view_ids:
            params[f"{p}.split.{vid}.w"] = u(D, (D, 1))
            params[f"{p}.split.{vid}.b"] = np.zeros(1)
        params[f"{p}.gate_c.w"] = u(V * D, (V * D, V))
        params[f"{p}.gate_c.b"] = np.zeros(V)
        params[f"{p}.gate_t.w"] = u(V * D, (V * D, V))
        params[f"{p}.gate_t.b"] = np.zeros(V)
        params[f"{p}.head_c.w"] = u(D, (D, 1))
        params[f"{p}.head_c.b"] = np.zeros(1)
        params[f"{p}.head_t.w"] = u(D, (D, 1))
        params[f"{p}.head_t.b"] = np.zeros(1)
        if layer < depth - 1:
            params[f"{p}.fwd.w"] = u(D, (D, D))
            params[f"{p}.fwd.b"] = np.zeros(D)
    return params


def block_params(store: dict, layer: int, view_ids, depth: int) -> CausalBlockParams:
    p = f"block{layer}"
    last = layer == depth - 1
    return CausalBlockParams(
        split_w={v: store[f"{p}.split.{v}.w"] for v in view_ids},
        split_b={v: store[f"{p}.split.{v}.b"] for v in view_ids},
        gate_c_w=store[f"{p}.gate_c.w"],
        gate_c_b=store[f"{p}.gate_c.b"],
        gate_t_w=store[f"{p}.gate_t.w"],
        gate_t_b=store[f"{p}.gate_t.b"],
        head_c_w=store[f"{p}.head_c.w"],
        head_c_b=store[f"{p}.head_c.b"],
        head_t_w=store[f"{p}.head_t.w"],
        head_t_b=store[f"{p}.head_t.b"],
        fwd_w=None if last else store[f"{p}.fwd.w"],
        fwd_b=None if last else store[f"{p}.fwd.b"],
    )


@dataclass
class PeelTrace:
    """Everything one forward pass exposes for losses, analysis and saliency."""

    C: Tensor  # B x L causal scalars
    T: Tensor  # B x L trivial scalars
    y_c_star: Tensor  # (B,), last column of C
    t_sum: Tensor  # (B,), row sum of T
    gate_weights: list[Tensor]  # per layer, B x V simplex rows (causal fusion)
    alphas: list[dict[str, Tensor]]  # per layer, view -> (N_v,) causal gates
    causal_pooled: list[dict[str, Tensor]]  # per layer, view -> B x D
    view_ids: list[str]
    sample_ids: list[str]
    offsets: dict[str, list[tuple[int, int]]]  # view -> per-sample node ranges

    @property
    def depth(self) -> int:
        return self.C.value.shape[1]

    @property
    def size(self) -> int:
        return self.C.value.shape[0]


@dataclass
class SaliencyMap:
    layer: int  # 1-based layer the gates were read from
    scores: dict[str, dict[str, np.ndarray]]  # sample_id -> view -> (n,) in [0, 1]


def split_view(
    embeddings: Tensor, split_w: Tensor, split_b: Tensor, member: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Node-wise soft split of one view: alpha gates plus pooled branches.

    Returns (z_causal B x D, z_trivial B x D, alpha (N,)).
    """
    logits = ad.add(ad.matmul(embeddings, split_w), split_b)  # N x 1
    alpha = ad.sigmoid(logits)
    one_minus = 1.0 - alpha
    z_c = _pool(member, alpha, embeddings)
    z_t = _pool(member, one_minus, embeddings)
    n = embeddings.value.shape[0]
    return z_c, z_t, ad.reshape(alpha, (n,))


def _pool(member: Tensor, gate_col: Tensor, embeddings: Tensor) -> Tensor:
    # member: B x N selector; gate_col: N x 1; embeddings: N x D
    num = ad.matmul(member, ad.mul(gate_col, embeddings))  # B x D
    den = ad.matmul(member, gate_col)  # B x 1
    return ad.div(num, den, POOL_EPS)


def fuse(z_views: list[Tensor], gate_w: Tensor, gate_b: Tensor, tau: float) -> tuple[Tensor, Tensor]:
    """Softmax-gated convex combination across views.

    Returns (fused B x D, weights B x V with rows on the simplex).
    """
    stacked = ad.concat(z_views, axis=1) if len(z_views) > 1 else z_views[0]
    logits = ad.add(ad.matmul(stacked, gate_w), gate_b)  # B x V
    w = ad.softmax(logits, axis=1, temperature=tau)
    B = z_views[0].value.shape[0]
    fused = None
    for v, z in enumerate(z_views):
        contrib = ad.mul(ad.reshape(ad.column(w, v), (B, 1)), z)
        fused = contrib if fused is None else ad.add(fused, contrib)
    return fused, w


class Model:
    """Per-view encoders plus a stack of causal blocks over a flat param dict."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.SeedSequence = 0) -> "Model":
        rng = np.random.default_rng(seed)
        params = init_encoder_arrays(
            rng,
            config.view_ids,
            config.feature_dim,
            config.hidden_dim,
            config.embed_dim,
            config.rounds,
        )
        params.update(init_block_arrays(rng, config.view_ids, config.embed_dim, config.depth))
        return cls(config, params)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k in self.params:
            if k not in params:
                raise KeyError(f"missing parameter '{k}'")
            if params[k].shape != self.params[k].shape:
                raise ValueError(f"parameter '{k}' shape mismatch")
        self.params = {k: np.asarray(params[k], dtype=np.float64).copy() for k in self.params}

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.leaf(arr) for name, arr in self.params.items()}

    def forward(
        self,
        tape: Tape,
        samples: list[MultiViewSample],
        cache: MatrixCache | None = None,
        leaves: dict[str, Tensor] | None = None,
    ) -> PeelTrace:
        prepared = prepare_batch(samples, self.config.view_ids, cache)
        return self.forward_prepared(tape, prepared, leaves)

    def forward_prepared(
        self, tape: Tape, prepared: PreparedBatch, leaves: dict[str, Tensor] | None = None
    ) -> PeelTrace:
        cfg = self.config
        if leaves is None:
            leaves = self.leaves(tape)
        B = prepared.size

        H = {
            vid: encoders.encode_prepared(
                tape, prepared.views[vid], encoders.encoder_params(leaves, vid, cfg.rounds)
            )
            for vid in cfg.view_ids
        }
        member = {vid: tape.leaf(prepared.views[vid].member) for vid in cfg.view_ids}

        c_cols: list[Tensor] = []
        t_cols: list[Tensor] = []
        gate_weights: list[Tensor] = []
        alphas: list[dict[str, Tensor]] = []
        causal_pooled: list[dict[str, Tensor]] = []

        for layer in range(cfg.depth):
            bp = block_params(leaves, layer, cfg.view_ids, cfg.depth)
            z_c, z_t, alpha_layer = {}, {}, {}
            for vid in cfg.view_ids:
                zc, zt, alpha = split_view(
                    H[vid], bp.split_w[vid], bp.split_b[vid], member[vid]
                )
                z_c[vid], z_t[vid], alpha_layer[vid] = zc, zt, alpha
            zc_list = [z_c[vid] for vid in cfg.view_ids]
            zt_list = [z_t[vid] for vid in cfg.view_ids]
            z_fuse, w = fuse(zc_list, bp.gate_c_w, bp.gate_c_b, cfg.tau)
            z_fuse_t, _ = fuse(zt_list, bp.gate_t_w, bp.gate_t_b, cfg.tau)

            c_l = ad.reshape(ad.add(ad.matmul(z_fuse, bp.head_c_w), bp.head_c_b), (B,))
            t_l = ad.reshape(ad.add(ad.matmul(z_fuse_t, bp.head_t_w), bp.head_t_b), (B,))
            c_cols.append(c_l)
            t_cols.append(t_l)
            gate_weights.append(w)
            alphas.append(alpha_layer)
            causal_pooled.append(z_c)

            if bp.fwd_w is not None:
                for vid in cfg.view_ids:
                    n = H[vid].value.shape[0]
                    gated = ad.mul(ad.reshape(alpha_layer[vid], (n, 1)), H[vid])
                    H[vid] = ad.tanh(ad.add(ad.matmul(gated, bp.fwd_w), bp.fwd_b))

        C = ad.concat([ad.reshape(c, (B, 1)) for c in c_cols], axis=1)
        T = ad.concat([ad.reshape(t, (B, 1)) for t in t_cols], axis=1)
        return PeelTrace(
            C=C,
            T=T,
            y_c_star=ad.column(C, cfg.depth - 1),
            t_sum=ad.reduce_sum(T, axis=1),
            gate_weights=gate_weights,
            alphas=alphas,
            causal_pooled=causal_pooled,
            view_ids=list(cfg.view_ids),
            sample_ids=list(prepared.sample_ids),
            offsets={vid: prepared.views[vid].offsets for vid in cfg.view_ids},
        )


def forward_stack(batch: Batch, model: Model, tape: Tape | None = None) -> PeelTrace:
    """Run the block stack over a batch and return the populated trace."""
    return model.forward(tape if tape is not None else Tape(), batch.samples)


def extract_saliency(trace: PeelTrace, layer: int | None = None) -> SaliencyMap:
    """Per-view, per-node causal gates at `layer` (1-based; default: last)."""
    L = trace.depth
    if layer is None:
        layer = L
    if not (1 <= layer <= L):
        raise ValueError(f"layer {layer} out of range [1, {L}]")
    per_layer = trace.alphas[layer - 1]
    scores: dict[str, dict[str, np.ndarray]] = {}
    for i, sid in enumerate(trace.sample_ids):
        scores[sid] = {}
        for vid in trace.view_ids:
            start, end = trace.offsets[vid][i]
            scores[sid][vid] = per_layer[vid].value[start:end].copy()
    return SaliencyMap(layer=layer, scores=scores)
