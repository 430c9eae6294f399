"""Training objective: batch-centered Pearson alignment against a depth
schedule, monotonicity hinge, stop-gradient residual fit for the trivial
branch, prediction loss, optional cross-view consistency, and their weighted
total.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .peeling import PeelTrace


@dataclass
class ObjectiveConfig:
    rho_min: float = 0.5
    rho_max: float = 0.8
    gamma: float = 0.0  # monotonicity hinge margin
    eps: float = 1e-8  # correlation denominator stabilizer
    lambda_caus: float = 1.0
    lambda_mono: float = 0.5
    lambda_unif: float = 1.0
    lambda_cons: float = 0.0
    disable_split: bool = False  # plain regression: all auxiliary terms off
    disable_schedule: bool = False  # correlation loss off
    disable_trivial: bool = False  # predict from the causal readout alone
    disable_mono: bool = False
    average_causal_readout: bool = False  # mean over depth instead of last layer

    def __post_init__(self):
        if self.rho_min > self.rho_max:
            raise ValueError("rho_min must be <= rho_max")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        for name in ("lambda_caus", "lambda_mono", "lambda_unif", "lambda_cons"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def effective_lambdas(self) -> tuple[float, float, float, float]:
        """(caus, mono, unif, cons) after applying ablation flags."""
        lc = 0.0 if (self.disable_split or self.disable_schedule) else self.lambda_caus
        lm = 0.0 if (self.disable_split or self.disable_mono) else self.lambda_mono
        lu = 0.0 if (self.disable_split or self.disable_trivial) else self.lambda_unif
        lk = 0.0 if self.disable_split else self.lambda_cons
        return lc, lm, lu, lk


@dataclass
class LossBreakdown:
    pred: float
    corr: float
    mono: float
    triv: float
    cons: float
    total: float
    corr_per_layer: list[float]
    targets: list[float]
    lambdas: dict[str, float] = field(default_factory=dict)
    node: Tensor | None = None  # tape node of `total`, for backward

    def to_dict(self) -> dict:
        return {
            "pred": self.pred,
            "corr": self.corr,
            "mono": self.mono,
            "triv": self.triv,
            "cons": self.cons,
            "total": self.total,
            "corr_per_layer": self.corr_per_layer,
            "targets": self.targets,
            "lambdas": self.lambdas,
        }


def rho_schedule(layer: int, depth: int, rho_min: float, rho_max: float) -> float:
    """Linear target correlation for 1-based `layer`; a single layer faces rho_max."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not (1 <= layer <= depth):
        raise ValueError(f"layer {layer} out of range [1, {depth}]")
    if depth == 1:
        return rho_max
    return rho_min + (layer - 1) / (depth - 1) * (rho_max - rho_min)


def schedule_targets(depth: int, rho_min: float, rho_max: float) -> list[float]:
    return [rho_schedule(l, depth, rho_min, rho_max) for l in range(1, depth + 1)]


def pearson_batch(c: Tensor, y: Tensor, eps: float) -> Tensor:
    """Batch-centered Pearson correlation with additive denominator stabilizer.

    Constant inputs give 0 (zero numerator) rather than an error.
    """
    if c.value.ndim != 1 or y.value.ndim != 1:
        raise ValueError("pearson_batch expects 1-D inputs")
    if c.value.shape[0] < 2:
        raise ValueError("pearson_batch needs at least 2 entries")
    c_cent = ad.sub(c, ad.reduce_mean(c))
    y_cent = ad.sub(y, ad.reduce_mean(y))
    num = ad.reduce_sum(ad.mul(c_cent, y_cent))
    den = ad.mul(
        ad.sqrt(ad.reduce_sum(ad.square(c_cent))),
        ad.sqrt(ad.reduce_sum(ad.square(y_cent))),
    )
    return ad.div(num, den, eps)


def pearson_np(c: np.ndarray, y: np.ndarray, eps: float = 1e-8) -> float:
    """Numpy twin of `pearson_batch` (same centering and stabilizer)."""
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if c.shape[0] < 2:
        raise ValueError("pearson needs at least 2 entries")
    cc = c - c.mean()
    yc = y - y.mean()
    num = float(cc @ yc)
    den = float(np.linalg.norm(cc) * np.linalg.norm(yc)) + eps
    if den == 0.0:
        return 0.0
    return num / den


def mse(a: Tensor, b: Tensor) -> Tensor:
    return ad.reduce_mean(ad.square(ad.sub(a, b)))


def corr_loss(
    C: Tensor, y: Tensor, targets: list[float], eps: float
) -> tuple[Tensor, list[Tensor]]:
    """Mean squared deviation of per-layer batch correlations from their targets.

    Returns the loss node and the per-layer correlation nodes.
    """
    depth = C.value.shape[1]
    if len(targets) != depth:
        raise ValueError("one target per layer required")
    corrs = [pearson_batch(ad.column(C, l), y, eps) for l in range(depth)]
    total = None
    for corr, rho in zip(corrs, targets):
        dev = ad.square(ad.sub(corr, corr.tape.leaf(rho)))
        total = dev if total is None else ad.add(total, dev)
    return ad.div(total, total.tape.leaf(float(depth))), corrs


def mono_loss(corrs: list[Tensor], gamma: float) -> Tensor:
    """Hinge penalty on correlation decreases between adjacent layers."""
    tape = corrs[0].tape
    if len(corrs) < 2:
        return tape.leaf(0.0)
    total = None
    for a, b in zip(corrs[:-1], corrs[1:]):
        body = ad.add(ad.sub(a, b), tape.leaf(gamma))
        term = ad.clamp_min(body, 0.0)
        total = term if total is None else ad.add(total, term)
    return ad.div(total, tape.leaf(float(len(corrs) - 1)))


def triv_loss(t_sum: Tensor, y: Tensor, y_c_star: Tensor) -> Tensor:
    """MSE of the accumulated trivial scalars against the detached residual."""
    residual = ad.sub(y, ad.stop_gradient(y_c_star))
    return mse(t_sum, residual)


def consistency_loss(z_views: list[Tensor], eps: float = 1e-8) -> Tensor:
    """Mean over view pairs of (1 - cosine similarity), averaged over the batch."""
    tape = z_views[0].tape
    if len(z_views) < 2:
        return tape.leaf(0.0)
    pair_terms = []
    for i in range(len(z_views)):
        for j in range(i + 1, len(z_views)):
            za, zb = z_views[i], z_views[j]
            num = ad.reduce_sum(ad.mul(za, zb), axis=1)  # (B,)
            na = ad.sqrt(ad.reduce_sum(ad.square(za), axis=1))
            nb = ad.sqrt(ad.reduce_sum(ad.square(zb), axis=1))
            cos = ad.div(num, ad.mul(na, nb), eps)
            pair_terms.append(ad.reduce_mean(ad.sub(tape.leaf(1.0), cos)))
    total = pair_terms[0]
    for term in pair_terms[1:]:
        total = ad.add(total, term)
    return ad.div(total, tape.leaf(float(len(pair_terms))))


def causal_readout(trace: PeelTrace, config: ObjectiveConfig) -> Tensor:
    if config.average_causal_readout:
        return ad.reduce_mean(trace.C, axis=1)
    return trace.y_c_star


def predictions(trace: PeelTrace, config: ObjectiveConfig) -> Tensor:
    """y_hat = causal readout plus accumulated trivial correction."""
    readout = causal_readout(trace, config)
    if config.disable_trivial:
        return readout
    return ad.add(readout, trace.t_sum)


def predictions_np(C: np.ndarray, T: np.ndarray, config: ObjectiveConfig) -> np.ndarray:
    readout = C.mean(axis=1) if config.average_causal_readout else C[:, -1]
    if config.disable_trivial:
        return readout
    return readout + T.sum(axis=1)


def total_loss(trace: PeelTrace, y: np.ndarray, config: ObjectiveConfig) -> LossBreakdown:
    """All loss terms and their weighted total (tape node kept on `.node`).

    The breakdown satisfies, bitwise:
    total == pred + lc*corr + lm*mono + lu*triv + lk*cons
    with the effective (post-ablation) weights, terms accumulated in that order.
    """
    tape = trace.C.tape
    y_t = tape.leaf(np.asarray(y, dtype=np.float64))
    depth = trace.depth
    lc, lm, lu, lk = config.effective_lambdas()
    targets = schedule_targets(depth, config.rho_min, config.rho_max)

    pred = mse(predictions(trace, config), y_t)
    corr, corrs = corr_loss(trace.C, y_t, targets, config.eps)
    mono = mono_loss(corrs, config.gamma)
    triv = triv_loss(trace.t_sum, y_t, causal_readout(trace, config))
    cons = (
        _mean_layer_consistency(trace, config.eps)
        if lk > 0
        else tape.leaf(0.0)
    )

    total = pred
    if lc > 0:
        total = ad.add(total, ad.mul(tape.leaf(lc), corr))
    if lm > 0:
        total = ad.add(total, ad.mul(tape.leaf(lm), mono))
    if lu > 0:
        total = ad.add(total, ad.mul(tape.leaf(lu), triv))
    if lk > 0:
        total = ad.add(total, ad.mul(tape.leaf(lk), cons))

    return LossBreakdown(
        pred=float(pred.value),
        corr=float(corr.value),
        mono=float(mono.value),
        triv=float(triv.value),
        cons=float(cons.value),
        total=float(total.value),
        corr_per_layer=[float(c.value) for c in corrs],
        targets=targets,
        lambdas={"caus": lc, "mono": lm, "unif": lu, "cons": lk},
        node=total,
    )


def _mean_layer_consistency(trace: PeelTrace, eps: float) -> Tensor:
    tape = trace.C.tape
    if len(trace.view_ids) < 2:
        return tape.leaf(0.0)
    per_layer = [
        consistency_loss([pooled[vid] for vid in trace.view_ids], eps)
        for pooled in trace.causal_pooled
    ]
    total = per_layer[0]
    for term in per_layer[1:]:
        total = ad.add(total, term)
    return ad.div(total, tape.leaf(float(len(per_layer))))
