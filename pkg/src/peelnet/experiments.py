"""Re-batching interventions on a trained model and the ablation registry.

An intervention re-partitions the same test samples into different batch
environments. The forward pass is per-sample deterministic, so predictions
never change; what moves is the environment's own statistic: the mean over
its batches of the within-batch correlation between the final causal scalar
and the label.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .graphs import MultiViewSample, derive_seed, partition_indices
from .objective import ObjectiveConfig, pearson_np, predictions_np
from .peeling import Model
from .trainer import metrics_from_predictions, model_outputs

DEFAULT_B_GRID = (8, 16, 32)
DEFAULT_SHUFFLE_GRID = (False, True)

# variant key -> (report label, objective overrides)
ABLATIONS: dict[str, tuple[str, dict]] = {
    "no-split": ("w/o causal-trivial split", {"disable_split": True}),
    "no-schedule": ("w/o correlation schedule", {"disable_schedule": True}),
    "no-trivial": ("w/o trivial branch", {"disable_trivial": True}),
    "no-mono": ("no mono penalty", {"disable_mono": True}),
    "avg-causal-layer": ("average causal layer", {"average_causal_readout": True}),
    "consistency@0.5": ("consistency@0.5", {"lambda_cons": 0.5}),
    "consistency@1.0": ("consistency@1.0", {"lambda_cons": 1.0}),
}


def variant_objective(base: ObjectiveConfig, variant: str) -> tuple[str, ObjectiveConfig]:
    """Label and objective configuration for one named ablation variant."""
    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation variant '{variant}' (choose from {sorted(ABLATIONS)})")
    label, overrides = ABLATIONS[variant]
    return label, dataclasses.replace(base, **overrides)


@dataclass
class InterventionRow:
    batch_size: int
    shuffle: bool
    r2: float
    corr_final: float  # mean over this environment's batches, final layer
    pooled_corr_final: float  # partition-free full-set correlation
    per_depth: list[float]
    per_depth_pooled: list[float]
    n_batches: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class InterventionReport:
    rows: list[InterventionRow]
    spread: float  # max - min of corr_final across environments
    seed: int

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "spread": self.spread,
            "seed": self.seed,
        }


def intervene(
    model: Model,
    objective: ObjectiveConfig,
    test_set: list[MultiViewSample],
    b_grid=DEFAULT_B_GRID,
    shuffle_grid=DEFAULT_SHUFFLE_GRID,
    seed: int = 0,
) -> InterventionReport:
    """Evaluate the trained model under every (batch size, shuffle) environment.

    Pure with respect to the model and the samples: one forward pass over the
    test set, then per-environment statistics over re-partitioned indices.
    """
    if not b_grid or not shuffle_grid:
        raise ValueError("intervention grid must be non-empty")
    n = len(test_set)
    if n < max(b_grid):
        raise ValueError(f"test set of {n} samples is smaller than max batch size {max(b_grid)}")

    out = model_outputs(model, test_set)
    C, y = out["C"], out["y"]
    y_hat = predictions_np(C, out["T"], objective)
    r2 = metrics_from_predictions(y_hat, y)["r2"]
    depth = C.shape[1]
    pooled = [pearson_np(C[:, l], y, objective.eps) for l in range(depth)]

    rows = []
    for batch_size in b_grid:
        for shuffle in shuffle_grid:
            groups = partition_indices(
                n,
                batch_size,
                shuffle=shuffle,
                seed=derive_seed(seed, batch_size, int(shuffle)),
            )
            per_depth = [
                float(np.mean([pearson_np(C[g, l], y[g], objective.eps) for g in groups]))
                for l in range(depth)
            ]
            rows.append(
                InterventionRow(
                    batch_size=int(batch_size),
                    shuffle=bool(shuffle),
                    r2=r2,
                    corr_final=per_depth[-1],
                    pooled_corr_final=pooled[-1],
                    per_depth=per_depth,
                    per_depth_pooled=pooled,
                    n_batches=len(groups),
                )
            )
    finals = [row.corr_final for row in rows]
    return InterventionReport(rows=rows, spread=max(finals) - min(finals), seed=seed)
