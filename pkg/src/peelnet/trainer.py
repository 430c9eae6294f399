"""Mini-batch training loop with adaptive-moment or plain gradient descent,
evaluation metrics, early stopping, and one-axis hyperparameter sweeps."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .encoders import MatrixCache
from .graphs import MultiViewSample, assemble_batches, split_dataset
from .objective import ObjectiveConfig, pearson_np, predictions_np, total_loss
from .peeling import Model, ModelConfig

EVAL_CHUNK = 64  # fixed forward chunk so predictions never depend on the caller's batching


@dataclass
class TrainConfig:
    model: ModelConfig
    objective: ObjectiveConfig
    epochs: int = 100
    batch_size: int = 16
    lr: float = 3e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    seed: int = 0
    patience: int = 20
    val_fraction: float = 0.15
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


@dataclass
class EpochRecord:
    epoch: int
    train: dict  # mean loss breakdown over the epoch's batches
    val_mae: float
    val_mse: float
    val_r2: float
    val_corr_per_layer: list[float]

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train": self.train,
            "val_mae": self.val_mae,
            "val_mse": self.val_mse,
            "val_r2": self.val_r2,
            "val_corr_per_layer": self.val_corr_per_layer,
        }


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    diverged: bool = False

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


class _SGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            p -= self.lr * grads[k]


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def model_outputs(
    model: Model,
    samples: list[MultiViewSample],
    cache: MatrixCache | None = None,
    chunk: int = EVAL_CHUNK,
) -> dict[str, np.ndarray]:
    """Per-sample causal/trivial scalars over a dataset, independent of batching."""
    C_parts, T_parts = [], []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        tape = Tape()
        trace = model.forward(tape, part, cache)
        C_parts.append(trace.C.value)
        T_parts.append(trace.T.value)
    return {
        "C": np.concatenate(C_parts, axis=0),
        "T": np.concatenate(T_parts, axis=0),
        "y": np.array([s.y for s in samples], dtype=np.float64),
    }


def metrics_from_predictions(y_hat: np.ndarray, y: np.ndarray) -> dict[str, float]:
    if y.shape[0] < 2:
        raise ValueError("need at least 2 samples to evaluate")
    err = y_hat - y
    sse = float(err @ err)
    centered = y - y.mean()
    sst = float(centered @ centered)
    if sst == 0.0:
        raise ValueError("zero label variance: R^2 undefined")
    return {
        "mae": float(np.abs(err).mean()),
        "mse": sse / y.shape[0],
        "r2": 1.0 - sse / sst,
    }


def evaluate(
    model: Model,
    dataset: list[MultiViewSample],
    objective: ObjectiveConfig,
    cache: MatrixCache | None = None,
) -> dict[str, float]:
    out = model_outputs(model, dataset, cache)
    y_hat = predictions_np(out["C"], out["T"], objective)
    return metrics_from_predictions(y_hat, out["y"])


def _val_curve(out: dict[str, np.ndarray], eps: float) -> list[float]:
    C, y = out["C"], out["y"]
    return [pearson_np(C[:, l], y, eps) for l in range(C.shape[1])]


def train(
    train_set: list[MultiViewSample],
    config: TrainConfig,
    val_set: list[MultiViewSample] | None = None,
) -> tuple[Model, RunHistory]:
    """Train a fresh model; deterministic for a fixed config and seed.

    Reshuffles mini-batches every epoch, early-stops on validation MSE, and
    returns the model restored to its best-validation parameters.
    """
    if not train_set:
        raise ValueError("empty training set")
    if val_set is None:
        train_set, val_set = split_dataset(
            train_set, config.val_fraction, np.random.SeedSequence(config.seed, spawn_key=(1,))
        )
    if not val_set:
        raise ValueError("empty validation set")

    model = Model.init(config.model, np.random.SeedSequence(config.seed, spawn_key=(0,)))
    opt = (_Adam if config.optimizer == "adam" else _SGD)(model.params, config.lr)
    cache = MatrixCache()
    history = RunHistory()
    best_mse = np.inf
    best_params: dict[str, np.ndarray] | None = None
    since_best = 0

    for epoch in range(config.epochs):
        batches = assemble_batches(
            train_set,
            config.batch_size,
            shuffle=True,
            seed=np.random.SeedSequence(config.seed, spawn_key=(2, epoch)),
        )
        sums: dict[str, float] = {}
        per_layer_sums: np.ndarray | None = None
        try:
            for batch in batches:
                tape = Tape()
                leaves = model.leaves(tape)
                trace = model.forward(tape, batch.samples, cache, leaves=leaves)
                breakdown = total_loss(trace, batch.labels, config.objective)
                grads_by_node = ad.backward(breakdown.node)
                grads = {name: grads_by_node[leaf] for name, leaf in leaves.items()}
                _clip_global_norm(grads, config.clip_norm)
                opt.step(model.params, grads)
                for key, value in (
                    ("pred", breakdown.pred),
                    ("corr", breakdown.corr),
                    ("mono", breakdown.mono),
                    ("triv", breakdown.triv),
                    ("cons", breakdown.cons),
                    ("total", breakdown.total),
                ):
                    sums[key] = sums.get(key, 0.0) + value
                layer_arr = np.asarray(breakdown.corr_per_layer)
                per_layer_sums = (
                    layer_arr if per_layer_sums is None else per_layer_sums + layer_arr
                )
        except NonFiniteError:
            history.diverged = True
            break

        n_batches = len(batches)
        val_out = model_outputs(model, val_set, cache)
        val_pred = predictions_np(val_out["C"], val_out["T"], config.objective)
        val_metrics = metrics_from_predictions(val_pred, val_out["y"])
        record = EpochRecord(
            epoch=epoch,
            train={
                **{k: v / n_batches for k, v in sums.items()},
                "corr_per_layer": (per_layer_sums / n_batches).tolist(),
            },
            val_mae=val_metrics["mae"],
            val_mse=val_metrics["mse"],
            val_r2=val_metrics["r2"],
            val_corr_per_layer=_val_curve(val_out, config.objective.eps),
        )
        history.records.append(record)

        if val_metrics["mse"] < best_mse:
            best_mse = val_metrics["mse"]
            best_params = model.copy_params()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break

    if best_params is not None:
        model.load_params(best_params)
    return model, history


def sweep(
    axis: str,
    values,
    base: TrainConfig,
    train_set: list[MultiViewSample],
    test_set: list[MultiViewSample],
    seeds=(0, 1, 2),
) -> list[dict]:
    """One trained run per value per seed; rows sorted by axis value.

    axis: "depth" (number of causal blocks) or "rho_max" (top of the
    correlation target schedule). Failures are recorded per row.
    """
    if axis not in ("depth", "rho_max"):
        raise ValueError(f"unknown sweep axis '{axis}'")
    if not values:
        raise ValueError("empty sweep value set")
    rows = []
    for value in sorted(values):
        row = {"axis": axis, "value": value, "runs": [], "error": None}
        try:
            for seed in seeds:
                if axis == "depth":
                    cfg = dataclasses.replace(
                        base,
                        seed=seed,
                        model=dataclasses.replace(base.model, depth=int(value)),
                    )
                else:
                    cfg = dataclasses.replace(
                        base,
                        seed=seed,
                        objective=dataclasses.replace(base.objective, rho_max=float(value)),
                    )
                model, _ = train(train_set, cfg)
                metrics = evaluate(model, test_set, cfg.objective)
                row["runs"].append({"seed": seed, **metrics})
            row["mse_mean"] = float(np.mean([r["mse"] for r in row["runs"]]))
            row["mae_mean"] = float(np.mean([r["mae"] for r in row["runs"]]))
            row["r2_mean"] = float(np.mean([r["r2"] for r in row["runs"]]))
        except Exception as exc:  # recorded, not raised: other rows still run
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
