"""Training orchestration: epochs, batches, gradient routing, evaluation,
and run artifacts.

One loop serves every strategy. Per batch it builds targets, steps the
network from the forward cross-entropy gradient, and (when a learnable
logit table is in play) steps the table from whichever direction the
configured loss routes to it. Network and table updates within a batch are
simultaneous: both gradients are computed from pre-step values before
either parameter set moves.

Strategies:

* ``onehot``        one-hot targets.
* ``ls``            fixed smoothing over the non-target classes only
                    (a frozen uniform logit table; the exact no-learning
                    limit of ``lspp``).
* ``lspp``          learnable smoothing; network trained by the forward
                    cross-entropy, table by the reverse one.
* ``ols``           targets from the previous epoch's mean predictions
                    mixed with one-hot; epoch 0 uses one-hot.
* ``distill``       per-sample targets from a teacher network's forward
                    passes.
* ``proxy_distill`` per-class targets from a teacher's frozen logit table;
                    never runs a teacher forward pass.
* ``ablation``      like ``lspp`` but with configurable gradient routing:
                    ``ce`` feeds both parameter sets from the forward term,
                    ``sce_original`` feeds both from the sum of both terms,
                    ``sce_ours`` is the split rule (identical to ``lspp``).

Run directory layout: config.json, metrics.csv (epoch, train_acc, test_acc,
train_loss, mean_max_prob), cmatrix.csv (+ .json sidecar) when a table was
learned, checkpoint.json, report.json.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .analysis import c_row_entropy
from .dataio import Dataset
from .labelreg import (
    LOG_CLAMP,
    CMatrix,
    OlsState,
    c_logit_grad,
    export_cmatrix,
    nontarget_indices,
    ols_accumulate,
    ols_target,
    reverse_cross_entropy,
    target_table,
)
from .model import (
    Mlp,
    OptState,
    finite_diff_check,
    init_model,
    mean_cross_entropy_loss,
    relative_error,
    save_checkpoint,
    sgd_step,
)
from .numerics import Rng, derive_seed, log_softmax_rows

STRATEGIES = ("onehot", "ls", "lspp", "ols", "distill", "proxy_distill", "ablation")
ABLATION_LOSSES = ("ce", "sce_original", "sce_ours")

# Which loss direction feeds which parameter set, per ablation variant:
# (network gets forward, network gets reverse, table gets forward, table gets reverse)
_ROUTING = {
    "ce": (True, False, True, False),
    "sce_original": (True, True, True, True),
    "sce_ours": (True, False, False, True),
}


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "onehot"
    alpha: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    c_lr: float | None = None  # defaults to lr when unset
    seed: int = 0
    layer_sizes: tuple[int, ...] | None = None  # derived (D, 32, K) when unset
    ols_mix: float = 0.5
    ols_correct_only: bool = False
    ablation_loss: str = "sce_ours"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}"
            )
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.c_lr is not None and self.c_lr < 0:
            raise ValueError(f"c_lr must be nonnegative, got {self.c_lr}")
        if not 0.0 <= self.ols_mix <= 1.0:
            raise ValueError(f"ols_mix must be in [0, 1], got {self.ols_mix}")
        if self.ablation_loss not in ABLATION_LOSSES:
            raise ValueError(
                f"unknown ablation_loss {self.ablation_loss!r}; "
                f"choose from {ABLATION_LOSSES}"
            )
        if self.layer_sizes is not None:
            object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))

    def resolved(self, input_dim: int, num_classes: int) -> "TrainConfig":
        """Materialize every default against a concrete dataset."""
        sizes = self.layer_sizes or (input_dim, 32, num_classes)
        if sizes[0] != input_dim or sizes[-1] != num_classes:
            raise ValueError(
                f"layer_sizes {sizes} do not match data with {input_dim} features "
                f"and {num_classes} classes"
            )
        return replace(
            self,
            layer_sizes=tuple(sizes),
            c_lr=self.lr if self.c_lr is None else self.c_lr,
        )


@dataclass
class EpochStats:
    epoch: int
    train_accuracy: float
    test_accuracy: float
    train_loss: float
    mean_max_prob: float  # on the training set


@dataclass
class TrainReport:
    epoch_stats: list = field(default_factory=list)
    final_train_accuracy: float = 0.0
    final_test_accuracy: float = 0.0
    final_train_nll: float = 0.0
    final_test_nll: float = 0.0
    final_train_max_prob: float = 0.0
    final_test_max_prob: float = 0.0
    wall_time_sec: float = 0.0
    teacher_forward_calls: int = 0
    ols_fallbacks: int = 0


class TrainOutput(NamedTuple):
    model: Mlp
    report: TrainReport
    cmatrix: CMatrix | None


def evaluate(model: Mlp, dataset: Dataset) -> dict:
    """Top-1 accuracy (argmax ties -> lowest index), mean negative
    log-likelihood (probabilities clamped at 1e-12), and mean max
    probability."""
    if model.num_classes != dataset.num_classes:
        raise ValueError(
            f"model has {model.num_classes} outputs but dataset has "
            f"{dataset.num_classes} classes"
        )
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = model.forward(dataset.features).probs
    predictions = np.argmax(probs, axis=1)
    accuracy = float(np.mean(predictions == dataset.labels))
    p_true = np.clip(probs[np.arange(len(dataset)), dataset.labels], 1e-12, None)
    mean_nll = float(np.mean(-np.log(p_true))) + 0.0
    mean_max_prob = float(np.mean(probs.max(axis=1)))
    return {"accuracy": accuracy, "mean_nll": mean_nll, "mean_max_prob": mean_max_prob}


def _ols_table(state: OlsState, mix: float, num_classes: int) -> tuple[np.ndarray, int]:
    means = state.class_means()
    table = np.empty((num_classes, num_classes), dtype=np.float64)
    fallbacks = 0
    for y in range(num_classes):
        table[y], fell_back = ols_target(means, y, mix)
        fallbacks += int(fell_back)
    return table, fallbacks


def _reverse_dlogits(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the reverse cross-entropy w.r.t. network
    logits, for a batch of frozen targets (clamped before the log)."""
    log_t = np.log(np.maximum(targets, LOG_CLAMP))
    inner = (probs * log_t).sum(axis=1, keepdims=True)
    return -probs * (log_t - inner)


def _accumulate_c_grads(cgrad, c, probs, log_probs, labels, nt_idx,
                        use_forward: bool, use_reverse: bool) -> None:
    """Add this batch's (unnormalized) table gradients into cgrad."""
    rows = np.arange(len(labels))[:, None]
    table_probs = c.all_row_probs()  # K x (K-1)
    p = table_probs[labels]  # batch x (K-1)
    cols = nt_idx[labels]
    if use_reverse:
        off_target = probs[rows, cols]
        mass = off_target.sum(axis=1, keepdims=True)
        np.add.at(cgrad, labels, -(off_target - p * mass))
    if use_forward:
        off_logp = log_probs[rows, cols]
        inner = (p * off_logp).sum(axis=1, keepdims=True)
        np.add.at(cgrad, labels, -c.alpha * p * (off_logp - inner))


def _run(config: TrainConfig, train_set: Dataset, test_set: Dataset,
         teacher_model: Mlp | None, teacher_c: CMatrix | None) -> TrainOutput:
    started = time.perf_counter()
    k = train_set.num_classes
    if test_set.num_classes != k:
        raise ValueError("train and test sets disagree on the class count")
    config = config.resolved(train_set.num_features, k)
    strategy = config.strategy

    if strategy == "distill" and teacher_model is None:
        raise ValueError("strategy 'distill' requires a teacher model")
    if strategy == "proxy_distill" and teacher_c is None:
        raise ValueError("strategy 'proxy_distill' requires a teacher logit table")
    if teacher_model is not None and teacher_model.num_classes != k:
        raise ValueError(
            f"teacher has {teacher_model.num_classes} outputs, task has {k} classes"
        )
    if teacher_c is not None and teacher_c.num_classes != k:
        raise ValueError(
            f"teacher table covers {teacher_c.num_classes} classes, task has {k}"
        )

    model = init_model(config.layer_sizes, config.seed)
    opt = OptState.for_model(model, config.lr, config.momentum, config.weight_decay)

    if strategy == "ablation":
        net_fwd, net_rev, c_fwd, c_rev = _ROUTING[config.ablation_loss]
    else:
        net_fwd, net_rev, c_fwd, c_rev = True, False, False, strategy == "lspp"

    cmatrix: CMatrix | None = None
    fixed_table: np.ndarray | None = None
    if strategy in ("lspp", "ablation"):
        cmatrix = CMatrix.zeros(k, config.alpha)
    elif strategy == "ls":
        fixed_table = target_table(CMatrix.zeros(k, config.alpha))
    elif strategy == "onehot":
        fixed_table = np.eye(k, dtype=np.float64)
    elif strategy == "proxy_distill":
        fixed_table = target_table(teacher_c)

    nt_idx = nontarget_indices(k)
    teacher_calls_before = teacher_model.forward_count if teacher_model else 0
    features, labels = train_set.features, train_set.labels
    n = len(train_set)
    report = TrainReport()

    ols_state = OlsState.zeros(k) if strategy == "ols" else None
    ols_table = np.eye(k, dtype=np.float64)  # epoch 0 trains on one-hot

    for epoch in range(config.epochs):
        perm = Rng(derive_seed(config.seed, 1 + epoch)).permutation(n)
        loss_sum = 0.0
        if strategy == "ols":
            next_state = OlsState.zeros(k)

        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = features[idx]
            yb = labels[idx]
            b = len(idx)

            cache = model.forward(xb)
            if strategy == "distill":
                targets = teacher_model.forward(xb).probs
            elif strategy == "ols":
                targets = ols_table[yb]
            elif fixed_table is not None:
                targets = fixed_table[yb]
            else:
                targets = target_table(cmatrix)[yb]

            log_probs = log_softmax_rows(cache.logits)
            loss_sum += float(-(targets * log_probs).sum())

            dlogits = (cache.probs - targets) / b
            if net_rev:
                dlogits += _reverse_dlogits(cache.probs, targets) / b

            if cmatrix is not None and (c_fwd or c_rev):
                cgrad = np.zeros_like(cmatrix.logits)
                _accumulate_c_grads(
                    cgrad, cmatrix, cache.probs, log_probs, yb, nt_idx, c_fwd, c_rev
                )
                cgrad /= b
            else:
                cgrad = None

            sgd_step(model, model.backward(cache, dlogits), opt)
            if cgrad is not None:
                cmatrix.logits -= config.c_lr * cgrad

            if strategy == "ols":
                if config.ols_correct_only:
                    hits = np.argmax(cache.probs, axis=1) == yb
                else:
                    hits = np.ones(b, dtype=bool)
                for i in np.flatnonzero(hits):
                    ols_accumulate(next_state, cache.probs[i], int(yb[i]))

        if strategy == "ols":
            ols_state = next_state
            ols_table, fallbacks = _ols_table(ols_state, config.ols_mix, k)
            report.ols_fallbacks += fallbacks

        train_eval = evaluate(model, train_set)
        test_eval = evaluate(model, test_set)
        report.epoch_stats.append(
            EpochStats(
                epoch=epoch,
                train_accuracy=train_eval["accuracy"],
                test_accuracy=test_eval["accuracy"],
                train_loss=loss_sum / n,
                mean_max_prob=train_eval["mean_max_prob"],
            )
        )

    train_eval = evaluate(model, train_set)
    test_eval = evaluate(model, test_set)
    report.final_train_accuracy = train_eval["accuracy"]
    report.final_test_accuracy = test_eval["accuracy"]
    report.final_train_nll = train_eval["mean_nll"]
    report.final_test_nll = test_eval["mean_nll"]
    report.final_train_max_prob = train_eval["mean_max_prob"]
    report.final_test_max_prob = test_eval["mean_max_prob"]
    if teacher_model is not None:
        report.teacher_forward_calls = teacher_model.forward_count - teacher_calls_before
    report.wall_time_sec = time.perf_counter() - started
    return TrainOutput(model, report, cmatrix)


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset,
          teacher=None) -> TrainOutput:
    """Train one model under the configured strategy.

    `teacher` is required for the distillation strategies: an `Mlp` for
    ``distill``, a `CMatrix` for ``proxy_distill``.
    """
    teacher_model = teacher if isinstance(teacher, Mlp) else None
    teacher_c = teacher if isinstance(teacher, CMatrix) else None
    if config.strategy in ("distill", "proxy_distill") and teacher is None:
        raise ValueError(f"strategy {config.strategy!r} requires a teacher")
    return _run(config, train_set, test_set, teacher_model, teacher_c)


def train_ablation(config: TrainConfig, train_set: Dataset,
                   test_set: Dataset) -> TrainOutput:
    """Train with one of the loss-routing variants (config.ablation_loss)."""
    if config.strategy != "ablation":
        config = replace(config, strategy="ablation")
    return _run(config, train_set, test_set, None, None)


def distill(student_config: TrainConfig, teacher, train_set: Dataset,
            test_set: Dataset) -> TrainOutput:
    """Distill a student from a teacher network or a frozen logit table."""
    if isinstance(teacher, Mlp):
        config = replace(student_config, strategy="distill")
    elif isinstance(teacher, CMatrix):
        config = replace(student_config, strategy="proxy_distill")
    else:
        raise ValueError(f"teacher must be an Mlp or a CMatrix, got {type(teacher)}")
    return _run(config, train_set, test_set,
                teacher if isinstance(teacher, Mlp) else None,
                teacher if isinstance(teacher, CMatrix) else None)


def gradient_check(num_classes: int, seed: int, hidden_sizes=(8,),
                   batch_size: int = 8, step: float = 1e-5,
                   input_dim: int = 3) -> dict:
    """Verify both gradient pathways on one random instance.

    Network side: analytic gradients of the batch-mean forward cross-entropy
    (targets built from a random logit table, then held fixed) against
    central finite differences over every weight and bias. Table side: the
    closed-form reverse-direction gradient against central finite
    differences over every table logit, with the predictions held fixed.
    Returns the worst relative error for each side.
    """
    rng = Rng(derive_seed(seed, 9000))
    sizes = [input_dim, *[int(h) for h in hidden_sizes], num_classes]
    model = init_model(sizes, seed)
    # central differences are only valid away from rectifier kinks: redraw
    # the probe batch until every hidden pre-activation clears a margin that
    # dwarfs the default step sizes (steps near or above it are on their own)
    margin = 1e-3
    for _ in range(200):
        batch = rng.uniforms((batch_size, input_dim), -1.0, 1.0)
        pre = model.forward(batch).pre_activations[:-1]
        if not pre or min(np.abs(z).min() for z in pre) > margin:
            break
    else:
        raise RuntimeError("could not find a kink-free probe batch")
    labels = np.array([rng.next_below(num_classes) for _ in range(batch_size)])
    cmatrix = CMatrix(rng.uniforms((num_classes, num_classes - 1), -2.0, 2.0), 0.1)

    targets = target_table(cmatrix)[labels]
    network_err = finite_diff_check(model, batch, mean_cross_entropy_loss(targets), step)

    probs = model.forward(batch).probs

    def mean_reverse(c: CMatrix) -> float:
        return sum(
            reverse_cross_entropy(c, int(y), probs[i]) for i, y in enumerate(labels)
        ) / batch_size

    analytic = np.zeros_like(cmatrix.logits)
    for i, y in enumerate(labels):
        analytic[int(y)] += c_logit_grad(cmatrix, int(y), probs[i])
    analytic /= batch_size

    cmatrix_err = 0.0
    flat = cmatrix.logits.reshape(-1)
    aflat = analytic.reshape(-1)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + step
        plus = mean_reverse(cmatrix)
        flat[j] = original - step
        minus = mean_reverse(cmatrix)
        flat[j] = original
        numeric = (plus - minus) / (2.0 * step)
        cmatrix_err = max(cmatrix_err, relative_error(float(aflat[j]), numeric))

    return {"network_max_rel_err": network_err, "cmatrix_max_rel_err": cmatrix_err}


def config_to_dict(config: TrainConfig) -> dict:
    doc = asdict(config)
    if doc["layer_sizes"] is not None:
        doc["layer_sizes"] = list(doc["layer_sizes"])
    return doc


def write_metrics_csv(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_acc", "test_acc", "train_loss", "mean_max_prob"])
        for row in report.epoch_stats:
            writer.writerow(
                [
                    row.epoch,
                    repr(float(row.train_accuracy)),
                    repr(float(row.test_accuracy)),
                    repr(float(row.train_loss)),
                    repr(float(row.mean_max_prob)),
                ]
            )


def write_run_artifacts(run_dir, config: TrainConfig, result: TrainOutput,
                        extra_report: dict | None = None) -> None:
    """Write config.json, metrics.csv, checkpoint.json, report.json, and
    (when a table was learned) cmatrix.csv with its sidecar."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = config
    with open(run_dir / "config.json", "w") as f:
        json.dump(config_to_dict(resolved), f, indent=2, sort_keys=True)
        f.write("\n")
    write_metrics_csv(result.report, run_dir / "metrics.csv")
    save_checkpoint(result.model, run_dir / "checkpoint.json")

    report_doc = {
        "final_train_accuracy": result.report.final_train_accuracy,
        "final_test_accuracy": result.report.final_test_accuracy,
        "final_train_nll": result.report.final_train_nll,
        "final_test_nll": result.report.final_test_nll,
        "final_train_max_prob": result.report.final_train_max_prob,
        "final_test_max_prob": result.report.final_test_max_prob,
        "wall_time_sec": result.report.wall_time_sec,
        "teacher_forward_calls": result.report.teacher_forward_calls,
        "ols_fallbacks": result.report.ols_fallbacks,
        "epochs": [asdict(row) for row in result.report.epoch_stats],
    }
    if result.cmatrix is not None:
        export_cmatrix(
            result.cmatrix,
            run_dir / "cmatrix.csv",
            metadata={
                "strategy": resolved.strategy,
                "ablation_loss": resolved.ablation_loss
                if resolved.strategy == "ablation"
                else None,
                "seed": resolved.seed,
                "epochs": resolved.epochs,
            },
        )
        report_doc["c_row_entropy"] = [
            float(v) for v in c_row_entropy(result.cmatrix)
        ]
    if extra_report:
        report_doc.update(extra_report)
    with open(run_dir / "report.json", "w") as f:
        json.dump(report_doc, f, indent=2, sort_keys=True)
        f.write("\n")
