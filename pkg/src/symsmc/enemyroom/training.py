"""Discriminative training of the room model on death labels.

The loss is binary cross-entropy between the filter's death
probability and the recorded label, with the probability clamped away
from 0 and 1.  Gradients flow through the sampled enemy actions, hits
and damages via per-particle score coefficients with a leave-one-out
baseline, plus the exact pathwise terms the conditional tables expose;
:mod:`.fastfilter` assembles both.  Updates are Adam.

Evaluation classifies at a fixed probability threshold and reports
balanced accuracy (mean of per-class recalls) and the F1 score of the
death class.  A metric whose denominator class is empty is reported as
``None`` rather than NaN so downstream CSVs can mark it undefined.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..neural import adam_step
from ..stochastics import RngKey, fold_array, split, uniform_array
from .fastfilter import filter_trajectories, surrogate_gradients
from .model import THETA_NAME, EnemyRoomModel

PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class TrainHyper:
    n_particles: int = 1000
    batch_size: int = 50
    epochs: int = 100
    lr: float = 1e-3

    def __post_init__(self):
        if self.n_particles < 2:
            raise ContractError("need at least two particles for a baseline")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class EpochRow:
    epoch: int
    loss: float
    val_balanced_accuracy: float | None
    val_f1: float | None
    mean_ess: float
    theta_hat: float


@dataclass
class EvalReport:
    balanced_accuracy: float | None
    f1: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    mean_ess: float
    probabilities: np.ndarray
    n_degenerate: int


def _bce(p: np.ndarray, y: np.ndarray):
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    dloss = (pc - y) / (pc * (1.0 - pc))
    return loss, dloss


def _permutation(count: int, key: RngKey) -> np.ndarray:
    u = uniform_array(fold_array(np.uint64(key.state),
                                 np.arange(count, dtype=np.uint64)), 0)
    return np.argsort(u, kind="stable")


def theta_hat(model: EnemyRoomModel) -> float:
    return float(1.0 / (1.0 + np.exp(-float(model.store[THETA_NAME]))))


def evaluate(model: EnemyRoomModel, trajs, n_particles: int, key: RngKey,
             threshold: float = 0.5, chunk_size: int = 250,
             threads: int = 1) -> EvalReport:
    """Filter every trajectory and score the thresholded predictions.

    Trajectory ``i`` always filters under ``split(key, i)``, and each
    chunk builds its tables independently, so results are identical for
    any ``chunk_size`` and any worker count.
    """
    if not trajs:
        raise ContractError("cannot evaluate an empty dataset")
    chunks = [(lo, min(lo + chunk_size, len(trajs)))
              for lo in range(0, len(trajs), chunk_size)]

    def run(bounds):
        lo, hi = bounds
        return filter_trajectories(model, list(trajs[lo:hi]), n_particles,
                                   [split(key, i) for i in range(lo, hi)])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    p = np.concatenate([r.p_dead for r in results])
    ess_rows = np.concatenate([r.ess for r in results])
    n_degenerate = int(sum(r.degenerate.sum() for r in results))
    y = np.array([tr.label for tr in trajs], dtype=bool)
    pred = p > threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))

    bal = None
    if tp + fn > 0 and tn + fp > 0:
        bal = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
    f1 = None
    if 2 * tp + fp + fn > 0:
        f1 = 2 * tp / (2 * tp + fp + fn)
    return EvalReport(bal, f1, tp, fp, tn, fn, float(ess_rows.mean()), p,
                      n_degenerate)


def train(model: EnemyRoomModel, dataset, hyper: TrainHyper, key: RngKey,
          val=None, val_fraction: float = 0.1, on_epoch=None) -> list:
    """Fit the policy network and claw logit in place; returns history.

    ``dataset`` must come from one single-enemy room configuration.
    When no validation set is passed, the tail ``val_fraction`` of the
    dataset is held out.  A non-finite loss aborts immediately: it
    means the run diverged and any checkpoint would be garbage.
    """
    if model.e != 1:
        raise ContractError("training needs a single-enemy room model")
    trajs = list(dataset)
    if val is None:
        n_val = max(1, int(round(val_fraction * len(trajs))))
        if n_val >= len(trajs):
            raise ContractError("dataset too small to carve a validation split")
        val = trajs[len(trajs) - n_val:]
        trajs = trajs[:len(trajs) - n_val]
    labels = np.array([tr.label for tr in trajs], dtype=np.float64)

    history: list[EpochRow] = []
    for epoch in range(1, hyper.epochs + 1):
        perm = _permutation(len(trajs), split(key, ("perm", epoch)))
        loss_sum, ess_sum, n_batches = 0.0, 0.0, 0
        for lo in range(0, len(trajs), hyper.batch_size):
            idx = perm[lo:lo + hyper.batch_size]
            batch = [trajs[i] for i in idx]
            keys = [split(key, ("flt", epoch, int(i))) for i in idx]
            res = filter_trajectories(model, batch, hyper.n_particles, keys,
                                      want_trace=True)
            loss_vec, dloss = _bce(res.p_dead, labels[idx])
            batch_loss = float(loss_vec.mean())
            if not np.isfinite(batch_loss):
                raise ContractError(
                    f"non-finite loss {batch_loss} in epoch {epoch} "
                    f"(p range [{res.p_dead.min()}, {res.p_dead.max()}])")
            loss_sum += loss_vec.sum()
            ess_sum += res.mean_ess
            n_batches += 1
            if hyper.lr != 0.0:
                grads = surrogate_gradients(model, res, dloss / len(batch))
                adam_step(model.store, grads, hyper.lr)

        report = evaluate(model, val, hyper.n_particles,
                          split(key, ("val", epoch)))
        row = EpochRow(epoch, loss_sum / len(trajs),
                       report.balanced_accuracy, report.f1,
                       ess_sum / max(n_batches, 1), theta_hat(model))
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history


# ---------------------------------------------------------------------------
# CSV emission (deterministic: repr floats, "undefined" for None)


def _cell(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, (float, np.floating)):
        # repr of a builtin float round-trips the exact IEEE double
        return repr(float(v))
    return str(v)


def write_history_csv(path, history) -> None:
    cols = ("epoch", "loss", "val_balanced_accuracy", "val_f1", "mean_ess",
            "theta_hat")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(_cell(getattr(row, c)) for c in cols) + "\n")


def write_metrics_csv(path, rows) -> None:
    """``rows``: (config, split, EvalReport) triples, one CSV line each."""
    cols = ("config", "split", "balanced_accuracy", "f1", "tp", "fp", "tn",
            "fn", "mean_ess")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for config, split_name, rep in rows:
            vals = (config, split_name, rep.balanced_accuracy, rep.f1,
                    rep.tp, rep.fp, rep.tn, rep.fn, rep.mean_ess)
            fh.write(",".join(_cell(v) for v in vals) + "\n")
