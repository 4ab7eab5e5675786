"""Empirical DeepONet loss, its gradient with the composite-capacity penalty, and a small trainer."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .capacity import DataBounds, OperatorBound, composite_measure, composite_value_and_grad, gen_bound
from .network import DeepONetModel, Mlp, UnsupportedOperationError, backward, forward_cache
from .seeding import substream

HISTORY_COLUMNS = ("epoch", "train_loss", "test_loss", "composite", "gap_bound_with_factor", "gap_bound_without_factor")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``last_good`` is the model from the last finite step."""

    def __init__(self, message: str, last_good: DeepONetModel, history: list):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainConfig:
    lam: float = 0.0
    lam_warmup: int = 0  # epochs over which the penalty weight ramps linearly up to lam
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 125
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    delta: float = 0.05
    op_bound: Optional[float] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.lam_warmup < 0:
            raise ValueError("lam_warmup must be non-negative")
        if self.epochs <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainRun:
    model: DeepONetModel
    history: list
    config: dict
    initial_train_loss: float = float("nan")

    def history_csv(self) -> str:
        return history_csv(self.history)


@dataclass
class Batch:
    x_B: np.ndarray
    x_T: np.ndarray
    y: np.ndarray


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def _batch_arrays(batch):
    x_B = np.asarray(batch.x_B, dtype=np.float64)
    x_T = np.asarray(batch.x_T, dtype=np.float64)
    y = np.asarray(batch.y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("batch is empty")
    if x_B.ndim != 2 or x_T.ndim != 2 or not (x_B.shape[0] == x_T.shape[0] == y.size):
        raise ValueError("batch arrays do not line up")
    return x_B, x_T, y


def _predict(model: DeepONetModel, x_B, x_T):
    b, t = model.branch, model.trunk
    if x_B.shape[1] != b.input_dim or x_T.shape[1] != t.input_dim:
        raise ValueError(f"inputs ({x_B.shape[1]}, {x_T.shape[1]}) vs model ({b.input_dim}, {t.input_dim})")
    fb, cb = forward_cache(b.layers, b.biases, b.activation, x_B)
    ft, ct = forward_cache(t.layers, t.biases, t.activation, x_T)
    return np.einsum("ij,ij->i", fb, ft), fb, ft, cb, ct


def don_loss(model: DeepONetModel, batch) -> float:
    """``(1/2m) sum_i (y_i - G_theta(x_B,i, x_T,i))^2``."""
    x_B, x_T, y = _batch_arrays(batch)
    pred = _predict(model, x_B, x_T)[0]
    return 0.5 * float(np.mean((y - pred) ** 2))


@dataclass
class Gradient:
    objective: float
    loss: float
    composite: float
    branch: list
    trunk: list
    branch_bias: Optional[list] = None
    trunk_bias: Optional[list] = None


def objective_grad(model: DeepONetModel, batch, lam: float = 0.0) -> Gradient:
    """Gradient of ``don_loss + lam * composite`` (subgradient 0 at kinks)."""
    if lam > 0 and not model.is_bias_free:
        raise UnsupportedOperationError("the capacity penalty is defined for bias-free models only")
    x_B, x_T, y = _batch_arrays(batch)
    pred, fb, ft, cb, ct = _predict(model, x_B, x_T)
    resid = pred - y
    loss = 0.5 * float(np.mean(resid**2))
    g = (resid / y.size)[:, None]
    b, t = model.branch, model.trunk
    gb = backward(b.layers, b.activation, cb, g * ft, with_bias=b.has_bias)
    gt = backward(t.layers, t.activation, ct, g * fb, with_bias=t.has_bias)
    gb, gbb = gb if b.has_bias else (gb, None)
    gt, gtb = gt if t.has_bias else (gt, None)
    comp = 0.0
    if lam > 0:
        val, cgb, cgt = composite_value_and_grad(b.layers, t.layers)
        comp = float(val)
        gb = [x + lam * y_ for x, y_ in zip(gb, cgb)]
        gt = [x + lam * y_ for x, y_ in zip(gt, cgt)]
    return Gradient(loss + lam * comp, loss, comp, gb, gt, gbb, gtb)


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if c.optimizer == "sgd":
                self.m[i] = c.momentum * self.m[i] + g
                out.append(p - c.lr * self.m[i])
            else:
                self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
                self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
                mh = self.m[i] / (1 - c.beta1**self.t)
                vh = self.v[i] / (1 - c.beta2**self.t)
                out.append(p - c.lr * mh / (np.sqrt(vh) + c.adam_eps))
        return out


def _flatten(model: DeepONetModel):
    b, t = model.branch, model.trunk
    params = list(b.layers) + list(t.layers)
    if b.has_bias:
        params += list(b.biases)
    if t.has_bias:
        params += list(t.biases)
    return [np.array(p) for p in params]


def _rebuild(model: DeepONetModel, params) -> DeepONetModel:
    b, t = model.branch, model.trunk
    qb, qt = b.depth, t.depth
    bl, tl, rest = params[:qb], params[qb : qb + qt], params[qb + qt :]
    bb = tuple(rest[:qb]) if b.has_bias else None
    tb = tuple(rest[qb if b.has_bias else 0 :]) if t.has_bias else None
    return DeepONetModel(Mlp(tuple(bl), bb, b.activation), Mlp(tuple(tl), tb, t.activation))


def _grad_list(model: DeepONetModel, g: Gradient):
    out = list(g.branch) + list(g.trunk)
    if model.branch.has_bias:
        out += list(g.branch_bias)
    if model.trunk.has_bias:
        out += list(g.trunk_bias)
    return out


def gen_gap_report(model: DeepONetModel, train, test, bounds: Optional[DataBounds] = None, op_bound: Optional[float] = None, delta: float = 0.05) -> dict:
    """Empirical gap (test minus train loss) next to the capacity-based bound."""
    train_loss, test_loss = don_loss(model, train), don_loss(model, test)
    out = {"train_loss": train_loss, "test_loss": test_loss, "empirical_gap": test_loss - train_loss}
    if not model.is_bias_free or not model.is_symmetric or model.branch.depth < 2:
        out.update(B=None, rademacher=None, gap_bound_with_factor=None, gap_bound_without_factor=None, ratio=None)
        return out
    if op_bound is None:
        op_bound = float(getattr(train, "meta", {}).get("op_bound", 0.0))
    bounds = DataBounds.from_dataset(train) if bounds is None else bounds
    report = composite_measure(model)
    gb = gen_bound(report, bounds, OperatorBound(op_bound, delta), (model.branch.activation, model.trunk.activation))
    out.update(
        composite=report.composite,
        B=gb.B,
        rademacher=gb.rademacher,
        gap_bound_with_factor=gb.gap_with_factor,
        gap_bound_without_factor=gb.gap_without_factor,
        ratio=(out["empirical_gap"] / gb.gap_with_factor) if gb.gap_with_factor > 0 else None,
    )
    return out


def _history_row(epoch: int, model: DeepONetModel, train, test, bounds, op_bound, delta) -> dict:
    rep = gen_gap_report(model, train, test, bounds, op_bound, delta)
    nan = float("nan")
    return {
        "epoch": epoch,
        "train_loss": rep["train_loss"],
        "test_loss": rep["test_loss"],
        "composite": rep.get("composite", nan),
        "gap_bound_with_factor": rep["gap_bound_with_factor"] if rep["gap_bound_with_factor"] is not None else nan,
        "gap_bound_without_factor": rep["gap_bound_without_factor"] if rep["gap_bound_without_factor"] is not None else nan,
    }


def train(cfg: TrainConfig, model0: DeepONetModel, train_set, test_set) -> TrainRun:
    """Minibatch training of ``don_loss + lam * composite``; one history row per ``eval_every`` epochs."""
    x_B, x_T, y = _batch_arrays(train_set)
    _batch_arrays(test_set)
    if x_B.shape[1] != model0.branch.input_dim or x_T.shape[1] != model0.trunk.input_dim:
        raise ValueError("training data dims do not match the model inputs")
    if cfg.lam > 0 and not model0.is_bias_free:
        raise UnsupportedOperationError("the capacity penalty is defined for bias-free models only")
    m = y.size
    bounds = DataBounds.from_dataset(train_set) if model0.is_bias_free else None
    op_bound = cfg.op_bound if cfg.op_bound is not None else float(getattr(train_set, "meta", {}).get("op_bound", 0.0))
    model = model0
    params = _flatten(model)
    opt = _Optimizer(cfg, params)
    history = []
    initial = don_loss(model, train_set)

    for epoch in range(1, cfg.epochs + 1):
        order = substream(cfg.seed, "shuffle", epoch).permutation(m)
        lam = cfg.lam * min(1.0, epoch / cfg.lam_warmup) if cfg.lam_warmup else cfg.lam
        for s in range(0, m, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            g = objective_grad(model, Batch(x_B[idx], x_T[idx], y[idx]), lam)
            if not math.isfinite(g.objective):
                raise TrainingDivergedError(f"objective became non-finite in epoch {epoch}", model, history)
            new_params = opt.step(params, _grad_list(model, g))
            if not all(np.all(np.isfinite(p)) for p in new_params):
                raise TrainingDivergedError(f"weights became non-finite in epoch {epoch}", model, history)
            params = new_params
            model = _rebuild(model, params)
        if epoch % cfg.eval_every == 0:
            row = _history_row(epoch, model, train_set, test_set, bounds, op_bound, cfg.delta)
            if not math.isfinite(row["train_loss"]):
                raise TrainingDivergedError(f"train loss became non-finite in epoch {epoch}", model, history)
            history.append(row)
    return TrainRun(model, history, asdict(cfg), initial)
