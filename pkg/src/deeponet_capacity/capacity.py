"""Norm-based capacity measures for DeepONets and the bounds built on them.

Scalar functions take a :class:`~deeponet_capacity.network.DeepONetModel` or
individual layer matrices. The ``*_value_and_grad`` functions accept weight
stacks with arbitrary leading batch dimensions and return exact
(sub)gradients; the trainer and the Rademacher estimator both use them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linalg import as_matrix, frobenius_norm, row_norms, spectral_norm
from .network import Activation, DeepONetModel, UnsupportedOperationError


def _data_arrays(dataset):
    x_B = np.asarray(dataset.x_B, dtype=np.float64)
    x_T = np.asarray(dataset.x_T, dtype=np.float64)
    if x_B.ndim != 2 or x_T.ndim != 2 or x_B.shape[0] != x_T.shape[0]:
        raise ValueError("dataset must hold paired 2-D arrays x_B, x_T")
    if x_B.shape[0] == 0:
        raise ValueError("dataset is empty")
    return x_B, x_T


def product_norm_sum(dataset) -> float:
    """``sqrt(sum_i |x_B,i|^2 |x_T,i|^2)``, i.e. ``sqrt(sum_i |x_B,i x_T,i^T|_F^2)``."""
    x_B, x_T = _data_arrays(dataset)
    nb = np.einsum("ij,ij->i", x_B, x_B)
    nt = np.einsum("ij,ij->i", x_T, x_T)
    return math.sqrt(math.fsum(nb * nt))


def _require_capacity_model(model: DeepONetModel, depth: Optional[int] = None, min_depth: int = 1):
    if not model.is_bias_free:
        raise UnsupportedOperationError("capacity measures are defined for bias-free models only")
    qb, qt = model.branch.depth, model.trunk.depth
    if depth is not None and (qb != depth or qt != depth):
        raise UnsupportedOperationError(f"expected branch and trunk depth {depth}, got ({qb}, {qt})")
    if qb < min_depth or qt < min_depth:
        raise UnsupportedOperationError(f"need depth >= {min_depth} on both sides, got ({qb}, {qt})")


# ---------------------------------------------------------------------------
# (1,1) linear and (2,2) relu classes


def capacity_11(W_B, W_T) -> float:
    """Frobenius norm of ``W_B^T W_T``."""
    W_B, W_T = as_matrix(W_B, "W_B"), as_matrix(W_T, "W_T")
    if W_B.shape[0] != W_T.shape[0]:
        raise ValueError(f"W_B has {W_B.shape[0]} rows but W_T has {W_T.shape[0]}")
    return frobenius_norm(W_B.T @ W_T)


def bound_11(c: float, dataset) -> float:
    """Empirical Rademacher bound ``(c/m) sqrt(sum_i |x_B,i|^2 |x_T,i|^2)`` for linear DeepONets."""
    if c < 0:
        raise ValueError("capacity must be non-negative")
    m = _data_arrays(dataset)[0].shape[0]
    return c / m * product_norm_sum(dataset)


def bound_11_alt(p: int, M_B: float, M_T: float, M: float, m: int) -> float:
    """Average bound ``p M_B M_T M / sqrt(m)`` when only spectral norms are controlled."""
    if m <= 0:
        raise ValueError("m must be positive")
    if min(p, M_B, M_T, M) < 0:
        raise ValueError("all arguments must be non-negative")
    return p * M_B * M_T * M / math.sqrt(m)


def capacity_22(model: DeepONetModel) -> float:
    """``max_{k1,k2} |B1_k1| |T1_k2| |(B2^T T2)_{k1,k2}|`` for depth-2 models."""
    _require_capacity_model(model, depth=2)
    B1, B2 = model.branch.layers
    T1, T2 = model.trunk.layers
    vals = np.abs(B2.T @ T2) * np.outer(row_norms(B1), row_norms(T1))
    return float(vals.max(initial=0.0))


def bound_22(c: float, b1: int, t1: int, dataset) -> float:
    x_B, x_T = _data_arrays(dataset)
    if c < 0:
        raise ValueError("capacity must be non-negative")
    m = x_B.shape[0]
    return c / m * b1 * t1 * math.sqrt(math.fsum((x_B**2).ravel())) * math.sqrt(math.fsum((x_T**2).ravel()))


# ---------------------------------------------------------------------------
# Composite measure of symmetric deep models


def capacity_outer(model: DeepONetModel) -> float:
    """``sum_{k1,k2} |(B_n^T T_n)_{k1,k2}| |B_{n-1,k1}| |T_{n-1,k2}|``."""
    _require_capacity_model(model, min_depth=2)
    Bn, Bn1 = model.branch.layers[-1], model.branch.layers[-2]
    Tn, Tn1 = model.trunk.layers[-1], model.trunk.layers[-2]
    return float(row_norms(Bn1) @ np.abs(Bn.T @ Tn) @ row_norms(Tn1))


def capacity_inner_exact(B_layer, T_layer, audit: bool = False) -> float:
    """Sup over unit ``(v, w)`` of ``sum |v_j1 w_j2| |B_j1| |T_j2|``.

    The objective factorizes as ``(|v| . r)(|w| . s)`` with ``r, s`` the row
    norms, so the sup is ``|r| |s| = |B|_F |T|_F``. With ``audit=True`` the
    grid/ascent oracle is run as well and a disagreement raises.
    """
    value = frobenius_norm(B_layer) * frobenius_norm(T_layer)
    if audit:
        oracle = capacity_inner_oracle(B_layer, T_layer)
        if oracle > value * (1 + 1e-9) + 1e-12 or oracle < value * (1 - 1e-3):
            raise AssertionError(f"closed form {value} disagrees with oracle {oracle}")
    return value


def capacity_inner_surrogate(B_layer, T_layer) -> float:
    """Spectral norm of ``X_{j1,j2} = |B_j1| |T_j2|``."""
    X = np.outer(row_norms(B_layer), row_norms(T_layer))
    return spectral_norm(X)


def sphere_grid(dim: int, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Roughly uniform points on the unit sphere in ``R^dim``."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        t = 2 * np.pi * np.arange(n) / n
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if dim == 3:
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5**0.5) * i
        return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    rng = np.random.default_rng(0) if rng is None else rng
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def capacity_inner_oracle(B_layer, T_layer, n_directions: int = 100, steps: int = 500, seed: int = 0) -> float:
    """Brute-force lower bound on the inner capacity: grid over both spheres, then projected ascent."""
    r, s = row_norms(B_layer), row_norms(T_layer)
    if r.size == 0 or s.size == 0:
        return 0.0
    X = np.outer(r, s)
    rng = np.random.default_rng(seed)
    V = sphere_grid(r.size, n_directions, rng)
    W = sphere_grid(s.size, n_directions, rng)
    scores = np.abs(V) @ X @ np.abs(W).T
    i, j = np.unravel_index(np.argmax(scores), scores.shape)
    v, w = V[i].copy(), W[j].copy()
    best = float(scores[i, j])
    step = 0.1
    for _ in range(steps):
        gv = np.sign(v) * (X @ np.abs(w))
        gw = np.sign(w) * (X.T @ np.abs(v))
        v_new = v + step * gv
        w_new = w + step * gw
        nv, nw = np.linalg.norm(v_new), np.linalg.norm(w_new)
        if nv == 0 or nw == 0:
            break
        v_new, w_new = v_new / nv, w_new / nw
        val = float(np.abs(v_new) @ X @ np.abs(w_new))
        if val >= best:
            v, w, best = v_new, w_new, val
        else:
            step /= 2
    return best


@dataclass
class CapacityReport:
    c_outer: float
    c_inner: list = field(default_factory=list)  # (k, exact, surrogate)
    composite: float = 0.0
    lipschitz_product: float = 0.0
    depth: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["c_inner"] = [{"k": k, "exact": e, "surrogate": s} for k, e, s in self.c_inner]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_text(self) -> str:
        buf = io.StringIO()
        cols = ["depth", "c_outer", "composite", "lipschitz_product"]
        cols += [f"c_inner_{k}" for k, _, _ in self.c_inner]
        cols += [f"c_inner_{k}_surrogate" for k, _, _ in self.c_inner]
        row = [self.depth, self.c_outer, self.composite, self.lipschitz_product]
        row += [e for _, e, _ in self.c_inner] + [s for _, _, s in self.c_inner]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "CapacityReport":
        inner = [(int(e["k"]), float(e["exact"]), float(e["surrogate"])) for e in d.get("c_inner", [])]
        return cls(float(d["c_outer"]), inner, float(d["composite"]), float(d["lipschitz_product"]), int(d["depth"]))


def lipschitz_product(model: DeepONetModel) -> float:
    """``prod_i |B_i| |T_i|`` with spectral norms."""
    out = 1.0
    for w in model.branch.layers + model.trunk.layers:
        out *= spectral_norm(w)
    return out


def composite_measure(model: DeepONetModel) -> CapacityReport:
    """Fill a :class:`CapacityReport` for a bias-free model with ``q_B = q_T = n >= 2``."""
    _require_capacity_model(model, min_depth=2)
    if not model.is_symmetric:
        raise UnsupportedOperationError(
            f"composite measure needs equal depths, got ({model.branch.depth}, {model.trunk.depth}); symmetrize first"
        )
    n = model.branch.depth
    outer = capacity_outer(model)
    inner = []
    composite = outer
    for k in range(2, n):
        B, T = model.branch.layers[n - k - 1], model.trunk.layers[n - k - 1]
        exact = capacity_inner_exact(B, T)
        inner.append((k, exact, capacity_inner_surrogate(B, T)))
        composite *= exact
    return CapacityReport(outer, inner, composite, lipschitz_product(model), n)


# ---------------------------------------------------------------------------
# Bounds


@dataclass
class DataBounds:
    """Input-size constants: RMS bounds ``M_x*`` and sup bounds ``m_x*``."""

    M_xB: float
    M_xT: float
    m_xB: float
    m_xT: float
    m: int

    def __post_init__(self):
        if min(self.M_xB, self.M_xT, self.m_xB, self.m_xT) <= 0 or self.m <= 0:
            raise ValueError("data bounds must be positive")

    @classmethod
    def from_dataset(cls, dataset) -> "DataBounds":
        x_B, x_T = _data_arrays(dataset)
        nb = np.einsum("ij,ij->i", x_B, x_B)
        nt = np.einsum("ij,ij->i", x_T, x_T)
        m = x_B.shape[0]
        return cls(
            math.sqrt(math.fsum(nb) / m),
            math.sqrt(math.fsum(nt) / m),
            float(np.sqrt(nb.max())),
            float(np.sqrt(nt.max())),
            m,
        )


@dataclass
class OperatorBound:
    """``sup_G`` bounds ``|G(f)(x_T)|`` over the forcing class; ``delta`` is the failure probability."""

    sup_G: float
    delta: float = 0.05

    def __post_init__(self):
        if self.sup_G < 0:
            raise ValueError("sup_G must be non-negative")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")


def rademacher_bound(report: CapacityReport, L: float, bounds: Optional[DataBounds] = None, dataset=None):
    """Empirical and average Rademacher bounds for the class with this composite measure.

    Returns ``(empirical, average)``; either is ``None`` when the data it
    needs (``dataset`` or ``bounds``) is not supplied.
    """
    if report.depth < 2:
        raise ValueError("depth must be at least 2")
    if L <= 0:
        raise ValueError("L must be positive")
    if dataset is None and bounds is None:
        raise ValueError("need a dataset for the empirical bound or DataBounds for the average bound")
    factor = (2 * L) ** (report.depth - 1) * report.composite
    empirical = average = None
    if dataset is not None:
        m = _data_arrays(dataset)[0].shape[0]
        empirical = factor / m * product_norm_sum(dataset)
    if bounds is not None:
        average = factor * bounds.M_xB * bounds.M_xT / math.sqrt(bounds.m)
    return empirical, average


@dataclass
class GenBound:
    B: float
    rademacher: float
    gap_with_factor: float
    gap_without_factor: float


def gen_bound(
    report: CapacityReport,
    bounds: DataBounds,
    op: OperatorBound,
    activations: Sequence[Activation] = (Activation("abs"), Activation("abs")),
) -> GenBound:
    """Excess-risk bound ``2 B R + B^2 sqrt(ln(1/delta) / 2m)``.

    ``gap_with_factor`` multiplies ``R`` by the loss Lipschitz constant ``B``
    (the squared loss on ``[-B, B]``); ``gap_without_factor`` does not.
    """
    a1, a2 = (Activation(a) if isinstance(a, str) else a for a in activations)
    n = report.depth
    B = op.sup_G + a1.lipschitz_constant**n * a2.lipschitz_constant**n * bounds.m_xB * bounds.m_xT * report.lipschitz_product
    L = max(a1.contraction_constant, a2.contraction_constant)
    _, R = rademacher_bound(report, L, bounds)
    conf = B * B * math.sqrt(math.log(1 / op.delta) / (2 * bounds.m))
    return GenBound(B, R, 2 * B * (B * R) + conf, 2 * B * R + conf)


# ---------------------------------------------------------------------------
# Batched constraint values with gradients. Layer arguments are stacks of
# shape (..., rows, cols); all returned arrays share the leading shape.


def _fro(a):
    return np.sqrt(np.sum(a * a, axis=(-2, -1)))


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros(np.broadcast(a, b).shape), where=b != 0)


def _outer_value_and_grad(Bn, Bn1, Tn, Tn1):
    M = np.swapaxes(Bn, -1, -2) @ Tn
    r = np.sqrt(np.sum(Bn1 * Bn1, axis=-1))
    s = np.sqrt(np.sum(Tn1 * Tn1, axis=-1))
    absM = np.abs(M)
    val = np.einsum("...i,...ij,...j->...", r, absM, s)
    G = np.sign(M) * (r[..., :, None] * s[..., None, :])
    g_Bn = Tn @ np.swapaxes(G, -1, -2)
    g_Tn = Bn @ G
    dr = np.einsum("...ij,...j->...i", absM, s)
    ds = np.einsum("...ij,...i->...j", absM, r)
    g_Bn1 = _safe_div(dr, r)[..., None] * Bn1
    g_Tn1 = _safe_div(ds, s)[..., None] * Tn1
    return val, g_Bn, g_Bn1, g_Tn, g_Tn1


def composite_value_and_grad(branch_layers, trunk_layers):
    """Composite measure and its gradient w.r.t. every layer.

    Returns ``(value, branch_grads, trunk_grads)``.
    """
    n = len(branch_layers)
    if n < 2 or len(trunk_layers) != n:
        raise ValueError("need equal depths >= 2")
    outer, g_Bn, g_Bn1, g_Tn, g_Tn1 = _outer_value_and_grad(
        branch_layers[-1], branch_layers[-2], trunk_layers[-1], trunk_layers[-2]
    )
    fb = [_fro(branch_layers[j]) for j in range(n - 2)]
    ft = [_fro(trunk_layers[j]) for j in range(n - 2)]
    factors = [b * t for b, t in zip(fb, ft)]
    inner = np.ones_like(outer)
    for f in factors:
        inner = inner * f
    value = outer * inner
    gb = [None] * n
    gt = [None] * n
    gb[-1], gb[-2] = g_Bn * inner[..., None, None], g_Bn1 * inner[..., None, None]
    gt[-1], gt[-2] = g_Tn * inner[..., None, None], g_Tn1 * inner[..., None, None]
    for j in range(n - 2):
        others = outer.copy()
        for i, f in enumerate(factors):
            if i != j:
                others = others * f
        gb[j] = (others * ft[j] * _safe_div(np.ones_like(fb[j]), fb[j]))[..., None, None] * branch_layers[j]
        gt[j] = (others * fb[j] * _safe_div(np.ones_like(ft[j]), ft[j]))[..., None, None] * trunk_layers[j]
    return value, gb, gt


def frobenius_product_value_and_grad(branch_layers, trunk_layers):
    """Product of the Frobenius norms of all layers, with gradients."""
    norms = [_fro(w) for w in list(branch_layers) + list(trunk_layers)]
    value = np.ones_like(norms[0])
    for nrm in norms:
        value = value * nrm
    grads = []
    for j, w in enumerate(list(branch_layers) + list(trunk_layers)):
        others = np.ones_like(value)
        for i, nrm in enumerate(norms):
            if i != j:
                others = others * nrm
        grads.append((others * _safe_div(np.ones_like(norms[j]), norms[j]))[..., None, None] * w)
    nb = len(branch_layers)
    return value, grads[:nb], grads[nb:]


def linear11_value_and_grad(branch_layers, trunk_layers):
    (W_B,), (W_T,) = branch_layers, trunk_layers
    M = np.swapaxes(W_B, -1, -2) @ W_T
    value = _fro(M)
    dM = M * _safe_div(np.ones_like(value), value)[..., None, None]
    return value, [W_T @ np.swapaxes(dM, -1, -2)], [W_B @ dM]


def relu22_value_and_grad(branch_layers, trunk_layers):
    B1, B2 = branch_layers
    T1, T2 = trunk_layers
    M = np.swapaxes(B2, -1, -2) @ T2
    r = np.sqrt(np.sum(B1 * B1, axis=-1))
    s = np.sqrt(np.sum(T1 * T1, axis=-1))
    vals = np.abs(M) * (r[..., :, None] * s[..., None, :])
    flat = vals.reshape(vals.shape[:-2] + (-1,))
    idx = np.argmax(flat, axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    E = onehot.reshape(vals.shape)
    value = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    G = E * np.sign(M) * (r[..., :, None] * s[..., None, :])
    dr = np.einsum("...ij,...j->...i", E * np.abs(M), s)
    ds = np.einsum("...ij,...i->...j", E * np.abs(M), r)
    g_B2 = T2 @ np.swapaxes(G, -1, -2)
    g_T2 = B2 @ G
    g_B1 = _safe_div(dr, r)[..., None] * B1
    g_T1 = _safe_div(ds, s)[..., None] * T1
    return value, [g_B1, g_B2], [g_T1, g_T2]
