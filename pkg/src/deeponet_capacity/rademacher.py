"""Empirical Rademacher complexity estimates and numerical lemma checks.

The estimator approximates ``E_eps sup_{f in F} (1/m) sum_i eps_i f(x_i)``
for norm-constrained DeepONet classes. The inner sup is found by ascent and
can only be under-estimated, so every value returned here is a lower bound
on the true empirical complexity. Comparisons against the closed-form bounds
are therefore one-sided and sound.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import capacity as cap
from .linalg import spectral_norms
from .network import Activation, backward, forward_cache, glorot_layers
from .seeding import substream

KINDS = ("composite", "spheres", "linear11", "relu22")
CHUNK = 16  # epsilon vectors per work unit; fixed so results ignore --threads
EXACT_M = 6
EXACT_WIDTH = 3
GRID_DEGREES = 2.0


@dataclass(frozen=True)
class ClassSpec:
    """A constrained DeepONet class.

    ``branch_widths`` and ``trunk_widths`` run from input dim to output dim.
    ``C`` bounds the kind-specific constraint:

    composite
        outer capacity times the inner Frobenius products (abs or identity).
    spheres
        last layers have a single row and the product of the Frobenius norms of
        all layers is at most ``C``; with ``C = 1`` this is the class whose last
        layers are unit vectors and whose other layers are unit-Frobenius.
    linear11
        single linear layers with ``|W_B^T W_T|_F <= C``.
    relu22
        depth-2 relu nets with the max-entry constraint.
    """

    kind: str
    branch_widths: tuple
    trunk_widths: tuple
    activation: str = "abs"
    C: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "branch_widths", tuple(int(w) for w in self.branch_widths))
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        bw, tw = self.branch_widths, self.trunk_widths
        if self.kind not in KINDS:
            raise ValueError(f"unknown class kind {self.kind!r}")
        if self.C < 0 or not math.isfinite(self.C):
            raise ValueError(f"constraint value must be finite and non-negative, got {self.C}")
        if len(bw) < 2 or len(tw) < 2 or min(bw + tw) < 1:
            raise ValueError("widths need an input and an output entry, all positive")
        if bw[-1] != tw[-1]:
            raise ValueError("branch and trunk output widths differ")
        if len(bw) != len(tw):
            raise ValueError("branch and trunk depths differ")
        n = len(bw) - 1
        act = self.activation
        if self.kind == "composite" and (n < 2 or act not in ("abs", "identity")):
            raise ValueError("composite classes need depth >= 2 and abs or identity activation")
        if self.kind == "spheres" and (bw[-1] != 1 or act not in ("abs", "identity")):
            raise ValueError("spheres classes need scalar outputs and abs or identity activation")
        if self.kind == "linear11" and n != 1:
            raise ValueError("linear11 classes have a single layer per side")
        if self.kind == "relu22" and (n != 2 or act != "relu"):
            raise ValueError("relu22 classes have two relu layers per side")

    @property
    def depth(self) -> int:
        return len(self.branch_widths) - 1

    @property
    def act(self) -> Activation:
        return Activation(self.activation)

    def with_C(self, C: float) -> "ClassSpec":
        return ClassSpec(self.kind, self.branch_widths, self.trunk_widths, self.activation, C)

    def constraint(self):
        return {
            "composite": cap.composite_value_and_grad,
            "spheres": cap.frobenius_product_value_and_grad,
            "linear11": cap.linear11_value_and_grad,
            "relu22": cap.relu22_value_and_grad,
        }[self.kind]


@dataclass
class RademacherEstimate:
    value: float
    per_epsilon_sups: list
    n_epsilon: int
    inner_solver: dict
    seed: int
    exhaustive: bool
    is_lower_bound: bool = True
    bound: Optional[float] = None

    @property
    def bound_ratio(self) -> Optional[float]:
        if self.bound is None or self.bound == 0:
            return None
        return self.value / self.bound

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "n_epsilon": self.n_epsilon,
            "exhaustive": self.exhaustive,
            "inner_solver": self.inner_solver,
            "seed": self.seed,
            "is_lower_bound": self.is_lower_bound,
            "bound": self.bound,
            "bound_ratio": self.bound_ratio,
            "per_epsilon_sups": list(self.per_epsilon_sups),
        }


def _arrays(dataset):
    x_B = np.asarray(dataset.x_B, dtype=np.float64)
    x_T = np.asarray(dataset.x_T, dtype=np.float64)
    if x_B.ndim != 2 or x_T.ndim != 2 or x_B.shape[0] != x_T.shape[0]:
        raise ValueError("dataset must hold paired 2-D arrays x_B, x_T")
    if x_B.shape[0] == 0:
        raise ValueError("dataset is empty")
    return x_B, x_T


def sign_vectors(m: int, n_epsilon: Optional[int], seed: int):
    """Sign vectors to average over and whether they are the full set.

    With ``n_epsilon=None`` all ``2^m`` vectors are used, but only those with
    ``eps_1 = +1`` are returned: every class handled here is closed under
    negation, so ``eps`` and ``-eps`` have the same sup and the mean is
    unchanged.
    """
    if n_epsilon is None:
        rows = [(1,) + rest for rest in itertools.product((1, -1), repeat=m - 1)]
        return np.array(rows, dtype=np.float64), True
    if n_epsilon <= 0:
        raise ValueError("n_epsilon must be positive")
    rng = substream(seed, "epsilon")
    return rng.choice(np.array([-1.0, 1.0]), size=(n_epsilon, m)), False


# ---------------------------------------------------------------------------
# Inner sup by multistart ascent


def _objective_and_grad(spec: ClassSpec, Bs, Ts, x_B, x_T, eps, want_grad=True):
    """``|S| / c`` per (eps, restart) and its gradient, ``S = sum_i eps_i f(x_i)``."""
    act = spec.act
    fb, cb = forward_cache(Bs, None, act, x_B)
    ft, ct = forward_cache(Ts, None, act, x_T)
    S = np.einsum("...mk,...mk,...m->...", fb, ft, eps[:, None, :])
    c, gcb, gct = spec.constraint()(Bs, Ts)
    ok = c > 0
    c_safe = np.where(ok, c, 1.0)
    F = np.where(ok, np.abs(S) / c_safe, 0.0)
    if not want_grad:
        return F, None, None
    w = eps[:, None, :, None]
    gb = backward(Bs, act, cb, w * ft)
    gt = backward(Ts, act, ct, w * fb)
    a = (np.sign(S) / c_safe)[..., None, None]
    b = (F / c_safe)[..., None, None]
    gB = [a * g - b * h for g, h in zip(gb, gcb)]
    gT = [a * g - b * h for g, h in zip(gt, gct)]
    return F, gB, gT


def _normalize(layers):
    out = []
    for w in layers:
        nrm = np.sqrt(np.sum(w * w, axis=(-2, -1), keepdims=True))
        out.append(w / np.where(nrm > 0, nrm, 1.0))
    return out


def _init_layers(spec: ClassSpec, e_indices, restarts: int, seed: int):
    Bs = [[] for _ in range(spec.depth)]
    Ts = [[] for _ in range(spec.depth)]
    for e in e_indices:
        rng = substream(seed, "epsilon-init", int(e))
        for side, widths in ((Bs, spec.branch_widths), (Ts, spec.trunk_widths)):
            for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
                side[i].append(rng.standard_normal((restarts, fo, fi)))
    return _normalize([np.stack(b) for b in Bs]), _normalize([np.stack(t) for t in Ts])


def _ascent(spec: ClassSpec, x_B, x_T, eps, e_indices, restarts, steps, step0, seed):
    """Best ``|S|/c`` found for each row of ``eps``."""
    Bs, Ts = _init_layers(spec, e_indices, restarts, seed)
    F, gB, gT = _objective_and_grad(spec, Bs, Ts, x_B, x_T, eps)
    step = np.full(F.shape, step0)
    for _ in range(steps):
        gn = np.sqrt(sum(np.sum(g * g, axis=(-2, -1)) for g in gB + gT))
        scale = (step / np.where(gn > 0, gn, 1.0))[..., None, None]
        nB = _normalize([w + scale * g for w, g in zip(Bs, gB)])
        nT = _normalize([w + scale * g for w, g in zip(Ts, gT)])
        nF, ngB, ngT = _objective_and_grad(spec, nB, nT, x_B, x_T, eps)
        acc = nF >= F
        a4 = acc[..., None, None]
        Bs = [np.where(a4, n, o) for n, o in zip(nB, Bs)]
        Ts = [np.where(a4, n, o) for n, o in zip(nT, Ts)]
        gB = [np.where(a4, n, o) for n, o in zip(ngB, gB)]
        gT = [np.where(a4, n, o) for n, o in zip(ngT, gT)]
        F = np.where(acc, nF, F)
        step = np.where(acc, np.minimum(step * 1.25, 1.0), step * 0.5)
    return F.max(axis=-1)


# ---------------------------------------------------------------------------
# Grid solver for the single-layer sphere class


def _grid_points(dim: int) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0]])  # sign is irrelevant under |.|
    if dim == 2:
        n = int(round(360.0 / GRID_DEGREES))
        return cap.sphere_grid(2, n)
    if dim == 3:
        cell = math.radians(GRID_DEGREES) ** 2
        return cap.sphere_grid(3, int(math.ceil(4 * math.pi / cell)))
    raise ValueError("grid solver supports sphere dims <= 3")


def _grid_sup(x_B, x_T, eps):
    """``max_{|v|=1} |A^T v|`` over a grid, ``A = sum_i eps_i x_B,i x_T,i^T``.

    For a fixed ``v`` the sup over ``w`` is exact, so only one sphere is gridded.
    """
    A = np.einsum("em,mi,mj->eij", eps, x_B, x_T)
    if A.shape[1] > A.shape[2]:
        A = np.swapaxes(A, 1, 2)
    V = _grid_points(A.shape[1])
    return np.linalg.norm(np.einsum("vi,eij->evj", V, A), axis=-1).max(axis=1)


def estimate_empirical_rademacher(
    spec: ClassSpec,
    dataset,
    n_epsilon: Optional[int] = None,
    seed: int = 0,
    restarts: int = 32,
    steps: int = 200,
    step: float = 0.05,
    solver: str = "ascent",
    threads: int = 1,
    with_bound: bool = True,
) -> RademacherEstimate:
    """Lower-bound estimate of the empirical Rademacher complexity of ``spec`` on ``dataset``.

    Every function class here is positively homogeneous in each layer, as is
    its constraint, so ``sup_{c(w) <= C} S(w) = C sup_w |S(w)| / c(w)``.
    That ratio is maximized over a product of unit-Frobenius spheres by
    normalized-gradient ascent with backtracking, from ``restarts`` seeded
    starts per sign vector.
    """
    x_B, x_T = _arrays(dataset)
    if x_B.shape[1] != spec.branch_widths[0] or x_T.shape[1] != spec.trunk_widths[0]:
        raise ValueError("dataset dims do not match the class input widths")
    if restarts <= 0 or steps < 0 or step <= 0:
        raise ValueError("solver budget must be positive")
    m = x_B.shape[0]
    eps, exhaustive = sign_vectors(m, n_epsilon, seed)
    if solver == "grid":
        if spec.kind != "spheres" or spec.depth != 1 or min(x_B.shape[1], x_T.shape[1]) > 3:
            raise ValueError("grid solver needs a depth-1 spheres class with a sphere of dim <= 3")
        info = {"kind": "grid", "degrees": GRID_DEGREES}
    elif solver == "ascent":
        info = {"kind": "multistart-ascent", "restarts": restarts, "steps": steps, "step": step}
    else:
        raise ValueError(f"unknown solver {solver!r}")

    if spec.C == 0:
        sups = np.zeros(eps.shape[0])
    else:
        chunks = [np.arange(s, min(s + CHUNK, eps.shape[0])) for s in range(0, eps.shape[0], CHUNK)]

        def work(idx):
            if solver == "grid":
                return _grid_sup(x_B, x_T, eps[idx])
            return _ascent(spec, x_B, x_T, eps[idx], idx, restarts, steps, step, seed)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(c) for c in chunks]
        sups = spec.C * np.concatenate(parts)
    value = math.fsum(sups.tolist()) / len(sups) / m
    bound = theoretical_bound(spec, dataset) if with_bound else None
    return RademacherEstimate(value, sups.tolist(), int(eps.shape[0]), info, seed, exhaustive, True, bound)


def theoretical_bound(spec: ClassSpec, dataset, L: Optional[float] = None) -> float:
    """Closed-form upper bound matching the class kind."""
    if spec.kind == "linear11":
        return cap.bound_11(spec.C, dataset)
    if spec.kind == "relu22":
        return cap.bound_22(spec.C, spec.branch_widths[1], spec.trunk_widths[1], dataset)
    L = spec.act.contraction_constant if L is None else L
    m = _arrays(dataset)[0].shape[0]
    return (2 * L) ** (spec.depth - 1) * spec.C / m * cap.product_norm_sum(dataset)


# ---------------------------------------------------------------------------
# Rank-one sup


def sup_rank_one_exact(dataset, eps) -> float:
    """``sup_{|v1|=|v2|=1} sum_i eps_i (v1.x_B,i)(v2.x_T,i)``, the spectral norm of the signed sum."""
    return float(sup_rank_one_batch(dataset, np.asarray(eps, dtype=np.float64)[None, :])[0])


def sup_rank_one_batch(dataset, eps) -> np.ndarray:
    x_B, x_T = _arrays(dataset)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[1] != x_B.shape[0]:
        raise ValueError("need one sign per sample")
    return spectral_norms(np.einsum("em,mi,mj->eij", eps, x_B, x_T))


@dataclass
class _Data:
    x_B: np.ndarray
    x_T: np.ndarray


def check_rank_one(n_datasets: int = 100, max_m: int = 12, seed: int = 0, slack: float = 1e-9) -> dict:
    """Mean over all sign vectors of the rank-one sup against ``sqrt(sum |x_B|^2 |x_T|^2)``."""
    rng = substream(seed, "verify", 51)
    worst, violations = 0.0, 0
    for _ in range(n_datasets):
        m = int(rng.integers(1, max_m + 1))
        data = _Data(rng.standard_normal((m, int(rng.integers(1, 5)))), rng.standard_normal((m, int(rng.integers(1, 5)))))
        eps, _ = sign_vectors(m, None, seed)
        mean = math.fsum(sup_rank_one_batch(data, eps).tolist()) / eps.shape[0]
        rhs = cap.product_norm_sum(data)
        worst = max(worst, mean / rhs if rhs > 0 else 0.0)
        violations += mean > rhs + slack
    return {"name": "rank_one", "trials": n_datasets, "max_ratio": worst, "violations": int(violations)}


# ---------------------------------------------------------------------------
# Pointwise contraction inequalities


def check_contraction(phi_kind: str = "abs", trials: int = 10**6, seed: int = 0, L: float = 1.0, B1=None, B2=None) -> dict:
    """Sample ``(f, g, f', g')`` and test the contraction inequality pointwise.

    ``abs``: ``||f||g| - |f'||g'|| <= L |fg - f'g'|``.
    ``biased_abs``: ``||f+B1||g+B2| - |f'+B1||g'+B2||`` against
    ``L(|fg - f'g'| + |B2||f - f'| + |B1||g - g'|)``; the offsets are drawn
    per tuple unless given.
    """
    if trials <= 0:
        raise ValueError("trials must be positive")
    rng = substream(seed, "verify", 33)
    max_ratio, violations = 0.0, 0
    done = 0
    while done < trials:
        n = min(250_000, trials - done)
        scale = np.exp(rng.uniform(-3, 3, size=(n, 1)))
        f, g, f2, g2 = (rng.standard_normal((n, 4)) * scale).T
        if phi_kind == "abs":
            lhs = np.abs(np.abs(f) * np.abs(g) - np.abs(f2) * np.abs(g2))
            rhs = np.abs(f * g - f2 * g2)
        elif phi_kind == "biased_abs":
            b1 = rng.standard_normal(n) * scale[:, 0] if B1 is None else np.full(n, float(B1))
            b2 = rng.standard_normal(n) * scale[:, 0] if B2 is None else np.full(n, float(B2))
            lhs = np.abs(np.abs(f + b1) * np.abs(g + b2) - np.abs(f2 + b1) * np.abs(g2 + b2))
            rhs = np.abs(f * g - f2 * g2) + np.abs(b2) * np.abs(f - f2) + np.abs(b1) * np.abs(g - g2)
        else:
            raise ValueError(f"unknown phi kind {phi_kind!r}")
        rhs = L * rhs
        # rounding slack: both sides are a few flops from the same inputs
        tol = 1e-12 * (np.abs(f * g) + np.abs(f2 * g2) + 1.0) * (1 + (0 if phi_kind == "abs" else np.abs(b1) + np.abs(b2)))
        violations += int(np.sum(lhs > rhs + tol))
        pos = rhs > 0
        if pos.any():
            max_ratio = max(max_ratio, float(np.max(lhs[pos] / rhs[pos])))
        done += n
    return {"name": f"contraction_{phi_kind}", "trials": trials, "L": L, "max_ratio": max_ratio, "violations": violations}


# ---------------------------------------------------------------------------
# E sup |<eps, f>| <= 2 E sup <eps, f>


def abs_sup_sides(family: np.ndarray):
    """Exact ``(E sup |<eps,f>|, E sup <eps,f>, min_eps sup <eps,f>)`` for a finite family (rows)."""
    family = np.atleast_2d(np.asarray(family, dtype=np.float64))
    m = family.shape[1]
    eps = np.array(list(itertools.product((1.0, -1.0), repeat=m)))
    ip = eps @ family.T
    sup_abs = np.abs(ip).max(axis=1)
    sup = ip.max(axis=1)
    return math.fsum(sup_abs.tolist()) / len(eps), math.fsum(sup.tolist()) / len(eps), float(sup.min())


def check_abs_sup(trials: int = 100, seed: int = 0, max_m: int = 12, max_family: int = 6) -> dict:
    """Random finite families: ``E sup|<eps,f>| <= 2 E sup <eps,f>`` whenever the sup is never negative."""
    rng = substream(seed, "verify", 11)
    violations, resampled, max_ratio = 0, 0, 0.0
    for _ in range(trials):
        while True:
            m = int(rng.integers(1, max_m + 1))
            k = int(rng.integers(1, max_family + 1))
            fam = rng.standard_normal((k, m)) * np.exp(rng.uniform(-2, 2, size=(k, 1)))
            style = rng.integers(3)
            if style == 1:
                fam = np.vstack([fam, -fam])
            elif style == 2:
                fam = np.vstack([fam, np.zeros(m)])
            lhs, sup, low = abs_sup_sides(fam)
            if low >= 0:
                break
            resampled += 1
        if lhs > 2 * sup * (1 + 1e-12) + 1e-15:
            violations += 1
        if sup > 0:
            max_ratio = max(max_ratio, lhs / (2 * sup))
    return {"name": "abs_sup", "trials": trials, "max_ratio": max_ratio, "violations": violations, "resampled": resampled}


# ---------------------------------------------------------------------------
# Peeling


def _features(layers, act: Activation, X):
    """Output of ``layers`` with the activation applied after every one of them."""
    h = X
    for w in layers:
        h = act(h @ w.T)
    return h


def check_peeling(
    spec: ClassSpec,
    dataset,
    lemma: str = "outer",
    n_epsilon: Optional[int] = None,
    seed: int = 0,
    model=None,
    restarts: int = 32,
    steps: int = 200,
) -> dict:
    """Compare the two sides of a peeling inequality with the lower layers held fixed.

    The lower layers (``W_rest``) are taken from ``model`` when given, else
    drawn from the seed; as a singleton set they are a valid instance of the
    lemma. The right side is then an exact spectral norm per sign vector and
    the left side is a lower-bound estimate, so ``lhs <= 2 L C rhs`` is a
    sound check. ``C`` is the capacity of the peeled layers of ``model`` when
    given, else ``spec.C``.

    ``outer`` peels the last two layers of both nets (depth >= 2);
    ``inner`` peels layer ``n-2`` below unit-vector heads (depth >= 3).
    """
    if spec.kind != "composite":
        raise ValueError("peeling is checked on composite classes")
    n = spec.depth
    x_B, x_T = _arrays(dataset)
    m = x_B.shape[0]
    act = spec.act
    if model is not None:
        B = [np.asarray(w) for w in model.branch.layers]
        T = [np.asarray(w) for w in model.trunk.layers]
        if [w.shape[1] for w in B] + [B[-1].shape[0]] != list(spec.branch_widths):
            raise ValueError("model does not match the class widths")
    else:
        rng = substream(seed, "verify", 44)
        B = glorot_layers(spec.branch_widths, rng)
        T = glorot_layers(spec.trunk_widths, rng)
    if lemma == "outer":
        keep = n - 2
        C = cap.capacity_outer(model) if model is not None else spec.C
        fB, fT = _features(B[:keep], act, x_B), _features(T[:keep], act, x_T)
        lhs_spec = ClassSpec("composite", (fB.shape[1],) + spec.branch_widths[-2:], (fT.shape[1],) + spec.trunk_widths[-2:], spec.activation, C)
    elif lemma == "inner":
        if n < 3:
            raise ValueError("the inner peeling step needs depth >= 3")
        keep = n - 3
        C = cap.capacity_inner_exact(B[n - 3], T[n - 3]) if model is not None else spec.C
        fB, fT = _features(B[:keep], act, x_B), _features(T[:keep], act, x_T)
        lhs_spec = ClassSpec("spheres", (fB.shape[1], spec.branch_widths[n - 2], 1), (fT.shape[1], spec.trunk_widths[n - 2], 1), spec.activation, C)
    else:
        raise ValueError("lemma must be 'outer' or 'inner'")
    data = _Data(fB, fT)
    dims = list(lhs_spec.branch_widths[1:-1]) + list(lhs_spec.trunk_widths[1:-1]) + [fB.shape[1], fT.shape[1]]
    exact_regime = m <= EXACT_M and max(dims) <= EXACT_WIDTH and n_epsilon is None
    est = estimate_empirical_rademacher(lhs_spec, data, n_epsilon, seed, restarts, steps, with_bound=False)
    eps, _ = sign_vectors(m, n_epsilon, seed)
    rhs = math.fsum(sup_rank_one_batch(data, eps).tolist()) / eps.shape[0] / m
    factor = 2 * act.contraction_constant * C
    ok = est.value <= factor * rhs * (1 + 1e-9) + 1e-15
    return {
        "name": f"peeling_{lemma}",
        "lhs_est": est.value,
        "rhs_est": rhs,
        "C": C,
        "factor": factor,
        "ratio": est.value / (factor * rhs) if factor * rhs > 0 else 0.0,
        "exact_regime": exact_regime,
        "satisfied_in_exact_regime": bool(ok) if exact_regime else None,
        "satisfied": bool(ok),
        "violations": int(exact_regime and not ok),
    }
