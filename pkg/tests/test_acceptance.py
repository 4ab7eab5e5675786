"""Acceptance criteria, each at its stated tolerance and time budget.

Every test appends one PASS/FAIL line that is printed in the pytest terminal
summary; ``python tests/test_acceptance.py`` runs them standalone.
"""

import math
import time

import numpy as np
import pytest

from deeponet_capacity import capacity as cap
from deeponet_capacity import operator_data as od
from deeponet_capacity import rademacher as rad
from deeponet_capacity import training as tr
from deeponet_capacity.cli import dominance_suite, peeling_suite
from deeponet_capacity.network import deeponet_outputs, init_deeponet, relu_to_abs
from deeponet_capacity.seeding import substream

from conftest import ACCEPTANCE_LINES


def record(n, ok, seconds, budget, detail):
    ok = ok and seconds < budget
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail}; {seconds:.1f}s of {budget}s)")
    print(ACCEPTANCE_LINES[-1])
    return ok


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_1_scaling_invariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_out = worst_comp = 0.0
    for _ in range(100):
        n = int(rng.choice([2, 3, 4]))
        p = int(rng.integers(1, 9))
        bw = [int(rng.integers(1, 9)) for _ in range(n)] + [p]
        tw = [int(rng.integers(1, 9)) for _ in range(n)] + [p]
        model = init_deeponet(bw, tw, "abs", rng)
        s = np.exp(rng.uniform(-1, 1, size=2 * n))
        s[-1] /= np.prod(s)
        scaled = model.with_layers([w * c for w, c in zip(model.branch.layers, s[:n])], [w * c for w, c in zip(model.trunk.layers, s[n:])])
        x_B, x_T = rng.standard_normal((20, bw[0])), rng.standard_normal((20, tw[0]))
        a, b = deeponet_outputs(model, x_B, x_T), deeponet_outputs(scaled, x_B, x_T)
        worst_out = max(worst_out, float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))))
        worst_comp = max(worst_comp, rel(cap.composite_measure(model).composite, cap.composite_measure(scaled).composite))
    ok = record(1, worst_out <= 1e-10 and worst_comp <= 1e-10, time.perf_counter() - t0, 10, f"max rel diff outputs {worst_out:.2e}, composite {worst_comp:.2e}")
    assert ok


def test_2_inner_capacity_closed_form():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_oracle = worst_sur = 0.0
    for i in range(50):
        B = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        T = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        exact = cap.capacity_inner_exact(B, T)
        oracle = cap.capacity_inner_oracle(B, T, seed=i)
        worst_oracle = max(worst_oracle, rel(exact, oracle))
    for _ in range(200):
        B = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        T = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        worst_sur = max(worst_sur, rel(cap.capacity_inner_exact(B, T), cap.capacity_inner_surrogate(B, T)))
    ok = record(2, worst_oracle <= 1e-3 and worst_sur <= 1e-8, time.perf_counter() - t0, 60, f"oracle rel {worst_oracle:.2e}, surrogate rel {worst_sur:.2e}")
    assert ok


def test_3_bound_dominance():
    t0 = time.perf_counter()
    r = dominance_suite(50, seed=0)
    ok = record(3, r["violations"] == 0, time.perf_counter() - t0, 300, f"50 classes, {r['violations']} violations, max estimate/bound {r['max_ratio']:.3f}")
    assert ok


def test_4_lemma_certifications():
    t0 = time.perf_counter()
    results = [
        rad.check_contraction("abs", 10**6, seed=0),
        rad.check_abs_sup(100, seed=0, max_m=12),
        rad.check_rank_one(100, max_m=12, seed=0, slack=1e-9),
        *peeling_suite(10, seed=0),
    ]
    v = {r["name"]: r["violations"] for r in results}
    ok = record(4, not any(v.values()), time.perf_counter() - t0, 600, ", ".join(f"{k}={n}" for k, n in v.items()))
    assert ok


def test_5_relu_to_abs():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst, widths_ok = 0.0, True
    for _ in range(20):
        n = int(rng.integers(2, 5))
        p = int(rng.integers(1, 6))
        bw = [int(rng.integers(1, 7)) for _ in range(n)] + [p]
        tw = [int(rng.integers(1, 7)) for _ in range(n)] + [p]
        model = init_deeponet(bw, tw, "relu", rng)
        conv = relu_to_abs(model, input_radius=1.0)
        for a, b in ((model.branch, conv.branch), (model.trunk, conv.trunk)):
            widths_ok &= all(w2.shape[0] == 3 * w1.shape[0] for w1, w2 in zip(a.layers[:-1], b.layers[:-1]))
            widths_ok &= b.layers[-1].shape[0] == a.layers[-1].shape[0]
        x_B = rng.uniform(-1, 1, size=(1000, bw[0]))
        x_T = rng.uniform(-1, 1, size=(1000, tw[0]))
        worst = max(worst, float(np.max(np.abs(deeponet_outputs(model, x_B, x_T) - deeponet_outputs(conv, x_B, x_T)))))
    ok = record(5, worst <= 1e-9 and widths_ok, time.perf_counter() - t0, 30, f"max discrepancy {worst:.2e}, widths tripled: {widths_ok}")
    assert ok


def _fd_check(model, batch, lam, rng, coords=50):
    g = tr.objective_grad(model, batch, lam)
    params, grads = tr._flatten(model), tr._grad_list(model, g)
    f = lambda ps: tr.objective_grad(tr._rebuild(model, ps), batch, lam).objective
    f0 = g.objective
    worst, checked, h = 0.0, 0, 1e-5
    while checked < coords:
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        up = [q.copy() for q in params]
        dn = [q.copy() for q in params]
        up[k][idx] += h
        dn[k][idx] -= h
        fu, fd_ = f(up), f(dn)
        central = (fu - fd_) / (2 * h)
        # a kink within reach shows up as disagreeing one-sided slopes
        if abs((fu - f0) / h - (f0 - fd_) / h) > 1e-4 * max(1.0, abs(central)):
            continue
        worst = max(worst, abs(central - grads[k][idx]) / max(1.0, abs(central)))
        checked += 1
    return worst


def test_6_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(20):
        n = int(rng.integers(2, 5))
        p = int(rng.integers(1, 5))
        bw = [int(rng.integers(1, 7)) for _ in range(n)] + [p]
        tw = [int(rng.integers(1, 7)) for _ in range(n)] + [p]
        model = init_deeponet(bw, tw, "abs", rng)
        batch = tr.Batch(rng.standard_normal((8, bw[0])), rng.standard_normal((8, tw[0])), rng.standard_normal(8))
        worst = max(worst, _fd_check(model, batch, 0.0 if i % 2 else 0.01, rng))
    ok = record(6, worst <= 1e-5, time.perf_counter() - t0, 60, f"20 models x 50 coordinates, max rel error {worst:.2e}")
    assert ok


def test_7_ode_labels():
    t0 = time.perf_counter()
    errs = []
    for n in (10, 20, 40):
        y = od.rk4_solve(lambda t, y: y, np.array([1.0]), np.linspace(0, 1, n + 1))[-1, 0]
        errs.append(abs(y - math.e))
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    one = od.ForcingFunction(1.0, (), (), 2 * math.pi)
    cfg = od.PendulumConfig(k=0.0, steps=1000)
    t = np.linspace(0.0, 1.0, 1001)  # on the solver grid, so no interpolation error
    analytic = float(np.max(np.abs(od.pendulum_labels(cfg, [one] * t.size, t) - t**2 / 2)))
    f = od.ForcingFunction(0.3, (0.5, -0.2), (0.1, 0.7), 2 * math.pi)
    quad = abs(float(f.integral(0.37)) - 0.2709058964302077)
    ok = all(3.5 <= o <= 4.5 for o in orders) and analytic <= 1e-12 and quad <= 1e-8
    ok = record(7, ok, time.perf_counter() - t0, 10, f"orders {', '.join(f'{o:.3f}' for o in orders)}, k=0 error {analytic:.1e}, quadrature error {quad:.1e}")
    assert ok


def test_8_end_to_end():
    t0 = time.perf_counter()
    cfg = od.AntiderivativeConfig()
    converged, smaller, gaps_ok, lines = True, 0, True, []
    for seed in range(5):
        train = od.make_antiderivative_dataset(cfg, 512, 2 * seed)
        test = od.make_antiderivative_dataset(cfg, 512, 2 * seed + 1)
        model0 = init_deeponet([train.d1, 32, 32, 32], [train.d2, 32, 32, 32], "abs", substream(seed, "init"))
        comps = []
        for lam in (0.0, 1e-2):
            run = tr.train(tr.TrainConfig(lam=lam, lam_warmup=60 if lam else 0, seed=seed, eval_every=125), model0, train, test)
            rep = tr.gen_gap_report(run.model, train, test)
            frac = run.history[-1]["train_loss"] / run.initial_train_loss
            converged &= frac < 0.1
            gaps_ok &= rep["empirical_gap"] <= rep["gap_bound_with_factor"]
            comps.append(rep["composite"])
            lines.append(f"seed {seed} lam {lam:g}: loss ratio {frac:.4f}, composite {rep['composite']:.4g}, gap {rep['empirical_gap']:.3g} <= bound {rep['gap_bound_with_factor']:.3g}")
        smaller += comps[1] < comps[0]
    for ln in lines:
        print(ln)
    ok = record(8, converged and smaller >= 3 and gaps_ok, time.perf_counter() - t0, 900, f"converged {converged}, regularized smaller in {smaller}/5 seeds, gaps within bound {gaps_ok}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
