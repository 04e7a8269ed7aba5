"""64-bit verification suites run by ``rwf verify``.

Each suite returns a list of :class:`Check` rows; a suite passes when every
row passes.
"""

from dataclasses import dataclass

import numpy as np

from .backbone import (
    build_model,
    rwf_block_forward,
    standard_block_forward,
)
from .numerics import RngStream, logsumexp
from .routing import (
    RoutingParams,
    energy_minimizer_oracle,
    free_energy,
    grid_min_energy,
    init_routing_params,
    lipschitz_probe,
    route,
    routing_matrix,
)
from .training import OptState, grad_check, toy_config, train_step


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------


def energy_suite(n_instances=100, grid_step=0.005, n_identity=1000, seed=0):
    rng = RngStream(seed)
    betas = (0.5, 1.0, 4.0)
    worst_dist, worst_gap, ok_min = 0.0, np.inf, True
    for i in range(n_instances):
        r = rng.child(0, i)
        L = 2 + i % 3
        d = 3
        beta = betas[(i // 3) % 3]
        K = r.normal((L, d), 1.0)
        q = r.normal((d,), 1.0)
        row = routing_matrix(q[None, :], K, beta)[0]
        p_grid = energy_minimizer_oracle(q, K, beta, grid_step)
        worst_dist = max(worst_dist, float(np.max(np.abs(p_grid - row))))
        gap = grid_min_energy(q, K, beta, grid_step) - free_energy(row, q, K, beta)
        worst_gap = min(worst_gap, gap)
        ok_min &= gap >= 0.0
    checks = [
        Check("grid argmin within 0.01 (l-inf) of softmax row", worst_dist <= 0.01,
              f"max distance {worst_dist:.4g} over {n_instances} instances"),
        Check("F(softmax row) <= F(p) for every grid point", bool(ok_min),
              f"min grid gap {worst_gap:.3g}"),
    ]
    worst = 0.0
    for i in range(n_identity):
        r = rng.child(1, i)
        L = 2 + i % 7
        s = r.normal((L,), 3.0)
        beta = float(np.exp(r.generator.uniform(np.log(0.1), np.log(10.0))))
        p = routing_matrix(s[None, :], np.eye(L), beta)[0]
        lhs = free_energy(p, s, np.eye(L), beta)
        rhs = -logsumexp(beta * s) / beta
        worst = max(worst, abs(lhs - rhs))
    checks.append(Check("F(softmax(beta s)) == -logsumexp(beta s)/beta", worst <= 1e-9,
                        f"max |diff| {worst:.3g} over {n_identity} vectors"))
    return checks


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def gradient_suite(seeds=(0, 1, 2, 3, 4), tol=1e-4):
    checks = []
    cfg = toy_config()
    for s in seeds:
        rep = grad_check(cfg, RngStream(s), tol=tol)
        name, err = max(rep["groups"].items(), key=lambda kv: kv[1])
        checks.append(Check(f"toy RwF gradients, seed {s}", rep["passed"],
                            f"{len(rep['groups'])} groups, worst {name} rel err {err:.3g}"))
    rep = grad_check(toy_config(depth=0, k=0), RngStream(0), tol=1e-6)
    checks.append(Check("head-only linear model", rep["passed"],
                        f"worst rel err {max(rep['groups'].values()):.3g}"))
    return checks


# ---------------------------------------------------------------------------
# structural invariants
# ---------------------------------------------------------------------------


def _random_block(rng, d, heads, m, scale=1.0):
    cfg = toy_config(d=d, heads=heads, m=max(m, 1), k=1, depth=1)
    model = build_model(cfg, rng)
    for i, (name, val) in enumerate(model.params.items()):
        if val.ndim == 1:
            val += rng.child(9, i).normal(val.shape, 0.3)
        elif name.endswith("route.Q"):
            val *= 50.0 * scale
    block = model.block(0)
    if m == 0:
        r = block.routing
        block.routing = RoutingParams(r.Q[:0], r.W_Q, r.W_K, r.W_V, r.beta)
    return block


def invariants_suite(n_cases=1000, seed=0):
    rng = RngStream(seed)
    checks = []

    stoch, hull = 0.0, 0.0
    for i in range(n_cases):
        r = rng.child(0, i)
        L, d, m = 1 + i % 9, 2 + i % 5, 1 + i % 4
        scale = float(10.0 ** r.generator.uniform(-2, 2))
        params = init_routing_params(d, m, r.child(0), beta=scale)
        params.Q *= 50.0
        Z = r.child(1).normal((L, d), scale)
        out = route(Z, params)
        stoch = max(stoch, float(np.max(np.abs(out.A.sum(axis=-1) - 1.0))))
        if np.any(out.A < 0):
            stoch = np.inf
        V = Z @ params.W_V
        lo, hi = V.min(axis=0), V.max(axis=0)
        hull = max(hull, float(np.max(np.maximum(lo - out.P, out.P - hi))))
    checks.append(Check("routing rows stochastic", stoch <= 1e-9, f"max |row sum - 1| {stoch:.3g}"))
    checks.append(Check("retrieved prompts inside coordinate hull of V", hull <= 1e-9,
                        f"max violation {hull:.3g}"))

    red, perm = 0.0, 0.0
    for i in range(n_cases):
        r = rng.child(1, i)
        d, heads = (4, 2) if i % 2 else (6, 3)
        L = 1 + i % 6
        Z = r.child(0).normal((L, d), 1.0)
        b0 = _random_block(r.child(1), d, heads, 0)
        b_std = _random_block(r.child(1), d, heads, 0)
        b_std.routing = None
        red = max(red, float(np.max(np.abs(rwf_block_forward(Z, b0) - standard_block_forward(Z, b_std)))))
        m = 2 + i % 3
        b = _random_block(r.child(2), d, heads, m)
        out = rwf_block_forward(Z, b)
        flip = r.child(3).permutation(m)
        b.routing = RoutingParams(b.routing.Q[flip], b.routing.W_Q, b.routing.W_K,
                                  b.routing.W_V, b.routing.beta)
        perm = max(perm, float(np.max(np.abs(rwf_block_forward(Z, b) - out))))
    checks.append(Check("m = 0 block equals standard block", red <= 1e-12, f"max |diff| {red:.3g}"))
    checks.append(Check("prompt permutation leaves block output unchanged", perm <= 1e-9,
                        f"max |diff| {perm:.3g}"))

    checks.append(_frozen_check(rng.child(2), n_steps=n_cases))
    checks.append(_smoothness_check(rng.child(3)))
    return checks


def _frozen_check(rng, n_steps):
    cfg = toy_config(backbone_mode="frozen_random", k=2, depth=2)
    model = build_model(cfg, rng.child(0))
    before = {n: model.params[n].tobytes() for n in model.frozen_names()}
    opt = OptState.for_model(model, lr=1e-2)
    for step in range(n_steps):
        r = rng.child(1, step)
        x = r.normal((4, cfg.L, cfg.input_dim), 1.0)
        y = r.generator.integers(0, cfg.num_classes, size=4)
        train_step(model, x, y, opt)
    changed = [n for n, b in before.items() if model.params[n].tobytes() != b]
    moved = [n for n in model.trainable_names() if n.endswith("route.Q")]
    return Check(
        "frozen tensors byte-identical after training",
        not changed and bool(moved),
        f"{len(before)} frozen tensors (incl. routing W_K/W_V), {n_steps} steps, changed: {changed or 'none'}",
    )


def probe_inputs(rng, L=16, d=16, m=4):
    """Fixed layer-normalized tokens and routing params for smoothness probes."""
    Z = rng.child(0).normal((L, d), 1.0)
    Z = (Z - Z.mean(axis=1, keepdims=True)) / Z.std(axis=1, keepdims=True)
    params = init_routing_params(d, m, rng.child(1))
    return Z, params


def _smoothness_check(rng, n_samples=1000, delta=1e-3):
    Z, params = probe_inputs(rng)
    stats = {}
    for beta in (0.01, 10.0):
        p = RoutingParams(params.Q, params.W_Q, params.W_K, params.W_V, beta)
        stats[beta] = lipschitz_probe(Z, p, n_samples, delta, rng.child(2))
    finite = all(np.all(np.isfinite(s["ratios"])) for s in stats.values())
    lo, hi = stats[0.01]["median_ratio"], stats[10.0]["median_ratio"]
    return Check("median Lipschitz ratio grows with beta (0.01 < 10)", finite and lo < hi,
                 f"median {lo:.3g} at beta=0.01 vs {hi:.3g} at beta=10, all finite: {finite}")


SUITES = {
    "energy": energy_suite,
    "gradients": gradient_suite,
    "invariants": invariants_suite,
}


def run_suite(name):
    if name == "all":
        return [c for fn in SUITES.values() for c in fn()]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    return SUITES[name]()
