"""The theory suite run by ``bpolab verify``: each check returns a JSON-ready verdict.

Checks are described by plain dicts so they can be shipped to worker processes.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import analysis
from .envs import make_env
from .policy import SquashedGaussianPolicy
from .worldmodels import ActionsWorldModel

__all__ = [
    "theory_checks",
    "run_check",
    "check_gradcheck",
    "check_f_rnn_exact",
    "check_bound",
    "check_scalar_rnn_slope",
    "check_hwm_growth",
    "check_attention_growth",
    "check_teacher_forcing",
    "random_bound_config",
]

BOUND_BACKBONES = ("attention", "attention_raw", "rnn", "lstm")
BOUND_REWARDS = ("linear", "sin", "terminal")


def _verdict(name, passed, detail, **values):
    return {"name": name, "passed": bool(passed), "detail": detail, **values}


def check_gradcheck(n_instances=100, seed=0, tol=1e-5):
    t0 = time.perf_counter()
    errs = analysis.gradcheck_corpus(n_instances, seed)
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - t0
    return _verdict("gradcheck", all(e <= tol for e in errs.values()),
                    f"worst {worst} rel err {errs[worst]:.2e} (tol {tol:g}), {elapsed:.0f}s",
                    errors=errs, seconds=elapsed)


def check_f_rnn_exact(n_seeds=20, horizons=(1, 10, 50), envs=("harvest", "one_bounce"), tol=1e-10):
    worst, nonzero = 0.0, True
    for name in envs:
        for H in horizons:
            env = make_env(name, H)
            for seed in range(n_seeds):
                policy = SquashedGaussianPolicy.for_env(env, rng=np.random.default_rng(seed))
                worst = max(worst, analysis.prop1_check(env, policy, seed))
                if H > 1 and seed == 0:
                    g, _ = analysis.simulator_gradient(env, policy, stop_grad=False)
                    nonzero &= bool(np.any(g != 0))
    return _verdict("f_rnn_exact", worst <= tol and nonzero,
                    f"max rel gap {worst:.2e} (tol {tol:g}), gradients nonzero: {nonzero}",
                    max_rel=worst)


def random_bound_config(i: int, seed: int = 0, max_horizon: int = 32):
    """Draw one (model, policy, env, noise) for the action-model bound check."""
    rng = np.random.default_rng([seed, i])
    backbone = BOUND_BACKBONES[i % len(BOUND_BACKBONES)]
    H = int(rng.integers(2, max_horizon + 1))
    n, m = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    env = analysis.ProbeEnv(H, n, m, reward=BOUND_REWARDS[i % len(BOUND_REWARDS)],
                            s1=rng.normal(size=n), bound=float(rng.uniform(0.5, 2.0)))
    model = ActionsWorldModel(backbone=backbone, random_state=int(rng.integers(2**31)))
    model.initialize(n, m, H)
    # spread the weight scale so both contracting and expanding models appear
    scale = float(np.exp(rng.uniform(-0.5, 0.5)))
    for p in model.parameters():
        p.data = p.data * scale
    policy = SquashedGaussianPolicy(n, m, env.low, env.high, H, hidden=(16,), rng=rng)
    noise = rng.normal(size=(H - 1, 1, m))
    return model, policy, env, noise


def check_bound(n_configs=50, seed=0):
    violations, ratios = [], []
    for i in range(n_configs):
        model, policy, env, noise = random_bound_config(i, seed)
        rep = analysis.bound_theorem2(model, policy, env, noise)
        ratios.append(rep.measured / rep.bound if rep.bound > 0 else 0.0)
        if not rep.satisfied:
            violations.append(i)
    return _verdict("action_gradient_bound", not violations,
                    f"{len(violations)} violations in {n_configs}, max measured/bound {max(ratios):.3f}",
                    violations=violations, max_ratio=max(ratios))


def check_scalar_rnn_slope(w_x=1.1, w_a=1.0, w_o=1.0, grid=range(20, 81, 5), slope_tol=0.02, ref_tol=1e-10):
    res = analysis.cor1_tightness(w_x, w_a, w_o, grid)
    target = math.log(w_x)
    rel = abs(res.slope - target) / target
    err = res.max_reference_error
    return _verdict("scalar_rnn_slope", rel <= slope_tol and err <= ref_tol,
                    f"slope {res.slope:.6f} vs log w_x {target:.6f} (rel {rel:.1e}), closed form err {err:.1e}",
                    slope=res.slope, closed_form_error=err)


def check_hwm_growth(L_s=1.2, L_a=1.0, grid=range(20, 61, 5), tol=0.05,
                     bounded=(0.0, 0.5, 0.9, 1.0), quad_tol=0.05):
    res = analysis.bound_hwm_growth(L_s, L_a, grid)
    target = math.log(L_s)
    rel = abs(res.slope - target) / target
    worst_slope = worst_resid = 0.0
    for ls in bounded:
        r = analysis.bound_hwm_growth(ls, L_a, grid)
        H = r.grid.astype(float)
        coef = np.polyfit(H, r.norms, 2)
        worst_resid = max(worst_resid, float(np.max(np.abs(np.polyval(coef, H) - r.norms) / r.norms)))
        worst_slope = max(worst_slope, analysis.fit_slope(H, r.norms, log_x=True)[0])
    ok = rel <= tol and worst_slope <= 2.0 and worst_resid <= quad_tol
    return _verdict("hwm_growth", ok,
                    f"slope {res.slope:.5f} vs log L_s {target:.5f} (rel {rel:.1e}); L_s<=1: "
                    f"max log-log slope {worst_slope:.3f}, quadratic-fit residual {worst_resid:.1e}",
                    slope=res.slope, bounded_loglog_slope=worst_slope, quadratic_residual=worst_resid)


def check_attention_growth(n_seeds=20, grid=(8, 16, 32, 64, 128, 256), limit=3.2):
    slopes = [analysis.cor2_poly_check(seed, grid).slope for seed in range(n_seeds)]
    return _verdict("attention_growth", max(slopes) <= limit,
                    f"max log-log slope {max(slopes):.3f} over {n_seeds} seeds (limit {limit})",
                    slopes=slopes)


def check_teacher_forcing(n_seeds=5, tol=1e-10):
    worst = max(analysis.teacher_forcing_check(seed) for seed in range(n_seeds))
    return _verdict("teacher_forcing", worst <= tol, f"max rel gap {worst:.2e} (tol {tol:g})",
                    max_rel=worst)


_CHECKS = {
    "gradcheck": check_gradcheck,
    "f_rnn_exact": check_f_rnn_exact,
    "action_gradient_bound": check_bound,
    "scalar_rnn_slope": check_scalar_rnn_slope,
    "hwm_growth": check_hwm_growth,
    "attention_growth": check_attention_growth,
    "teacher_forcing": check_teacher_forcing,
}


def theory_checks(cfg: dict) -> list[dict]:
    seed = cfg.get("seed", 0)
    return [
        {"name": "gradcheck", "kwargs": {"n_instances": cfg.get("n_gradcheck", 100), "seed": seed}},
        {"name": "f_rnn_exact", "kwargs": {"n_seeds": cfg.get("n_f_rnn_seeds", 20)}},
        {"name": "action_gradient_bound", "kwargs": {"n_configs": cfg.get("n_bound_configs", 50), "seed": seed}},
        {"name": "scalar_rnn_slope", "kwargs": {}},
        {"name": "hwm_growth", "kwargs": {}},
        {"name": "attention_growth", "kwargs": {"n_seeds": cfg.get("n_attention_seeds", 20)}},
        {"name": "teacher_forcing", "kwargs": {}},
    ]


def run_check(check: dict) -> dict:
    try:
        return _CHECKS[check["name"]](**check["kwargs"])
    except Exception as exc:  # a crashing check is a failed check, reported not raised
        return _verdict(check["name"], False, f"error: {type(exc).__name__}: {exc}")
