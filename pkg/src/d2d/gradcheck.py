"""Finite-difference audits of every differentiated path in the pipeline.

Points are sampled at random and rejected when they sit near a kink: a
hidden pre-activation close to zero (leaky-ReLU corner), or a logit within
``KINK_MARGIN`` of the threshold, where the beta = 300 sigmoid curvature
swamps central differences.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .critic import CriticConfig, d2d_loss_on_tape, soft_count
from .lmn import LmnParams, init_params, lmn_forward_on_tape, mix_latent
from .regularizer import RegConfig, reg_pow_on_tape, reg_prime_on_tape
from .world import TapeWorld, make_world

KINK_MARGIN = 0.02
PREACT_MARGIN = 1e-3
STEP = 1e-6


def _away_from_threshold(z, cfg, target):
    f = soft_count(z, cfg)
    return np.min(np.abs(z - cfg.tau_z)) > KINK_MARGIN and abs(f - target) > 1e-3


def critic_error(rng, side: str, n_points: int = 100, n: int = 8, cfg=CriticConfig(), step=STEP) -> float:
    """Worst error of the single-class critic on one branch."""
    worst, done = 0.0, 0
    while done < n_points:
        z = cfg.tau_z + rng.uniform(-3, 3, size=n)
        target = 0 if side == "over" else n
        if not _away_from_threshold(z, cfg, target):
            continue
        fn = lambda g, zt: d2d_loss_on_tape(zt, [target], cfg, 1)[0]
        worst = max(worst, tape.check_gradients(fn, z, step, rng=rng))
        done += 1
    return worst


def reg_prime_error(rng, n_points: int = 100, d: int = 128, step=STEP) -> float:
    worst = 0.0
    for _ in range(n_points):
        x = rng.normal(size=d) * rng.uniform(0.5, 1.5)
        worst = max(worst, tape.check_gradients(lambda g, xt: reg_prime_on_tape(xt, d), x, step, rng=rng))
    return worst


def _preacts(params: LmnParams, x):
    a1 = params.W1 @ x + params.b1
    h1 = np.where(a1 > 0, a1, params.slope * a1)
    a2 = params.W2 @ h1 + params.b2
    return np.concatenate([a1, a2])


def lmn_error(rng, n_points: int = 100, d: int = 128, step=STEP) -> float:
    """sum(M(x)) against its weights, at fresh random weights and inputs."""
    worst, done = 0.0, 0
    while done < n_points:
        params = init_params(d, rng)
        params.b1 += rng.normal(scale=0.1, size=params.b1.shape)
        params.b2 += rng.normal(scale=0.1, size=params.b2.shape)
        x = rng.normal(size=d)
        if np.min(np.abs(_preacts(params, x))) < PREACT_MARGIN:
            continue
        c = rng.normal(size=d)

        def fn(g, *leaves):
            y = lmn_forward_on_tape(g.const(x), leaves, params)
            return tape.sum_(tape.mul(y, g.const(c)))

        worst = max(worst, tape.check_gradients(fn, params.arrays(), step, rng=rng))
        done += 1
    return worst


def pipeline_error(rng, n_points: int = 100, world=None, params: LmnParams | None = None,
                   cfg=CriticConfig(), w: float = 0.2, reg=RegConfig(), alpha=5.0, lam=1e-4,
                   step=STEP) -> float:
    """Full update objective (weighted critic + shell penalty) against the LMN weights."""
    world = world or make_world(0)
    tw = TapeWorld(world, [0])
    d = world.d
    worst, done = 0.0, 0
    while done < n_points:
        p = params.copy() if params is not None else init_params(d, rng)
        p.b3 += rng.normal(size=d)  # push the mixed latent towards the shell scale
        x = rng.normal(size=d)
        if np.min(np.abs(_preacts(p, x))) < PREACT_MARGIN:
            continue
        g0 = tape.Graph()
        leaves0 = [g0.const(a) for a in p.arrays()]
        z0 = tw(mix_latent(x, lmn_forward_on_tape(g0.const(x), leaves0, p), w)).value
        target = int(rng.integers(0, world.slots + 1))
        if not _away_from_threshold(z0, cfg, target):
            continue

        def fn(g, *leaves):
            xp = mix_latent(x, lmn_forward_on_tape(g.const(x), leaves, p), w)
            crit, _ = d2d_loss_on_tape(tw(xp), [target], cfg, 1)
            return tape.scale(crit, alpha) + tape.scale(reg_pow_on_tape(xp, reg, d), lam)

        worst = max(worst, tape.check_gradients(fn, p.arrays(), step, rng=rng))
        done += 1
    return worst


def run_all(n_points: int = 100, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {
        "critic_over": critic_error(rng, "over", n_points),
        "critic_under": critic_error(rng, "under", n_points),
        "reg_prime": reg_prime_error(rng, n_points),
        "lmn_forward": lmn_error(rng, n_points),
        "pipeline": pipeline_error(rng, n_points),
    }
