"""Fast invariant checks behind ``fpalab selftest``. Each check raises InvariantError on failure."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, Method, run_attack
from .errors import InvariantError
from .fp import (
    FP_OFF,
    FPA_N,
    FPA_R,
    Strategy,
    build_plan,
    fp_forward,
    sample_permutations,
)
from .models import ArchSpec, build_model, insert_fp_layer
from .tensor import Tensor

TINY = ArchSpec("ConvNet", "tiny", in_channels=1, image_size=8, widths=(4, 4, 4, 4, 4),
                strides=(1, 1, 1, 1, 1), pools=(1, 1, 1, 1, 1), residual=True, head="gap")


def check_gradients(rng: np.random.Generator, cases: int = 10) -> None:
    model = build_model(TINY, rng).astype(np.float64)
    sur = insert_fp_layer(model, replace(FPA_N, position=2), rng)
    for _ in range(cases):
        x = rng.random((2, 1, 8, 8))
        y = rng.integers(0, 10, 2)
        sur.frozen_plan = sur.sample_plan(2)

        def f(t):
            return T.cross_entropy(sur(t), y)

        xt = Tensor(x, requires_grad=True, dtype=np.float64)
        T.backward(T.cross_entropy(sur(xt), y))
        err = T.relative_error(xt.grad, T.finite_diff_grad(f, x, 1e-6))
        if not err < 1e-3:
            raise InvariantError(f"input gradient relative error {err:.2e} >= 1e-3")


def check_fp_values(rng: np.random.Generator, plans: int = 200) -> None:
    for cfg in (FPA_R, FPA_N, replace(FPA_N, gamma=1.0, prob=1.0)):
        for _ in range(plans // 3):
            x = rng.random((2, 6, 5, 4)).astype(np.float32)
            out = fp_forward(Tensor(x), build_plan(x.shape, cfg, rng)).data
            if not np.array_equal(np.sort(out.reshape(2, 6, -1), axis=2), np.sort(x.reshape(2, 6, -1), axis=2)):
                raise InvariantError(f"{cfg.strategy.value} plan changed a channel's multiset of values")


def check_neighbor_plans(rng: np.random.Generator, count: int = 1000) -> None:
    perms = sample_permutations(Strategy.NEIGHBORHOOD, count, 8, 8, rng)
    idx = np.arange(64)
    if not (np.take_along_axis(perms, perms, axis=1) == idx).all():
        raise InvariantError("neighbourhood permutation is not an involution")
    moved = perms != idx
    dist = np.abs(perms // 8 - idx // 8) + np.abs(perms % 8 - idx % 8)
    if (dist[moved] != 1).any():
        raise InvariantError("neighbourhood permutation moved a pixel by more than one grid step")


def check_attack_budget(rng: np.random.Generator) -> None:
    model = build_model(TINY, rng)
    x = rng.random((4, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 10, 4)
    cfg = AttackConfig(iterations=3, m_copies=2)
    for fp in (FP_OFF, replace(FPA_R, position=3), replace(FPA_N, position=2)):
        for method in (Method.IFGSM, Method.MIFGSM, Method.DIM, Method.TIM, Method.SIM):
            # check_budget runs after every iteration inside the attack loop
            run_attack(insert_fp_layer(model, fp, 0), x, y, cfg, method=method)


def check_degenerate(rng: np.random.Generator) -> None:
    model = build_model(TINY, rng)
    x = rng.random((4, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 10, 4)
    cfg = AttackConfig(iterations=5)
    ref = run_attack(insert_fp_layer(model, FP_OFF, 1), x, y, cfg).x_adv
    for fp in (replace(FPA_N, gamma=0.0), replace(FPA_N, prob=0.0), replace(FPA_R, prob=0.0)):
        got = run_attack(insert_fp_layer(model, fp, 2), x, y, cfg).x_adv
        if not np.array_equal(got, ref):
            raise InvariantError(f"degenerate FP config {fp} changed the adversarial batch")


CHECKS = {
    "gradients": check_gradients,
    "fp-values": check_fp_values,
    "neighbour-plans": check_neighbor_plans,
    "attack-budget": check_attack_budget,
    "degenerate": check_degenerate,
}


def run_selftest(seed: int = 0, report=print) -> None:
    for name, check in CHECKS.items():
        check(np.random.default_rng([seed, len(name)]))
        report(f"ok   {name}")
