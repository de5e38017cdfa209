from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpalab import tensor as T
from fpalab.errors import ConfigError, DimensionError
from fpalab.fp import (
    FP_OFF,
    FPA_N,
    FPA_R,
    FPConfig,
    PermutationPlan,
    Strategy,
    build_plan,
    dump_feature_maps,
    eligible_count,
    feature_grid,
    fp_backward,
    fp_forward,
    read_pgm,
    sample_permutation,
    sample_permutations,
    select_channels,
    split_dump,
)
from fpalab.models import insert_fp_layer, logits_of
from fpalab.tensor import Tensor

SWAP_01 = [1, 0, 2, 3]  # (0,0) <-> (0,1) on a 2x2 grid


# channel gating ----------------------------------------------------------------------


def test_eligible_count_rounds_before_floor():
    assert eligible_count(100, 0.3) == 30
    assert eligible_count(100, 0.29) == 29
    assert eligible_count(10, 0.6) == 6
    assert eligible_count(7, 1.0) == 7


def test_gating_mean_matches_gamma_times_p():
    rng = np.random.default_rng(0)
    cfg = FPConfig(Strategy.RANDOM, gamma=0.3, prob=0.2)
    counts = np.array([select_channels(100, cfg, rng).sum() for _ in range(10_000)])
    assert abs(counts.mean() - 6.0) < 3 * np.sqrt(30 * 0.2 * 0.8 / 10_000)
    assert counts.max() <= 30


def test_only_leading_channels_are_eligible():
    rng = np.random.default_rng(1)
    cfg = FPConfig(Strategy.NEIGHBORHOOD, gamma=0.6, prob=1.0)
    mask = select_channels(10, cfg, rng)
    assert mask.tolist() == [True] * 6 + [False] * 4


def test_random_channels_flag_spreads_eligibility():
    rng = np.random.default_rng(2)
    cfg = FPConfig(Strategy.RANDOM, gamma=0.3, prob=1.0, random_channels=True)
    masks = np.array([select_channels(10, cfg, rng) for _ in range(500)])
    assert (masks.sum(axis=1) == 3).all()
    assert masks[:, 3:].any()


@pytest.mark.parametrize("prob", [0.0, 0.5, 1.0])
def test_gamma_zero_gives_empty_mask(prob):
    cfg = FPConfig(Strategy.RANDOM, gamma=0.0, prob=prob)
    assert not select_channels(64, cfg, np.random.default_rng(0)).any()


def test_gamma_one_p_one_marks_everything():
    cfg = FPConfig(Strategy.NEIGHBORHOOD, gamma=1.0, prob=1.0)
    assert select_channels(17, cfg, np.random.default_rng(0)).all()


def test_config_validation():
    with pytest.raises(ConfigError):
        FPConfig(Strategy.RANDOM, gamma=1.5)
    with pytest.raises(ConfigError):
        FPConfig(Strategy.RANDOM, prob=-0.1)
    with pytest.raises(ConfigError):
        FPConfig(Strategy.RANDOM, position=0)
    assert FPConfig.from_dict(FPA_N.to_dict()) == FPA_N


def test_paper_presets():
    assert (FPA_N.strategy, FPA_N.gamma, FPA_N.prob, FPA_N.position) == (Strategy.NEIGHBORHOOD, 0.6, 0.5, 2)
    assert (FPA_R.strategy, FPA_R.gamma, FPA_R.prob, FPA_R.position) == (Strategy.RANDOM, 0.3, 0.2, 5)


# permutation samplers ----------------------------------------------------------------


def test_one_by_one_grid_is_identity():
    for s in (Strategy.RANDOM, Strategy.NEIGHBORHOOD):
        assert sample_permutation(s, 1, 1, np.random.default_rng(0)).tolist() == [0]


@pytest.mark.parametrize("seed", range(5))
def test_random_is_a_bijection(seed):
    perm = sample_permutation(Strategy.RANDOM, 16, 16, np.random.default_rng(seed))
    assert np.array_equal(np.sort(perm), np.arange(256))


def test_random_permutation_is_uniform_on_small_grid():
    # 3 cells: each of the 6 permutations should appear ~1/6 of the time
    perms = sample_permutations(Strategy.RANDOM, 60_000, 1, 3, np.random.default_rng(0))
    _, counts = np.unique(perms, axis=0, return_counts=True)
    assert len(counts) == 6
    assert np.abs(counts / 60_000 - 1 / 6).max() < 0.01


def test_neighborhood_exhaustive_invariants():
    perms = sample_permutations(Strategy.NEIGHBORHOOD, 1000, 8, 8, np.random.default_rng(3))
    idx = np.arange(64)
    assert (np.take_along_axis(perms, perms, axis=1) == idx).all()
    moved = perms != idx
    dist = np.abs(perms // 8 - idx // 8) + np.abs(perms % 8 - idx % 8)
    assert (dist[moved] == 1).all()


def test_neighborhood_matching_is_maximal():
    # no two grid-adjacent cells may both stay in place
    perms = sample_permutations(Strategy.NEIGHBORHOOD, 200, 6, 7, np.random.default_rng(4))
    fixed = (perms == np.arange(42)).reshape(-1, 6, 7)
    assert not (fixed[:, 1:, :] & fixed[:, :-1, :]).any()
    assert not (fixed[:, :, 1:] & fixed[:, :, :-1]).any()


def test_neighborhood_has_no_wraparound():
    perms = sample_permutations(Strategy.NEIGHBORHOOD, 500, 4, 4, np.random.default_rng(5))
    idx = np.arange(16)
    same_row = perms // 4 == idx // 4
    assert (np.abs(perms - idx)[same_row] <= 1).all()


def test_sampling_is_seed_deterministic():
    a = sample_permutations(Strategy.NEIGHBORHOOD, 10, 8, 8, np.random.default_rng(9))
    b = sample_permutations(Strategy.NEIGHBORHOOD, 10, 8, 8, np.random.default_rng(9))
    assert np.array_equal(a, b)


# forward / backward ------------------------------------------------------------------


def test_empty_mask_is_bit_exact_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    plan = build_plan(x.shape, FPConfig(Strategy.RANDOM, gamma=0.0), rng)
    assert plan.is_identity
    assert np.array_equal(fp_forward(x, plan).data, x.data)


def test_forward_transposition_example():
    plan = PermutationPlan.single(SWAP_01, 1, 2, 2)
    out = fp_forward(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), plan)
    assert out.data.tolist() == [[[[2.0, 1.0], [3.0, 4.0]]]]


def test_backward_transposition_example():
    plan = PermutationPlan.single(SWAP_01, 1, 2, 2)
    g = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert fp_backward(g, plan).tolist() == [[[[2.0, 1.0], [3.0, 4.0]]]]


def test_identity_plan_backward_passes_through(rng):
    plan = build_plan((1, 2, 3, 3), FP_OFF, rng)
    g = rng.standard_normal((1, 2, 3, 3))
    assert np.array_equal(fp_backward(g, plan), g)


def test_only_masked_channels_move(rng):
    x = rng.standard_normal((3, 5, 4, 4)).astype(np.float32)
    plan = build_plan(x.shape, FPConfig(Strategy.RANDOM, gamma=0.6, prob=0.5), rng)
    out = fp_forward(Tensor(x), plan).data
    keep = ~plan.channel_mask
    assert np.array_equal(out[keep], x[keep])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3), c=st.integers(1, 6),
       h=st.integers(1, 6), w=st.integers(1, 6), strategy=st.sampled_from(["R", "N"]),
       gamma=st.floats(0, 1), prob=st.floats(0, 1))
def test_forward_preserves_channel_multisets(seed, n, c, h, w, strategy, gamma, prob):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    plan = build_plan(x.shape, FPConfig(Strategy.parse(strategy), gamma, prob), rng)
    out = fp_forward(Tensor(x), plan).data
    assert np.array_equal(np.sort(out.reshape(n, c, -1), axis=2), np.sort(x.reshape(n, c, -1), axis=2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), strategy=st.sampled_from(["R", "N"]))
def test_backward_is_the_adjoint(seed, strategy):
    # <fp(x), g> == <x, fp^T(g)> for any x and g
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 5, 5))
    g = rng.standard_normal((2, 4, 5, 5))
    plan = build_plan(x.shape, FPConfig(Strategy.parse(strategy), 1.0, 0.7), rng)
    lhs = (fp_forward(Tensor(x, dtype=np.float64), plan).data * g).sum()
    rhs = (x * fp_backward(g, plan)).sum()
    assert abs(lhs - rhs) < 1e-9


def test_backward_matches_finite_differences(rng):
    for strategy in (Strategy.RANDOM, Strategy.NEIGHBORHOOD):
        x = rng.standard_normal((2, 3, 4, 4))
        k = rng.standard_normal((2, 3, 4, 4))
        plan = build_plan(x.shape, FPConfig(strategy, 1.0, 0.6), rng)

        def f(t):
            return (fp_forward(t, plan) * Tensor(k, dtype=np.float64)).sum()

        xt = Tensor(x, requires_grad=True, dtype=np.float64)
        T.backward(f(xt))
        assert T.relative_error(xt.grad, T.finite_diff_grad(f, x, 1e-6)) < 1e-3


def test_plan_shape_mismatch_raises(rng):
    plan = build_plan((1, 2, 4, 4), FPA_N, rng)
    with pytest.raises(DimensionError):
        fp_forward(Tensor(np.zeros((1, 2, 4, 5))), plan)


def test_plan_arrays_are_read_only(rng):
    plan = build_plan((2, 4, 4, 4), replace(FPA_N, prob=1.0), rng)
    with pytest.raises(ValueError):
        plan.perms[0, 0] = 3


def test_share_perm_uses_one_map_per_sample(rng):
    cfg = FPConfig(Strategy.RANDOM, gamma=1.0, prob=1.0, share_perm=True)
    plan = build_plan((2, 3, 4, 4), cfg, rng)
    assert (plan.perms[:3] == plan.perms[0]).all() and (plan.perms[3:] == plan.perms[3]).all()


# surrogate integration ---------------------------------------------------------------


def test_fp_layer_adds_no_parameters(tiny_model):
    for cfg in (FPA_R, FPA_N):
        sur = insert_fp_layer(tiny_model, replace(cfg, position=2), 0)
        assert sur.num_parameters() == tiny_model.num_parameters()


def test_off_surrogate_logits_bit_equal(tiny_model, rng):
    x = rng.random((3, 1, 8, 8)).astype(np.float32)
    sur = insert_fp_layer(tiny_model, FP_OFF, 0)
    assert np.array_equal(sur(Tensor(x)).data, tiny_model(Tensor(x)).data)


def test_inference_never_permutes(tiny_model, rng):
    x = rng.random((3, 1, 8, 8)).astype(np.float32)
    sur = insert_fp_layer(tiny_model, replace(FPA_N, gamma=1.0, prob=1.0), 0)
    assert np.array_equal(logits_of(sur, x), logits_of(tiny_model, x))


def test_plan_resampled_each_forward(tiny_model, rng):
    x = rng.random((2, 1, 8, 8)).astype(np.float32)
    sur = insert_fp_layer(tiny_model, replace(FPA_N, gamma=1.0, prob=1.0), 0)
    sur(Tensor(x))
    first = sur.last_plan
    sur(Tensor(x))
    assert not np.array_equal(first.perms, sur.last_plan.perms)


def test_bad_position_is_config_error(tiny_model):
    with pytest.raises(ConfigError):
        insert_fp_layer(tiny_model, replace(FPA_N, position=9), 0)


# feature-map dumps -------------------------------------------------------------------


def test_dump_identical_maps(tmp_path, rng):
    x = rng.random((1, 4, 6, 6))
    before, after = split_dump(read_pgm(dump_feature_maps(x, x, tmp_path / "same.pgm")))
    assert np.array_equal(before, after)


def test_dump_scrambled_keeps_histograms(tmp_path, rng):
    x = rng.random((1, 4, 6, 6)).astype(np.float32)
    plan = build_plan(x.shape, FPConfig(Strategy.RANDOM, 1.0, 1.0), rng)
    y = fp_forward(Tensor(x), plan).data
    before, after = split_dump(read_pgm(dump_feature_maps(x, y, tmp_path / "scr.pgm")))
    assert not np.array_equal(before, after)
    assert np.array_equal(np.bincount(before.ravel(), minlength=256), np.bincount(after.ravel(), minlength=256))


def test_one_by_one_maps_give_constant_tiles(rng):
    grid = feature_grid(rng.random((1, 4, 1, 1)), border=1)
    tiles = grid[1::2, 1::2]
    assert (tiles == tiles.flat[0]).all()
