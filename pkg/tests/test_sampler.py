import pytest
import torch

from lego.bricks import BrickSpec
from lego.errors import ConfigError, ShapeError
from lego.sampler import (
    EdmSamplerParams,
    SkipSchedule,
    cfg_combine,
    ddpm_sample,
    edm_heun_sample,
    skip_schedule,
    uniform_stride_steps,
)
from lego.schedule import EdmParams, make_linear_schedule
from lego.stack import ExternalBrick, LegoStack, StackConfig


def small_stack(seed=0, num_classes=2, mode="pg"):
    bricks = [
        BrickSpec(r=2, l=1, d=16, depth=1, heads=2),
        BrickSpec(r=4, l=2, d=16, depth=1, heads=2),
        BrickSpec(r=8, l=2, d=16, depth=1, heads=2),
    ]
    if mode == "pr":
        bricks = bricks[::-1]
    cfg = StackConfig(bricks=bricks, mode=mode, resolution=(8, 8, 3), num_classes=num_classes)
    model = LegoStack(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g) * 0.05)
    return model


class TestSkipSchedule:
    def test_t_break_zero_never_skips(self):
        s = SkipSchedule(mode="pg", t_break=0, T=100, K=3)
        assert all(s.active(t) == frozenset({1, 2, 3}) for t in range(1, 101))

    def test_pg_full_break_always_skips_top(self):
        s = SkipSchedule(mode="pg", t_break=100, T=100, K=3)
        assert all(s.active(t) == frozenset({1, 2}) for t in range(1, 101))

    def test_pg_halfway_counts(self):
        s = SkipSchedule(mode="pg", t_break=500, T=1000, K=3)
        active_ts = [t for t in range(1, 1001) if 3 in s.active(t)]
        assert active_ts == list(range(501, 1001))

    def test_pr_skips_high_noise_steps(self):
        s = SkipSchedule(mode="pr", t_break=300, T=1000, K=3)
        skipped = [t for t in range(1, 1001) if 3 not in s.active(t)]
        assert skipped == list(range(701, 1001))

    def test_mode_must_match_stack_ordering(self):
        model = small_stack(mode="pg")
        with pytest.raises(ConfigError, match="incompatible"):
            skip_schedule("pr", 10, 100, model.config)
        sched = skip_schedule("pg", 10, 100, model.config)
        assert sched.K == 3

    def test_t_break_range_checked(self):
        with pytest.raises(ConfigError, match="t_break"):
            SkipSchedule(mode="pg", t_break=101, T=100, K=3)


class TestCfgCombine:
    def test_identities(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.randn(3, 4, generator=g), torch.randn(3, 4, generator=g)
        assert torch.equal(cfg_combine(a, b, 1.0), a)
        assert torch.equal(cfg_combine(a, b, 0.0), b)

    def test_scalar_extrapolation(self):
        out = cfg_combine(torch.tensor([1.0]), torch.tensor([0.0]), 4.0)
        assert out.item() == 4.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)


class TestUniformStride:
    def test_full_chain(self):
        assert uniform_stride_steps(10, 10) == list(range(10, 0, -1))

    def test_quarter_stride_includes_T(self):
        taus = uniform_stride_steps(1000, 250)
        assert len(taus) == 250
        assert taus[0] == 1000
        assert all(a - b == 4 for a, b in zip(taus, taus[1:]))
        assert taus[-1] == 4

    def test_bounds(self):
        with pytest.raises(ConfigError):
            uniform_stride_steps(10, 11)


class TestDdpmSampler:
    def test_oracle_collapses_to_target(self):
        # a predictor that always answers x_star: the terminal posterior mean is x_star
        cfg = StackConfig(
            bricks=[BrickSpec(r=8, l=2, d=16, depth=1, heads=2)],
            mode="pg",
            resolution=(8, 8, 3),
            num_classes=0,
        )
        model = LegoStack(cfg)
        g = torch.Generator().manual_seed(1)
        x_star = torch.randn(1, 3, 8, 8, generator=g) * 0.3
        model.install_external(ExternalBrick(lambda xt, t: x_star.expand_as(xt), r=8), 1)
        s = make_linear_schedule(4, 0.1, 0.4)
        out = ddpm_sample(model, s, torch.Generator().manual_seed(2), batch_size=2, n_steps=4)
        assert torch.allclose(out, x_star.expand_as(out), atol=1e-6)

    def test_seed_determinism(self):
        model = small_stack(seed=3)
        s = make_linear_schedule(20)
        labels = torch.tensor([0, 1])
        a = ddpm_sample(model, s, torch.Generator().manual_seed(7), class_ids=labels, n_steps=10)
        b = ddpm_sample(model, s, torch.Generator().manual_seed(7), class_ids=labels, n_steps=10)
        assert torch.equal(a, b)

    def test_skip_zero_break_bit_matches_no_skip(self):
        model = small_stack(seed=4)
        s = make_linear_schedule(20)
        skip = skip_schedule("pg", 0, 20, model.config)
        labels = torch.tensor([0, 1])
        a = ddpm_sample(model, s, torch.Generator().manual_seed(9), class_ids=labels, n_steps=10)
        b = ddpm_sample(
            model, s, torch.Generator().manual_seed(9), class_ids=labels, n_steps=10, skip=skip
        )
        assert torch.equal(a, b)

    def test_skipped_sampling_differs_and_keeps_shape(self):
        model = small_stack(seed=5)
        s = make_linear_schedule(20)
        skip = skip_schedule("pg", 20, 20, model.config)
        labels = torch.tensor([0])
        a = ddpm_sample(model, s, torch.Generator().manual_seed(9), class_ids=labels, n_steps=10)
        b = ddpm_sample(
            model, s, torch.Generator().manual_seed(9), class_ids=labels, n_steps=10, skip=skip
        )
        assert a.shape == b.shape
        assert not torch.equal(a, b)

    def test_nfe_accounting(self):
        model = small_stack(seed=6)
        s = make_linear_schedule(20)
        labels = torch.tensor([0, 1])
        _, stats = ddpm_sample(
            model, s, torch.Generator().manual_seed(0), class_ids=labels, n_steps=10,
            return_stats=True,
        )
        assert stats.nfe == 10
        _, stats = ddpm_sample(
            model, s, torch.Generator().manual_seed(0), class_ids=labels, n_steps=10,
            cfg_scale=2.0, return_stats=True,
        )
        assert stats.nfe == 20

    def test_guidance_scale_one_matches_conditional_path(self):
        model = small_stack(seed=8)
        s = make_linear_schedule(20)
        labels = torch.tensor([1, 0])
        plain = ddpm_sample(model, s, torch.Generator().manual_seed(3), class_ids=labels, n_steps=8)
        guided, stats = ddpm_sample(
            model, s, torch.Generator().manual_seed(3), class_ids=labels, n_steps=8,
            cfg_scale=1.0, return_stats=True,
        )
        assert torch.equal(plain, guided)
        assert stats.nfe == 16


class TestHeunSampler:
    def test_constant_denoiser_matches_linear_closed_form(self):
        # D == c makes dx/dsigma = (x - c)/sigma, whose solution is linear in
        # sigma and integrated exactly; compare per step at 1e-10 relative
        c = 0.37
        edm = EdmParams(sigma_min=0.01, sigma_max=10.0)
        sp = EdmSamplerParams(steps=16, s_churn=0.0)
        sigmas = edm.sigma_grid(sp.steps)
        trace = []

        def denoiser(x, sigma, class_ids):
            trace.append(x.clone())
            return torch.full_like(x, c)

        out = edm_heun_sample(
            None, edm, sp, torch.Generator().manual_seed(0), batch_size=1,
            denoiser=denoiser, shape=(4, 4, 1), dtype=torch.float64,
        )
        x_start = trace[0]
        sigma0 = sigmas[0]
        for i in range(1, sp.steps):
            expected = c + (x_start - c) * (sigmas[i] / sigma0)
            got = trace[2 * i]  # predictor evaluations sit at even indices
            rel = ((got - expected).abs() / expected.abs().clamp(min=1e-12)).max()
            assert rel <= 1e-10, f"step {i}: rel {rel}"
        expected_final = c + (x_start - c) * 0.0
        assert ((out - expected_final).abs()).max() <= 1e-10

    def test_churn_free_trajectory_deterministic(self):
        model = small_stack(seed=9)
        edm = EdmParams()
        sp = EdmSamplerParams(steps=8, s_churn=0.0)
        labels = torch.tensor([0])
        a = edm_heun_sample(model, edm, sp, torch.Generator().manual_seed(5), class_ids=labels)
        b = edm_heun_sample(model, edm, sp, torch.Generator().manual_seed(5), class_ids=labels)
        assert torch.equal(a, b)

    def test_stochastic_params_accepted(self):
        sp = EdmSamplerParams(steps=256, s_churn=10.0, s_min=0.05, s_max=20.0, s_noise=1.003)
        assert (sp.s_churn, sp.s_min, sp.s_max, sp.s_noise) == (10.0, 0.05, 20.0, 1.003)

    def test_heun_nfe_accounting(self):
        model = small_stack(seed=10)
        edm = EdmParams()
        sp = EdmSamplerParams(steps=8)
        labels = torch.tensor([0])
        _, stats = edm_heun_sample(
            model, edm, sp, torch.Generator().manual_seed(1), class_ids=labels, return_stats=True
        )
        assert stats.nfe == 2 * 8 - 1
        _, stats = edm_heun_sample(
            model, edm, sp, torch.Generator().manual_seed(1), class_ids=labels,
            cfg_scale=3.0, return_stats=True,
        )
        assert stats.nfe == 2 * (2 * 8 - 1)

    def test_churn_injects_noise_only_in_band(self):
        model = small_stack(seed=11)
        edm = EdmParams(sigma_min=0.01, sigma_max=5.0)
        labels = torch.tensor([0])
        quiet = EdmSamplerParams(steps=6, s_churn=0.0)
        churny = EdmSamplerParams(steps=6, s_churn=3.0, s_min=0.0, s_max=float("inf"))
        a = edm_heun_sample(model, edm, quiet, torch.Generator().manual_seed(2), class_ids=labels)
        b = edm_heun_sample(model, edm, churny, torch.Generator().manual_seed(2), class_ids=labels)
        assert not torch.equal(a, b)

    def test_param_validation(self):
        with pytest.raises(ConfigError):
            EdmSamplerParams(steps=0)
        with pytest.raises(ConfigError):
            EdmSamplerParams(steps=5, s_min=3.0, s_max=1.0)


class TestSkipCostMonotonicity:
    @pytest.mark.parametrize("mode", ["pg", "pr"])
    def test_flops_non_increasing_in_t_break(self, mode):
        from lego import accounting

        model = small_stack(mode=mode)
        cfg = model.config
        T = 100
        costs = []
        for t_break in range(0, T + 1, 10):
            skip = skip_schedule(mode, t_break, T, cfg)
            costs.append(
                accounting.flops_estimate(
                    cfg.bricks, (8, 8), mode="sample", skip=skip, cond_dim=cfg.cond_dim
                )
            )
        assert all(a >= b for a, b in zip(costs, costs[1:]))
        assert costs[0] > costs[-1]
