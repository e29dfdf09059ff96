import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdamd.diffusion import (
    DiffMLP, DiffMLPConfig, DiffusionSchedule, ddpm_step, discrete_diffuse, forward_diffuse, loss_noise,
    loss_velocity, sample_ddpm, sample_ode, velocity_target,
)
from cdamd.errors import ConfigError, ValidationError


class Const:
    """Model stub returning a fixed prediction regardless of input."""

    def __init__(self, value):
        self.value = value

    def __call__(self, x, t, cond):
        return self.value.expand_as(x) if self.value.ndim else torch.full_like(x, float(self.value))


def gaussian_eps(mu, schedule):
    """Exact epsilon predictor for a 1-D target N(mu, 1) under DDPM corruption."""
    abar = torch.as_tensor(schedule.alpha_bars)

    def f(x, t, cond):
        s = torch.round(t * schedule.steps).long()
        a = abar[s - 1].to(x.dtype).unsqueeze(-1)
        return (1 - a).sqrt() * (x - a.sqrt() * mu)

    return f


def gaussian_velocity(mu, sd):
    """Exact velocity field for x_t = (1-t) x0 + t eps with x0 ~ N(mu, sd^2)."""

    def f(x, t, cond):
        t = t.unsqueeze(-1)
        var = (1 - t) ** 2 * sd**2 + t**2
        return (t - (1 - t) * sd**2) / var * (x - (1 - t) * mu) - mu

    return f


class TestSchedule:
    def test_endpoints(self):
        assert DiffusionSchedule.alpha(0) == 1 and DiffusionSchedule.sigma(0) == 0
        assert DiffusionSchedule.alpha(1) == 0 and DiffusionSchedule.sigma(1) == 1

    @pytest.mark.parametrize("S", [1, 10, 50, 1000])
    def test_alpha_bar_decreasing(self, S):
        abar = DiffusionSchedule("noise", S).alpha_bars
        assert np.all(np.diff(abar) < 0) and 0 < abar[-1] < 1

    def test_chain_ends_near_noise(self):
        assert DiffusionSchedule("noise", 50).alpha_bars[-1] < 1e-3

    @pytest.mark.parametrize("kw", [{"mode": "score"}, {"steps": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DiffusionSchedule(**kw)

    def test_final_step_adds_no_noise(self):
        assert DiffusionSchedule("noise", 20).posterior_std(1) == 0.0


class TestForward:
    def test_endpoints_and_spot_value(self, rng):
        x0, eps = rng.standard_normal(5), rng.standard_normal(5)
        assert np.array_equal(forward_diffuse(x0, eps, 0.0), x0)
        assert np.array_equal(forward_diffuse(x0, eps, 1.0), eps)
        assert forward_diffuse(2.0, 0.0, 0.25) == 1.5

    @pytest.mark.parametrize("t", [-0.1, 1.5])
    def test_out_of_range(self, t):
        with pytest.raises(ValidationError):
            forward_diffuse(1.0, 0.0, t)

    def test_velocity_target_exact(self, rng):
        for _ in range(100):
            x0, eps = rng.standard_normal(8), rng.standard_normal(8)
            assert np.array_equal(velocity_target(x0, eps), eps - x0)
        assert velocity_target(1.0, 0.0) == -1.0
        assert np.array_equal(velocity_target(np.zeros(3), np.eye(3)[1]), np.eye(3)[1])

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
    def test_affine_in_inputs(self, t, a, b, c, d):
        lhs = forward_diffuse(a + c, b + d, t)
        rhs = forward_diffuse(a, b, t) + forward_diffuse(c, d, t)
        assert math.isclose(lhs, rhs, abs_tol=1e-9)


class TestLosses:
    def test_perfect_predictions_give_zero(self, rng):
        x0 = torch.from_numpy(rng.standard_normal((16, 4)))
        eps = torch.from_numpy(rng.standard_normal((16, 4)))
        sched = DiffusionSchedule("noise", 50)
        assert float(loss_noise(Const(eps), x0, None, sched, eps=eps)) == 0.0
        assert float(loss_velocity(Const(eps - x0), x0, None, eps=eps)) == 0.0

    def test_zero_predictor_noise_loss_is_d(self):
        g = torch.Generator().manual_seed(0)
        x0 = torch.zeros(200_000, 4, dtype=torch.float64)
        loss = loss_noise(Const(torch.tensor(0.0)), x0, None, DiffusionSchedule("noise", 50), generator=g)
        assert abs(float(loss) - 4.0) < 0.05

    @pytest.mark.parametrize("kind", ["noise", "velocity"])
    def test_gradients_match_finite_differences(self, kind, rng):
        torch.manual_seed(0)
        net = DiffMLP(DiffMLPConfig(blocks=2, width=8, latent_dim=3, cond_dim=5)).double()
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.1 * torch.randn_like(p))
        x0 = torch.from_numpy(rng.standard_normal((6, 3)))
        cond = torch.from_numpy(rng.standard_normal((6, 5)))
        eps = torch.from_numpy(rng.standard_normal((6, 3)))
        sched = DiffusionSchedule("noise", 50)
        s = torch.from_numpy(rng.integers(1, 51, 6))
        t = torch.from_numpy(rng.uniform(size=6))

        def loss():
            if kind == "noise":
                return loss_noise(net, x0, cond, sched, eps=eps, s=s)
            return loss_velocity(net, x0, cond, eps=eps, t=t)

        net.zero_grad()
        loss().backward()
        params = [net.out.weight, net.blocks[0].mlp[0].weight, net.cond_embed.weight]
        h = 1e-6
        for p in params:
            for idx in list(np.ndindex(p.shape))[:4]:
                with torch.no_grad():
                    p[idx] += h
                    up = float(loss())
                    p[idx] -= 2 * h
                    down = float(loss())
                    p[idx] += h
                fd = (up - down) / (2 * h)
                g = float(p.grad[idx])
                assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-6), (idx, g, fd)


class TestDDPM:
    def test_single_step_recovers_x0(self, rng):
        sched = DiffusionSchedule("noise", 1)
        x0 = torch.from_numpy(rng.standard_normal((5, 3)))
        eps = torch.from_numpy(rng.standard_normal((5, 3)))
        x1 = discrete_diffuse(x0, eps, sched, torch.ones(5, dtype=torch.long))
        out = sample_ddpm(Const(eps), None, sched, x1, step_noise=torch.zeros(1, 5, 3))
        assert torch.allclose(out, x0, atol=1e-5)

    def test_zero_prediction_scales_noise(self):
        sched = DiffusionSchedule("noise", 10)
        z = torch.randn(4, 2, dtype=torch.float64)
        out = ddpm_step(Const(torch.tensor(0.0)), torch.zeros(4, 2, dtype=torch.float64), 7, None, sched, z)
        assert torch.allclose(out, sched.posterior_std(7) * z)

    @pytest.mark.parametrize("s", [2, 10, 25, 50])
    def test_step_mean_is_posterior_mean(self, s, rng):
        sched = DiffusionSchedule("noise", 50)
        x0 = torch.from_numpy(rng.standard_normal((8, 3))).float()
        eps = torch.from_numpy(rng.standard_normal((8, 3))).float()
        xs = discrete_diffuse(x0, eps, sched, torch.full((8,), s))
        mean = ddpm_step(Const(eps), xs, s, None, sched, z=None)
        a, ab, ab_prev, b = sched.alphas[s - 1], sched.alpha_bars[s - 1], sched.alpha_bars[s - 2], sched.betas[s - 1]
        posterior = (math.sqrt(ab_prev) * b / (1 - ab)) * x0 + (math.sqrt(a) * (1 - ab_prev) / (1 - ab)) * xs
        assert torch.allclose(mean, posterior, atol=1e-5)

    def test_gaussian_toy_mean(self):
        sched = DiffusionSchedule("noise", 50)
        g = torch.Generator().manual_seed(0)
        x = torch.randn(10_000, 1, generator=g, dtype=torch.float64)
        out = sample_ddpm(gaussian_eps(3.0, sched), None, sched, x, generator=g)
        assert abs(float(out.mean()) - 3.0) < 0.1
        assert abs(float(out.std()) - 1.0) < 0.1

    def test_wrong_mode(self):
        with pytest.raises(ConfigError):
            sample_ddpm(Const(torch.tensor(0.0)), None, DiffusionSchedule("velocity"), torch.zeros(1, 1))


class TestODE:
    @pytest.mark.parametrize("S", [1, 5, 50])
    def test_exact_velocity_recovers_x0(self, S, rng):
        x0 = torch.from_numpy(rng.standard_normal((100, 8)))
        eps = torch.from_numpy(rng.standard_normal((100, 8)))
        out = sample_ode(Const(eps - x0), None, DiffusionSchedule("velocity", S), eps)
        assert torch.max(torch.abs(out - x0)) < 1e-6

    def test_zero_field_is_identity(self):
        x = torch.randn(3, 4)
        assert torch.equal(sample_ode(Const(torch.tensor(0.0)), None, DiffusionSchedule("velocity", 7), x), x)

    def test_literal_sign_flips_update(self, rng):
        x0 = torch.from_numpy(rng.standard_normal((4, 2)))
        eps = torch.from_numpy(rng.standard_normal((4, 2)))
        out = sample_ode(Const(eps - x0), None, DiffusionSchedule("velocity", 1), eps, literal_sign=True)
        assert torch.allclose(out, 2 * eps - x0)

    def test_first_order_convergence(self):
        mu, sd = 1.5, 0.5
        x1 = torch.linspace(-2, 2, 41, dtype=torch.float64).unsqueeze(-1)
        exact = mu + sd * x1
        field = gaussian_velocity(mu, sd)
        errs = [float(torch.abs(sample_ode(field, None, DiffusionSchedule("velocity", S), x1) - exact).max())
                for S in (20, 40, 80)]
        for coarse, fine in zip(errs, errs[1:]):
            assert 1.5 <= coarse / fine <= 2.5

    def test_deterministic(self):
        torch.manual_seed(0)
        net = DiffMLP(DiffMLPConfig(latent_dim=4, cond_dim=6))
        x, c = torch.randn(5, 4), torch.randn(5, 6)
        sched = DiffusionSchedule("velocity", 10)
        assert torch.equal(sample_ode(net, c, sched, x), sample_ode(net, c, sched, x))
