import numpy as np
import pytest
import torch

from cdamd.diffusion import DiffusionSchedule
from cdamd.errors import ConfigError, DimensionError, TrainingError, ValidationError
from cdamd.transformer import (
    Batch, CDAMDTransformer, PerturbationConfig, TextEncoder, TransformerConfig, compute_loss, cosine_mask_schedule,
    encode_text, perturb_conditions, replace_masked, sample_mask_positions, train_step,
)

CFG = TransformerConfig(layers=2, hidden=32, heads=4, ffn=64, latent_dim=4, max_len=32, codebook_size=16,
                        diff_width=32, diff_blocks=2)


def model(seed=0, cfg=CFG):
    torch.manual_seed(seed)
    return CDAMDTransformer(cfg).eval()


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            TransformerConfig(hidden=30, heads=4)

    def test_fractions_sum_to_one(self):
        with pytest.raises(ConfigError):
            PerturbationConfig(noise_frac=0.1, mask_frac=0.8, keep_frac=0.02)


class TestText:
    def test_deterministic_and_counts(self):
        enc = TextEncoder(64, 8)
        a, b = encode_text("a person walks", enc), encode_text("a person walks", enc)
        assert np.array_equal(a.embedding, b.embedding) and a.n_tokens == 3
        assert encode_text("jump", enc).n_tokens == 1

    @pytest.mark.parametrize("prompt", ["", "   "])
    def test_empty_prompt(self, prompt):
        with pytest.raises(ValidationError):
            encode_text(prompt, TextEncoder(64, 8))


class TestSchedule:
    @pytest.mark.parametrize("u,l,n", [(0.0, 7, 7), (1.0, 7, 1), (2 / 3, 10, 5), (0.5, 1, 1)])
    def test_spot_values(self, u, l, n):
        assert cosine_mask_schedule(u, l) == n

    @pytest.mark.parametrize("u,l", [(-0.1, 4), (1.1, 4), (0.5, 0)])
    def test_invalid(self, u, l):
        with pytest.raises(ValidationError):
            cosine_mask_schedule(u, l)

    def test_positions_respect_valid(self):
        g = torch.Generator().manual_seed(0)
        valid = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
        for _ in range(50):
            m = sample_mask_positions(valid, g)
            assert not (m & ~valid).any() and m.sum(1).min() >= 1


class TestPerturbation:
    def test_frequencies(self):
        g = torch.Generator().manual_seed(0)
        cfg = PerturbationConfig()
        emb = torch.zeros(100_000, 4, 2)
        _, kept, masked, kinds = perturb_conditions(emb, cfg, torch.ones(2), g)
        assert abs(1 - kept.float().mean().item() - 0.70) < 0.01
        x = torch.zeros(100_000, 2, 1)
        _, noise, mask = replace_masked(x, torch.ones(100_000, 2, dtype=torch.bool), torch.ones(1), cfg, g)
        n = noise.numel()
        fracs = noise.sum().item() / n, mask.sum().item() / n, 1 - (noise | mask).sum().item() / n
        assert np.allclose(fracs, (0.10, 0.88, 0.02), atol=0.01)

    def test_drop_everything(self):
        g = torch.Generator().manual_seed(0)
        _, kept, masked, _ = perturb_conditions(torch.zeros(50, 4, 2), PerturbationConfig(drop_prob=1.0), torch.ones(2), g)
        assert not kept.any() and not masked.any()

    def test_mask_only(self):
        g = torch.Generator().manual_seed(0)
        cfg = PerturbationConfig(drop_prob=0.0, noise_frac=0.0, mask_frac=1.0, keep_frac=0.0)
        emb = torch.randn(20, 6, 3)
        out, kept, masked, _ = perturb_conditions(emb, cfg, torch.full((3,), 7.0), g)
        assert kept.all() and torch.all(out[masked] == 7.0) and torch.equal(out[~masked], emb[~masked])


class TestForward:
    def test_shape_and_finite_without_tokens(self):
        z = model()(torch.randn(3, 9, 4), prompts=["a b", "c", "d e f"])
        assert z.shape == (3, 9, 32) and torch.isfinite(z).all()

    def test_dimension_errors(self):
        m = model()
        with pytest.raises(DimensionError):
            m(torch.randn(1, 5, 3), prompts=["x"])
        with pytest.raises(DimensionError):
            m(torch.randn(1, 5, 4), prompts=["x"], flags=torch.zeros(1, 4, dtype=torch.bool))
        with pytest.raises(DimensionError):
            m(torch.randn(1, 5, 4), prompts=["x"], tokens=torch.randn(1, 4, 32))

    def test_cm_equals_dccm_without_flags(self):
        m = model()
        x = torch.randn(2, 8, 4)
        tok = m.embed_tokens(torch.randint(0, 16, (2, 8, 4)))
        a = m(x, prompts=["p q", "r"], tokens=tok, mask_kind="DCCM")
        b = m(x, prompts=["p q", "r"], tokens=tok, mask_kind="CM")
        assert torch.equal(a, b)

    @pytest.mark.parametrize("probe", range(20))
    def test_future_generative_latents_are_invisible(self, probe):
        rng = np.random.default_rng(probe)
        L = int(rng.integers(4, 16))
        m = model(probe)
        flags = torch.from_numpy(rng.integers(0, 2, L).astype(bool)).unsqueeze(0)
        gen_pos = np.nonzero(~flags[0].numpy())[0]
        if gen_pos.size == 0:
            flags[0, -1] = False
            gen_pos = np.array([L - 1])
        j = int(rng.choice(gen_pos))
        x = torch.randn(1, L, 4)
        tok = m.embed_tokens(torch.randint(0, 16, (1, L, 4)))
        base = m(x, prompts=["walk"], tokens=tok, flags=flags)
        x2 = x.clone()
        x2[0, j] += torch.randn(4) * 5
        tok2 = tok.clone()
        tok2[0, j] += 3.0
        moved = m(x2, prompts=["walk"], tokens=tok2, flags=flags)
        delta = (moved - base).abs().amax(-1)[0]
        assert delta[:j].max().item() < 1e-6 if j > 0 else True
        assert delta[j].item() > 0

    def test_future_conditions_are_invisible(self):
        m = model()
        flags = torch.tensor([[0, 0, 0, 1]], dtype=torch.bool)
        x = torch.randn(1, 4, 4)
        base = m(x, prompts=["walk"], flags=flags)
        x2 = x.clone()
        x2[0, 3] += 5.0
        assert torch.equal(m(x2, prompts=["walk"], flags=flags)[0, :3], base[0, :3])

    def test_condition_rows_ignore_generative_latents(self):
        m = model()
        flags = torch.tensor([[0, 1, 0, 1, 1]], dtype=torch.bool)
        x = torch.randn(1, 5, 4)
        tok = m.embed_tokens(torch.randint(0, 16, (1, 5, 4)))
        base = m(x, prompts=["walk"], tokens=tok, flags=flags)
        x2, tok2 = x.clone(), tok.clone()
        x2[0, [0, 2]] += 4.0
        tok2[0, [0, 2]] -= 2.0
        moved = m(x2, prompts=["walk"], tokens=tok2, flags=flags)
        assert torch.equal(moved[0, [1, 3, 4]], base[0, [1, 3, 4]])
        assert (moved[0, 2] - base[0, 2]).abs().max() > 0

    def test_text_reaches_every_position(self):
        m = model()
        x = torch.randn(1, 6, 4)
        a = m(x, prompts=["a person walks"])
        b = m(x, prompts=["a person jumps"])
        assert torch.all((a - b).abs().amax(-1) > 0)


def _batch(seed=0, B=2, L=6):
    g = torch.Generator().manual_seed(seed)
    return Batch(torch.randn(B, L, 4, generator=g), torch.ones(B, L, dtype=torch.bool), ["walk", "jump"][:B],
                 torch.randint(0, 16, (B, L, 4), generator=g))


class TestTraining:
    def test_empty_mask_skips_update(self):
        m = model()
        before = {k: v.clone() for k, v in m.state_dict().items()}
        opt = torch.optim.SGD(m.parameters(), lr=0.1)
        g = torch.Generator().manual_seed(0)
        loss = train_step(m, opt, _batch(), DiffusionSchedule(), PerturbationConfig(), g,
                          gen_mask=torch.zeros(2, 6, dtype=torch.bool))
        assert loss == 0.0
        assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())

    def test_gradients_reach_backbone(self):
        m = model()
        m.train()
        g = torch.Generator().manual_seed(0)
        loss, _ = compute_loss(m, _batch(), DiffusionSchedule(), PerturbationConfig(), g)
        loss.backward()
        assert m.blocks[0].self_attn.q.weight.grad.abs().sum() > 0
        assert m.mask_latent.grad is not None

    def test_nan_loss_raises(self):
        m = model()
        b = _batch()
        b.latents[0, 0, 0] = float("nan")
        opt = torch.optim.SGD(m.parameters(), lr=0.1)
        with pytest.raises(TrainingError):
            train_step(m, opt, b, DiffusionSchedule(), PerturbationConfig(), torch.Generator().manual_seed(0),
                       gen_mask=torch.ones(2, 6, dtype=torch.bool))

    def test_gradient_matches_finite_differences(self):
        cfg = TransformerConfig(layers=1, hidden=8, heads=2, ffn=8, dropout=0.0, latent_dim=2, max_len=4,
                                codebook_size=4, token_levels=1, diff_blocks=1, diff_width=8, diffusion_batch_mul=1)
        torch.manual_seed(0)
        m = CDAMDTransformer(cfg).double().eval()
        with torch.no_grad():
            for p in m.head.parameters():
                p.add_(0.1 * torch.randn_like(p))
        b = Batch(torch.randn(1, 2, 2, dtype=torch.float64), torch.ones(1, 2, dtype=torch.bool), ["walk"],
                  torch.tensor([[[1], [2]]]))
        gen_mask = torch.tensor([[False, True]])

        def loss():
            return compute_loss(m, b, DiffusionSchedule(), PerturbationConfig(), torch.Generator().manual_seed(5),
                                gen_mask=gen_mask)[0]

        m.zero_grad()
        loss().backward()
        h = 1e-6
        for p in (m.latent_in.weight, m.blocks[0].self_attn.q.weight, m.head.out.weight):
            for idx in list(np.ndindex(p.shape))[:3]:
                with torch.no_grad():
                    p[idx] += h
                    up = float(loss())
                    p[idx] -= 2 * h
                    down = float(loss())
                    p[idx] += h
                fd = (up - down) / (2 * h)
                assert abs(float(p.grad[idx]) - fd) <= 1e-3 * max(abs(fd), 1e-7), (idx, float(p.grad[idx]), fd)

    def test_overfits_single_sequence(self):
        # the velocity head needs about 1000 steps on this config to fall under 10%
        m = model()
        opt = torch.optim.AdamW(m.parameters(), lr=2e-3)
        g = torch.Generator().manual_seed(0)
        batch = _batch(B=1)
        sched = DiffusionSchedule()
        everything = torch.ones(1, 6, dtype=torch.bool)

        def estimate():
            m.eval()
            with torch.no_grad():
                return np.mean([float(compute_loss(m, batch, sched, PerturbationConfig(),
                                                   torch.Generator().manual_seed(k), gen_mask=everything)[0])
                                for k in range(20)])

        start = estimate()
        for _ in range(1000):
            train_step(m, opt, batch, sched, PerturbationConfig(), g)
        end = estimate()
        assert end < 0.1 * start, (start, end)
