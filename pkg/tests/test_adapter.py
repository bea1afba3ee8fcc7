"""Tests for the adapter network and the personalized re-aging path."""

import pytest
import torch

from mytm.adapter import AdapterNetwork, adapter_forward, build_adapter, personalized_reage
from mytm.backends.toy import SyntheticPerson
from mytm.config import AblationFlags, AdapterConfig, LossWeights
from mytm.errors import DomainError, StructuralError
from mytm.losses import total_personalization_loss


def _code(seed):
    return torch.randn(18, 512, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestAdapterStructure:
    """Layer layout and initialization."""

    def test_style_mlps(self):
        """There are 18 style MLPs with zero-initialized output layers."""
        net = AdapterNetwork()
        assert len(net.style_mlps) == 18
        for mlp in net.style_mlps:
            assert torch.count_nonzero(mlp[-1].weight) == 0
            assert torch.count_nonzero(mlp[-1].bias) == 0
            assert mlp[0].in_features == 512 + 512 + 16

    def test_global_projection_widths(self):
        """The 18x32 global summary is projected to 512."""
        net = AdapterNetwork()
        assert net.global_projection.in_features == 18 * 32
        assert net.global_projection.out_features == 512

    def test_reduced_widths(self, small_adapter_config):
        """Width reduction divides every hidden size."""
        assert small_adapter_config == AdapterConfig(
            global_hidden=16, global_dim=2, global_out=32, aging_hidden=4, age_features=1, style_hidden=32
        )

    def test_seeded_construction(self):
        """The same seed builds identical weights."""
        a = build_adapter(AdapterConfig().reduced(16), seed=4)
        b = build_adapter(AdapterConfig().reduced(16), seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestAdapterForward:
    """Latent offsets."""

    def test_fresh_net_gives_zero_offset(self):
        """A fresh network returns all zeros for any input."""
        net = build_adapter(dtype=torch.float64)
        for seed, age in [(0, 0.0), (1, 37.5), (2, 100.0)]:
            assert torch.count_nonzero(adapter_forward(net, _code(seed), age)) == 0

    def test_perturbed_reproducible(self, make_perturbed_adapter, small_adapter_config):
        """Perturbed networks built from the same seed give identical offsets."""
        code = _code(5)
        a = adapter_forward(make_perturbed_adapter(small_adapter_config, seed=1), code, 40)
        b = adapter_forward(make_perturbed_adapter(small_adapter_config, seed=1), code, 40)
        assert torch.equal(a, b)
        assert a.shape == (18, 512)
        assert torch.isfinite(a).all()

    def test_age_changes_offset(self, make_perturbed_adapter, small_adapter_config):
        """The aging feature reaches the offset."""
        net = make_perturbed_adapter(small_adapter_config, seed=2)
        code = _code(6)
        assert not torch.equal(adapter_forward(net, code, 20), adapter_forward(net, code, 80))

    def test_batched(self, make_perturbed_adapter, small_adapter_config):
        """Batched codes produce per-sample offsets."""
        net = make_perturbed_adapter(small_adapter_config, seed=0)
        codes = torch.stack([_code(0), _code(1)])
        ages = torch.tensor([0.3, 0.6], dtype=torch.float64)
        out = net(codes, ages)
        assert out.shape == (2, 18, 512)
        assert torch.allclose(out[1], net(codes[1], ages[1]), atol=1e-12)

    def test_rejects_bad_inputs(self):
        """Non-finite or mis-shaped codes and invalid ages are rejected."""
        net = build_adapter(AdapterConfig().reduced(16), dtype=torch.float64)
        bad = _code(0)
        bad[0, 0] = float("nan")
        with pytest.raises(DomainError):
            adapter_forward(net, bad, 30)
        with pytest.raises(StructuralError):
            adapter_forward(net, torch.zeros(18, 256, dtype=torch.float64), 30)
        with pytest.raises(DomainError):
            adapter_forward(net, _code(0), 120)

    def test_gradients_match_finite_differences(self, make_perturbed_adapter, small_adapter_config):
        """d(sum of offset)/d(param) matches central differences for every parameter group."""
        net = make_perturbed_adapter(small_adapter_config, seed=3)
        code = _code(7)
        net.zero_grad()
        adapter_forward(net, code, 45).sum().backward()
        step = 1e-5
        gen = torch.Generator().manual_seed(0)
        for group, params in net.parameter_groups().items():
            for param in params[:3]:
                flat = param.data.view(-1)
                for index in torch.randint(flat.numel(), (3,), generator=gen).tolist():
                    original = flat[index].item()
                    with torch.no_grad():
                        flat[index] = original + step
                        plus = float(adapter_forward(net, code, 45).sum())
                        flat[index] = original - step
                        minus = float(adapter_forward(net, code, 45).sum())
                        flat[index] = original
                    numeric = (plus - minus) / (2 * step)
                    analytic = float(param.grad.view(-1)[index])
                    assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, group

    def test_bounded_inputs_give_finite_output(self, make_perturbed_adapter, small_adapter_config):
        """Large but bounded codes stay finite."""
        net = make_perturbed_adapter(small_adapter_config, seed=4, scale=1.0)
        assert torch.isfinite(adapter_forward(net, 100 * torch.ones(18, 512, dtype=torch.float64), 100)).all()


class TestPersonalizedReage:
    """Decoding the adapted latent."""

    def test_identity_at_init(self, toy_bundle):
        """A fresh adapter reproduces the global path bitwise for 20 inputs and 5 ages."""
        net = build_adapter(dtype=torch.float64)
        for seed in range(20):
            image = SyntheticPerson(seed=seed).render(20.0 + 3 * seed)
            for age in (0, 25, 50, 75, 100):
                personalized, combined = personalized_reage(toy_bundle, net, image, age)
                code = toy_bundle.encode(image, age)
                assert torch.equal(combined, code)
                assert torch.equal(personalized, toy_bundle.decode(code))

    def test_returns_combined_latent(self, toy_bundle, make_perturbed_adapter, small_adapter_config):
        """The returned latent is global code plus offset."""
        net = make_perturbed_adapter(small_adapter_config, seed=0)
        image = SyntheticPerson(seed=1).render(40.0)
        output, combined = personalized_reage(toy_bundle, net, image, 60)
        code = toy_bundle.encode(image, 60)
        assert combined.shape == (18, 512)
        assert torch.equal(combined, code + adapter_forward(net, code, 60))
        assert torch.equal(output, toy_bundle.decode(combined))

    def test_bypass(self, toy_bundle, make_perturbed_adapter, small_adapter_config):
        """use_adapter=False decodes the global code."""
        net = make_perturbed_adapter(small_adapter_config, seed=0)
        image = SyntheticPerson(seed=1).render(40.0)
        output, combined = personalized_reage(toy_bundle, net, image, 60, use_adapter=False)
        assert torch.equal(combined, toy_bundle.encode(image, 60))
        assert torch.equal(output, toy_bundle.decode(combined))

    def test_short_training_moves_output(self, toy_bundle, small_adapter_config):
        """Ten optimizer steps move the output away from the global path."""
        net = build_adapter(small_adapter_config, seed=0, dtype=torch.float64)
        optimizer = torch.optim.Adam(net.parameters(), lr=1e-3)
        person = SyntheticPerson(seed=2)
        x = person.render(40.0)
        reference = [person.render(60.0)]
        for _ in range(10):
            report, _ = total_personalization_loss(
                toy_bundle, net, x, 40.0, 60.0, reference, LossWeights(), AblationFlags(), extrapolation_age=10.0
            )
            optimizer.zero_grad()
            report.total.backward()
            optimizer.step()
        with torch.no_grad():
            personalized, _ = personalized_reage(toy_bundle, net, x, 60)
            global_path, _ = personalized_reage(toy_bundle, net, x, 60, use_adapter=False)
        assert not torch.equal(personalized, global_path)
