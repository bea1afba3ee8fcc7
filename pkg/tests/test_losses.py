"""Tests for the loss terms."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mytm.adapter import build_adapter
from mytm.backends.toy import AGE_ROWS, SyntheticPerson, ToyParameters, make_synthetic_collection
from mytm.config import AblationFlags, LossWeights
from mytm.data import load_manifest
from mytm.errors import ContractError, StructuralError
from mytm.losses import (
    adaptive_reg_weight,
    adaptive_wnorm_loss,
    build_reference_set,
    extrapolation_regularization,
    personalized_aging_loss,
    sam_cycle_loss,
    sam_forward_loss,
    total_personalization_loss,
)


def _random_image(gen):
    return torch.rand(3, 32, 32, generator=gen, dtype=torch.float64) * 2 - 1


def _unit(v):
    return v / np.linalg.norm(v)


class TestSamForwardLoss:
    """Pixel, perceptual, identity and age terms."""

    def test_identical_image_at_its_age(self, toy_bundle):
        """y == x with a matching age estimate gives all-zero terms."""
        x = SyntheticPerson(seed=0).render(40.0)
        report = sam_forward_loss(toy_bundle, x, x, 40.0, LossWeights())
        for value in report.as_dict().values():
            assert value == pytest.approx(0.0, abs=1e-9)

    def test_age_term(self, toy_bundle):
        """An estimate of 40 against a target of 30 gives an age term of 10."""
        x = SyntheticPerson(seed=0).render(40.0)
        report = sam_forward_loss(toy_bundle, x, x, 30.0, LossWeights())
        assert float(report.term("forward_age").value) == pytest.approx(10.0, abs=1e-9)

    def test_term_by_term_oracle(self, toy_bundle):
        """The total equals a hand-rolled weighted sum of the four terms."""
        params = ToyParameters(seed=0, dtype=torch.float64)
        person = SyntheticPerson(seed=1)
        x, y = person.render(35.0), person.render(62.0)
        w = LossWeights()
        mse = float(((y - x) ** 2).mean())
        fy = torch.tanh(F.conv2d(y[None], params.kernel, padding=1))
        fx = torch.tanh(F.conv2d(x[None], params.kernel, padding=1))
        perceptual = float(((fy - fx) ** 2).mean())
        ey = (params.projection @ y[:, AGE_ROWS:].reshape(-1)).numpy()
        ex = (params.projection @ x[:, AGE_ROWS:].reshape(-1)).numpy()
        identity = 1.0 - float(_unit(ey) @ _unit(ex))
        estimate = 50.0 * (float(y[:, :AGE_ROWS].mean()) / 0.9 + 1.0)
        age = abs(35.0 - estimate)
        expected = w.lambda_l2 * mse + w.lambda_lpips * perceptual + w.lambda_id * identity + w.lambda_age * age
        report = sam_forward_loss(toy_bundle, y, x, 35.0, w)
        assert float(report.total) == pytest.approx(expected, rel=1e-9)

    def test_shape_mismatch(self, toy_bundle):
        """Output and source must share a shape."""
        x = SyntheticPerson(seed=0).render(40.0)
        with pytest.raises(StructuralError):
            sam_forward_loss(toy_bundle, x[:, :16], x, 40.0, LossWeights())


class TestSamCycleLoss:
    """Cycle pass back to the input age."""

    def test_zero_init_matches_round_trip(self, toy_bundle):
        """With a fresh adapter the cycle loss is the forward loss of the round-tripped image."""
        net = build_adapter(dtype=torch.float64)
        person = SyntheticPerson(seed=2)
        x, y_tgt = person.render(45.0), person.render(65.0)
        round_trip = toy_bundle.decode(toy_bundle.encode(y_tgt, 45.0))
        cycle = sam_cycle_loss(toy_bundle, net, y_tgt, x, 45.0, LossWeights())
        forward = sam_forward_loss(toy_bundle, round_trip, x, 45.0, LossWeights(), prefix="cycle")
        assert cycle.as_dict() == pytest.approx(forward.as_dict(), rel=1e-12, abs=1e-15)

    def test_unmodified_image_at_own_age(self, toy_bundle):
        """Cycling an image at its own age costs almost nothing."""
        net = build_adapter(dtype=torch.float64)
        x = SyntheticPerson(seed=3).render(52.0)
        assert float(sam_cycle_loss(toy_bundle, net, x, x, 52.0, LossWeights()).total) < 1e-3

    def test_random_inputs_finite(self, toy_bundle, make_perturbed_adapter, small_adapter_config):
        """Random inputs give finite terms."""
        net = make_perturbed_adapter(small_adapter_config, seed=0)
        gen = torch.Generator().manual_seed(5)
        report = sam_cycle_loss(toy_bundle, net, _random_image(gen), _random_image(gen), 30.0, LossWeights())
        assert all(math.isfinite(v) for v in report.as_dict().values())


@pytest.fixture
def small_collection(tmp_path):
    return load_manifest(
        make_synthetic_collection(tmp_path, train_ages=[30, 35, 40], reference_ages=[33, 60], seed=1)
    )


class TestReferenceSet:
    """Photos near the target age."""

    def test_window_filter(self, small_collection):
        """Target 34 with window 3 selects exactly the age-35 photo."""
        reference = build_reference_set(small_collection, 34, window_years=3)
        assert [r.age_years for r in reference.records] == [35.0]
        assert len(reference.images) == 1
        assert not reference.flagged_empty

    def test_exact_age_included(self, small_collection):
        """A photo at exactly the target age is included."""
        reference = build_reference_set(small_collection, 40, window_years=0)
        assert [r.age_years for r in reference.records] == [40.0]

    def test_widening(self, small_collection):
        """An empty window widens one year at a time."""
        reference = build_reference_set(small_collection, 46, window_years=3)
        assert reference.window == 6
        assert [r.age_years for r in reference.records] == [40.0]

    def test_widening_fails(self, tmp_path):
        """With the nearest photo 20 years away the set comes back empty and flagged."""
        collection = load_manifest(make_synthetic_collection(tmp_path, train_ages=[30]))
        reference = build_reference_set(collection, 50)
        assert reference.flagged_empty
        assert len(reference) == 0
        assert reference.window == 10

    def test_reference_split_isolation(self, small_collection):
        """Asking for the reference split never returns train photos."""
        for target in range(0, 101, 5):
            reference = build_reference_set(small_collection, target, split="reference")
            assert all(r.split == "reference" for r in reference.records)


class TestPersonalizedAgingLoss:
    """One minus the best reference match."""

    def test_identical_reference(self, toy_bundle):
        """A pixel-identical reference gives 0."""
        x = SyntheticPerson(seed=0).render(40.0)
        other = SyntheticPerson(seed=1).render(40.0)
        assert float(personalized_aging_loss(toy_bundle, x, [other, x.clone()])) == pytest.approx(0.0, abs=1e-12)

    def test_opposite_reference(self, toy_bundle):
        """A negated identity band against a singleton reference gives 2."""
        x = SyntheticPerson(seed=0).render(40.0)
        y = x.clone()
        y[:, AGE_ROWS:] = -x[:, AGE_ROWS:]
        assert float(personalized_aging_loss(toy_bundle, y, [x])) == pytest.approx(2.0, abs=1e-12)

    def test_brute_force_max(self, toy_bundle):
        """The loss matches an exhaustive max over cosines for sets of up to eight photos."""
        gen = torch.Generator().manual_seed(3)
        for size in [1 + i % 8 for i in range(50)]:
            y = _random_image(gen)
            refs = [_random_image(gen) for _ in range(size)]
            ey = _unit(toy_bundle.identity_embedder(y).numpy())
            best = max(float(ey @ _unit(toy_bundle.identity_embedder(r).numpy())) for r in refs)
            assert float(personalized_aging_loss(toy_bundle, y, refs)) == pytest.approx(1.0 - best, abs=1e-9)

    def test_range_and_superset(self, toy_bundle):
        """Values lie in [0, 2] and never increase when a reference is added."""
        gen = torch.Generator().manual_seed(11)
        for _ in range(100):
            y = _random_image(gen)
            refs = [_random_image(gen) for _ in range(int(torch.randint(1, 4, (1,), generator=gen)))]
            loss = float(personalized_aging_loss(toy_bundle, y, refs))
            assert 0.0 <= loss <= 2.0
            grown = float(personalized_aging_loss(toy_bundle, y, refs + [_random_image(gen)]))
            assert grown <= loss

    def test_empty_reference(self, toy_bundle):
        """Callers must skip the term instead of passing an empty set."""
        with pytest.raises(ContractError):
            personalized_aging_loss(toy_bundle, SyntheticPerson(seed=0).render(40.0), [])


class TestExtrapolationRegularization:
    """Replay penalty against the global output."""

    def test_identical(self, toy_bundle):
        """Identical images cost nothing."""
        y = SyntheticPerson(seed=0).render(15.0)
        assert float(extrapolation_regularization(toy_bundle, y, y.clone(), LossWeights())) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_zero_init_any_age(self, toy_bundle):
        """With a fresh adapter the personalized and global paths coincide."""
        net = build_adapter(dtype=torch.float64)
        x = SyntheticPerson(seed=0).render(50.0)
        report, _ = total_personalization_loss(
            toy_bundle, net, x, 50.0, 50.0, [x], LossWeights(), AblationFlags(), extrapolation_age=90.0
        )
        assert float(report.term("reg_extra").value) == pytest.approx(0.0, abs=1e-12)

    def test_oracle(self, toy_bundle):
        """The value equals the weighted pixel, perceptual and identity terms."""
        person = SyntheticPerson(seed=4)
        y_p, y_global = person.render(10.0), person.render(20.0)
        w = LossWeights()
        identity = 1.0 - float((toy_bundle.embed_identity(y_p) * toy_bundle.embed_identity(y_global)).sum())
        expected = (
            w.lambda_l2 * float(((y_p - y_global) ** 2).mean())
            + w.lambda_lpips * float(toy_bundle.perceptual_distance(y_p, y_global))
            + w.lambda_id * identity
        )
        assert float(extrapolation_regularization(toy_bundle, y_p, y_global, w)) == pytest.approx(expected, rel=1e-9)

    def test_shape_mismatch(self, toy_bundle):
        """Shapes must agree."""
        y = SyntheticPerson(seed=0).render(15.0)
        with pytest.raises(StructuralError):
            extrapolation_regularization(toy_bundle, y, y[:, :, :16], LossWeights())


class TestAdaptiveWNorm:
    """Cosine-ramp latent regularization."""

    def test_schedule_endpoints(self):
        """Gaps of 0, 50 and 100 years weigh exactly 0, 1 and 2."""
        assert adaptive_reg_weight(0) == 0.0
        assert adaptive_reg_weight(50) == 1.0
        assert adaptive_reg_weight(100) == 2.0

    def test_monotone(self):
        """The weight never decreases on the integer grid."""
        weights = [adaptive_reg_weight(d) for d in range(101)]
        assert all(a <= b for a, b in zip(weights, weights[1:]))

    def test_quarter(self):
        """A 25-year gap weighs 1 - cos(pi/4)."""
        assert adaptive_reg_weight(25) == pytest.approx(1.0 - math.cos(math.pi / 4), abs=1e-12)

    def test_clamped(self):
        """Gaps outside [0, 100] are clamped."""
        assert adaptive_reg_weight(150) == 2.0
        assert adaptive_reg_weight(-3) == 0.0

    def test_equal_ages(self):
        """No age gap means no penalty."""
        combined = torch.randn(18, 512, dtype=torch.float64)
        assert float(adaptive_wnorm_loss(combined, torch.zeros_like(combined), 40, 40)) == 0.0

    def test_at_mean(self):
        """A latent at the mean costs nothing."""
        mean = torch.randn(18, 512, dtype=torch.float64)
        assert float(adaptive_wnorm_loss(mean.clone(), mean, 0, 100)) == 0.0

    def test_closed_form(self):
        """A 100-year gap with an all-ones offset gives 2 * 96."""
        mean = torch.zeros(18, 512, dtype=torch.float64)
        assert float(adaptive_wnorm_loss(mean + 1.0, mean, 0, 100)) == 192.0

    def test_shape_mismatch(self):
        """Shapes must agree."""
        with pytest.raises(StructuralError):
            adaptive_wnorm_loss(torch.zeros(18, 512), torch.zeros(18, 256), 0, 50)


class TestTotalPersonalizationLoss:
    """Itemized aggregate."""

    def test_zero_init_own_age(self, toy_bundle):
        """A fresh adapter at the photo's own age has near-zero total loss."""
        net = build_adapter(dtype=torch.float64)
        x = SyntheticPerson(seed=0).render(50.0)
        report, _ = total_personalization_loss(
            toy_bundle, net, x, 50.0, 50.0, [x], LossWeights(), AblationFlags(), extrapolation_age=85.0
        )
        assert float(report.term("wnorm").value) == 0.0
        assert float(report.total) == pytest.approx(0.0, abs=1e-6)

    def test_zero_weights(self, toy_bundle, make_perturbed_adapter, small_adapter_config):
        """All-zero weights give a zero total."""
        net = make_perturbed_adapter(small_adapter_config, seed=1)
        person = SyntheticPerson(seed=1)
        x = person.render(35.0)
        report, _ = total_personalization_loss(
            toy_bundle, net, x, 35.0, 60.0, [person.render(60.0)], LossWeights.zeros(), AblationFlags(),
            extrapolation_age=90.0,
        )
        assert float(report.total) == 0.0

    def test_skipped_terms_are_itemized(self, toy_bundle, small_adapter_config):
        """Disabled and unavailable terms appear as skipped with no contribution."""
        net = build_adapter(small_adapter_config, dtype=torch.float64)
        x = SyntheticPerson(seed=0).render(50.0)
        report, _ = total_personalization_loss(
            toy_bundle, net, x, 50.0, 40.0, None, LossWeights(),
            AblationFlags(use_adaptive_wnorm=False),
        )
        skipped = {t.name: t.reason for t in report.terms if t.skipped}
        assert skipped == {
            "pers_age": "empty reference set",
            "wnorm": "disabled",
            "reg_extra": "no extrapolation draw",
        }
        assert all(float(t.contribution) == 0.0 for t in report.terms if t.skipped)

    def test_total_is_weighted_sum(self, toy_bundle, make_perturbed_adapter, small_adapter_config):
        """The total equals the sum of weight times value."""
        net = make_perturbed_adapter(small_adapter_config, seed=2)
        person = SyntheticPerson(seed=2)
        x = person.render(35.0)
        report, _ = total_personalization_loss(
            toy_bundle, net, x, 35.0, 60.0, [person.render(58.0), person.render(61.0)], LossWeights(),
            AblationFlags(), extrapolation_age=12.0,
        )
        expected = sum(t.weight * float(t.value) for t in report.terms if not t.skipped)
        assert float(report.total) == pytest.approx(expected, abs=1e-6)
        assert {t.name for t in report.terms} >= {"forward_l2", "cycle_age", "pers_age", "wnorm", "reg_extra"}

    def test_deterministic(self, toy_bundle, make_perturbed_adapter, small_adapter_config):
        """The same step evaluated twice gives an identical itemized report."""
        person = SyntheticPerson(seed=3)
        x = person.render(35.0)
        reports = []
        for _ in range(2):
            net = make_perturbed_adapter(small_adapter_config, seed=3)
            report, _ = total_personalization_loss(
                toy_bundle, net, x, 35.0, 55.0, [person.render(55.0)], LossWeights(), AblationFlags(),
                extrapolation_age=95.0,
            )
            reports.append(report.as_dict())
        assert reports[0] == reports[1]
