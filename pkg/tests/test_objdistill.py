"""Slot matching, affinity relations, and the auxiliary supervision head."""

import math

import pytest
import torch

from evdistill.objdistill import AuxHead, affinity, aux_loss, relation_loss, slot_feature_loss
from tests.fd import max_relative_error

torch.manual_seed(0)


class TestSlotFeatureLoss:
    def test_identical_slots_give_zero(self):
        q = torch.randn(4, 8, dtype=torch.float64)
        assert float(slot_feature_loss(q, q.clone())) == 0.0

    def test_hand_computed_value(self):
        qs = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        qt = torch.zeros(1, 2, dtype=torch.float64)
        assert float(slot_feature_loss(qs, qt)) == pytest.approx(1.5, abs=1e-12)

    def test_teacher_gradient_is_exactly_zero(self):
        qs = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        qt = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        loss = slot_feature_loss(qs, qt)
        g_t = torch.autograd.grad(loss, qt, allow_unused=True)[0]
        assert g_t is None

    def test_empty_slots(self):
        assert float(slot_feature_loss(torch.zeros(0, 8), torch.zeros(0, 8))) == 0.0


class TestAffinity:
    def test_orthonormal_pair(self):
        q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        torch.testing.assert_close(affinity(q), torch.eye(2, dtype=torch.float64))

    def test_unit_diagonal(self):
        q = torch.randn(5, 8, dtype=torch.float64)
        torch.testing.assert_close(
            affinity(q).diagonal(), torch.ones(5, dtype=torch.float64)
        )

    def test_hand_computed_cosine(self):
        q = torch.tensor([[1.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        m = affinity(q)
        assert float(m[0, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        assert float(m[1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_power_of_two_scaling_is_bitwise_exact(self):
        q = torch.randn(4, 8, dtype=torch.float64)
        for c in (0.5, 2.0, 1024.0):
            assert torch.equal(affinity(c * q), affinity(q))

    def test_arbitrary_scaling_is_near_exact(self):
        q = torch.randn(4, 8, dtype=torch.float64)
        torch.testing.assert_close(affinity(3.7 * q), affinity(q), atol=1e-12, rtol=0)

    def test_permutation_conjugation(self):
        q = torch.randn(5, 8, dtype=torch.float64)
        perm = torch.tensor([3, 1, 4, 0, 2])
        m = affinity(q)
        torch.testing.assert_close(affinity(q[perm]), m[perm][:, perm])

    def test_symmetry(self):
        m = affinity(torch.randn(6, 8, dtype=torch.float64))
        torch.testing.assert_close(m, m.T, atol=1e-6, rtol=0)
        assert m.abs().max() <= 1.0 + 1e-12


class TestRelationLoss:
    def test_identical_affinities_give_zero(self):
        m = affinity(torch.randn(4, 8, dtype=torch.float64))
        assert float(relation_loss(m, m.clone())) == 0.0

    def test_single_object_is_zero(self):
        ms = affinity(torch.randn(1, 8, dtype=torch.float64))
        mt = affinity(torch.randn(1, 8, dtype=torch.float64))
        assert float(relation_loss(ms, mt)) == 0.0  # both are [[1]]

    def test_hand_computed_value(self):
        ms = torch.eye(2, dtype=torch.float64)
        mt = torch.ones(2, 2, dtype=torch.float64)
        assert float(relation_loss(ms, mt)) == pytest.approx(0.5, abs=1e-12)

    def test_teacher_gradient_is_exactly_zero(self):
        qs = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        qt = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        loss = relation_loss(affinity(qs), affinity(qt))
        g_t = torch.autograd.grad(loss, qt, allow_unused=True)[0]
        assert g_t is None


class TestAuxLoss:
    def test_uniform_probabilities_give_k_ln2(self):
        head = AuxHead(8, 3).double()
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()  # logits 0 -> probability 0.5 per category, sizes 0
        slots = torch.randn(1, 8, dtype=torch.float64)
        cats = torch.tensor([1])
        sizes = torch.zeros(1, 2, dtype=torch.float64)
        loss = aux_loss(head, slots, cats, sizes, beta=50.0)
        assert float(loss) == pytest.approx(3 * math.log(2), abs=1e-12)

    def test_size_error_scales_with_beta(self):
        head = AuxHead(4, 3).double()
        slots = torch.randn(2, 4, dtype=torch.float64)
        with torch.no_grad():
            logits, sizes = head(slots)
        # build targets so categories are "perfect" and sizes are off by 0.1
        onehot_logits = torch.full((2, 3), -500.0, dtype=torch.float64)
        onehot_logits[0, 1] = 500.0
        onehot_logits[1, 2] = 500.0

        class Fixed(AuxHead):
            def forward(self, s):
                return onehot_logits, sizes

        fixed = Fixed(4, 3).double()
        loss = aux_loss(fixed, slots, torch.tensor([1, 2]), sizes - 0.1, beta=50.0)
        assert float(loss) == pytest.approx(5.0, abs=1e-9)

    def test_gradient_flows_into_slots_and_head(self):
        head = AuxHead(8, 3).double()
        slots = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        loss = aux_loss(head, slots, torch.tensor([0, 1, 2]),
                        torch.rand(3, 2, dtype=torch.float64), beta=50.0)
        grads = torch.autograd.grad(loss, [slots] + list(head.parameters()))
        assert all(g.abs().sum() > 0 for g in grads)

    def test_empty_objects(self):
        head = AuxHead(8, 3)
        loss = aux_loss(head, torch.zeros(0, 8), torch.zeros(0, dtype=torch.long),
                        torch.zeros(0, 2), beta=50.0)
        assert float(loss) == 0.0


class TestGradientChecks:
    def test_feature_and_relation_losses_match_finite_differences(self):
        torch.manual_seed(3)
        qs = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        qt = torch.randn(3, 8, dtype=torch.float64)
        assert max_relative_error(lambda: slot_feature_loss(qs, qt), [qs]) < 1e-4
        assert max_relative_error(
            lambda: relation_loss(affinity(qs), affinity(qt)), [qs]
        ) < 1e-4

    def test_aux_loss_matches_finite_differences(self):
        torch.manual_seed(5)
        head = AuxHead(8, 3).double()
        slots = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        cats = torch.tensor([0, 2, 1])
        sizes = torch.rand(3, 2, dtype=torch.float64)

        def scalar():
            return aux_loss(head, slots, cats, sizes, beta=50.0)

        assert max_relative_error(scalar, [slots] + list(head.parameters())) < 1e-4
