"""Fixture generator tests: determinism, structure, and parameter checks."""

import numpy as np
import pytest

from d2moe.analysis import energy_retention
from d2moe.errors import ParameterError
from d2moe.fixtures import gen_fixture
from d2moe.linalg import svd
from d2moe.merge import compute_deltas, mean_merge
from d2moe.moe import Role, moe_forward_dense


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        a = gen_fixture(seed=3, layers=1, tokens=64)
        b = gen_fixture(seed=3, layers=1, tokens=64)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.labels, b.labels)
        for la, lb in zip(a.model.layers, b.model.layers):
            assert np.array_equal(la.gate, lb.gate)
            for ea, eb in zip(la.experts, lb.experts):
                for role in (Role.UP, Role.DOWN):
                    assert np.array_equal(ea[role], eb[role])

    def test_different_seeds_differ(self):
        a = gen_fixture(seed=1, layers=1, tokens=32)
        b = gen_fixture(seed=2, layers=1, tokens=32)
        assert not np.array_equal(a.tokens, b.tokens)


class TestStructure:
    def test_shapes(self):
        fx = gen_fixture(seed=0, n_experts=4, d_model=16, hidden=24, layers=3,
                         tokens=100, num_classes=6)
        assert len(fx.model.layers) == 3
        assert fx.tokens.shape == (16, 100)
        assert fx.n_tokens == 100
        assert fx.labels.shape == (100,)
        assert np.all((fx.labels >= 0) & (fx.labels < 6))
        layer = fx.model.layers[0]
        assert layer.gate.shape == (4, 16)
        assert len(layer.experts) == 4
        assert layer.experts[0][Role.UP].shape == (24, 16)
        assert layer.experts[0][Role.DOWN].shape == (16, 24)

    def test_zero_rank_noise_makes_experts_identical(self):
        fx = gen_fixture(seed=5, rank_noise=0, layers=1, tokens=32)
        layer = fx.model.layers[0]
        for role in (Role.UP, Role.DOWN):
            ref = layer.experts[0][role]
            for expert in layer.experts[1:]:
                assert np.array_equal(expert[role], ref)

    def test_mean_of_experts_recovers_common_part_with_low_rank_deltas(self):
        """Deltas against the mean must be rank `rank_noise` up to the small
        dense remainder: at k = rank_noise they retain nearly all energy."""
        fx = gen_fixture(seed=0, rank_noise=4)
        for layer in fx.model.layers:
            for role in (Role.UP, Role.DOWN):
                weights = [e[role] for e in layer.experts]
                for d in compute_deltas(weights, mean_merge(weights)):
                    assert energy_retention(svd(d).sigma, 4) >= 0.99

    def test_routing_traffic_imbalanced(self):
        """Generalist experts should see far more traffic than burst-keyed ones."""
        fx = gen_fixture(seed=1, layers=1)
        _, traces = moe_forward_dense(fx.model, fx.tokens)
        counts = traces[0].counts
        assert counts.max() > 5 * max(counts.min(), 1)

    def test_tokens_anisotropic(self):
        fx = gen_fixture(seed=2, layers=1, tokens=400)
        cov_eigs = np.linalg.eigvalsh(fx.tokens @ fx.tokens.T)
        assert cov_eigs[-1] / max(cov_eigs[0], 1e-30) > 10.0

    def test_token_coord_groups(self):
        # burst coords fire rarely but hot; the dead tail stays near zero
        fx = gen_fixture(seed=3, layers=1)
        burst = fx.tokens[0]
        fired = np.abs(burst) > 1.0
        assert 0.0 < fired.mean() < 0.2
        assert np.all(np.abs(burst[fired]) >= 3.0)
        assert np.abs(fx.tokens[-1]).max() < 0.05

    def test_labels_are_models_own_predictions(self):
        fx = gen_fixture(seed=4, layers=1, tokens=400, num_classes=10)
        logits, _ = moe_forward_dense(fx.model, fx.tokens)
        assert np.array_equal(fx.labels, logits.argmax(axis=0))
        counts = np.bincount(fx.labels, minlength=10)
        assert counts.max() > 2 * max(counts.min(), 1) or counts.min() == 0


class TestValidation:
    def test_rank_noise_bounds(self):
        with pytest.raises(ParameterError):
            gen_fixture(seed=0, d_model=8, hidden=16, rank_noise=8)
        with pytest.raises(ParameterError):
            gen_fixture(seed=0, rank_noise=-1)

    def test_dimension_checks(self):
        with pytest.raises(ParameterError):
            gen_fixture(seed=0, n_experts=2, top_k=3)
        with pytest.raises(ParameterError):
            gen_fixture(seed=0, num_classes=1)
        with pytest.raises(ParameterError):
            gen_fixture(seed=0, noise_spread=0.5)
        with pytest.raises(ParameterError):
            gen_fixture(seed=0, tokens=0)
