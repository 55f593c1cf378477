import math

import numpy as np
import numpy.testing as npt
import pytest

from picoweave import mi


def bijection_model(n=4):
    """One position, z = x uniform, y = z."""
    return mi.DiscreteJointModel(
        px=np.full(n, 1.0 / n),
        f=[np.arange(n)],
        g=[np.arange(n)],
        nz=n,
        ny=n,
    )


def constant_y_model(n=4):
    return mi.DiscreteJointModel(
        px=np.full(n, 1.0 / n),
        f=[np.arange(n)],
        g=[np.zeros(n, dtype=np.int64)],
        nz=n,
        ny=n,
    )


def brute_force_mi(m: mi.DiscreteJointModel) -> float:
    """Independent double-loop enumeration with dict-based joints."""
    total = 0.0
    for k in range(m.positions):
        joint: dict = {}
        for x in range(m.px.size):
            prefix = []
            for kk in range(k + 1):
                prefix.append(int(m.f[kk][x]))
            z = prefix[-1]
            y = int(m.g[k][tuple(prefix)])
            joint[(z, y)] = joint.get((z, y), 0.0) + float(m.px[x])
        pz: dict = {}
        py: dict = {}
        for (z, y), p in joint.items():
            pz[z] = pz.get(z, 0.0) + p
            py[y] = py.get(y, 0.0) + p
        for (z, y), p in joint.items():
            if p > 0:
                total += p * math.log(p / (pz[z] * py[y]))
    return total


def brute_force_conditional_entropy(m: mi.DiscreteJointModel, direction: str) -> float:
    total = 0.0
    for k in range(m.positions):
        joint = m.joint_at(k)
        if direction == "y_given_z":
            joint = joint.T
        for yi in range(joint.shape[1]):
            py = joint[:, yi].sum()
            if py <= 0:
                continue
            for zi in range(joint.shape[0]):
                p = joint[zi, yi]
                if p > 0:
                    total += -p * math.log(p / py)
    return total


class TestExactMI:
    def test_independent_outputs_zero(self):
        m = constant_y_model()
        assert mi.exact_mutual_information(m) == 0.0

    def test_uniform_bijection_ln4(self):
        m = bijection_model(4)
        npt.assert_allclose(mi.exact_mutual_information(m), math.log(4), atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_independent_enumeration(self, seed):
        m = mi.random_model(seed, nx=7, nz=5, ny=4, positions=3)
        npt.assert_allclose(mi.exact_mutual_information(m), brute_force_mi(m), atol=1e-10)

    def test_unnormalized_p_rejected(self):
        with pytest.raises(ValueError, match="sums to"):
            mi.DiscreteJointModel(px=np.array([0.5, 0.6]), f=[np.zeros(2, dtype=int)],
                                  g=[np.zeros(2, dtype=int)], nz=2, ny=2)


class TestOptimalCrossEntropy:
    def test_deterministic_bijection_zero(self):
        assert mi.optimal_cross_entropy(bijection_model()) == 0.0

    def test_constant_y_gives_latent_entropy(self):
        m = constant_y_model(4)
        npt.assert_allclose(mi.optimal_cross_entropy(m), math.log(4), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("direction", ["z_given_y", "y_given_z"])
    def test_matches_direct_conditional_enumeration(self, seed, direction):
        m = mi.random_model(seed, nx=6, nz=4, ny=3, positions=2)
        npt.assert_allclose(
            mi.optimal_cross_entropy(m, direction),
            brute_force_conditional_entropy(m, direction),
            atol=1e-10,
        )


class TestDecomposition:
    def test_50_random_models_pass(self):
        for seed in range(50):
            m = mi.random_model(seed)
            rep = mi.verify_mi_decomposition(m)
            assert rep.passed, f"seed {seed}: deviation {rep.max_deviation}"

    def test_bijection_all_three_equal_ln_alphabet(self):
        rep = mi.verify_mi_decomposition(bijection_model(4))
        for val in (rep.mutual_information, rep.via_latent_prediction, rep.via_output_prediction):
            npt.assert_allclose(val, math.log(4), atol=1e-12)

    def test_constant_latent_all_three_zero(self):
        m = mi.DiscreteJointModel(
            px=np.full(4, 0.25),
            f=[np.zeros(4, dtype=np.int64)],
            g=[np.arange(4)],
            nz=4,
            ny=4,
        )
        rep = mi.verify_mi_decomposition(m)
        for val in (rep.mutual_information, rep.via_latent_prediction, rep.via_output_prediction):
            npt.assert_allclose(val, 0.0, atol=1e-12)

    def test_property_100_seeds_with_varied_shapes(self):
        rng = np.random.default_rng(99)
        for trial in range(100):
            m = mi.random_model(
                int(rng.integers(0, 1 << 31)),
                nx=int(rng.integers(2, 10)),
                nz=int(rng.integers(2, 9)),
                ny=int(rng.integers(2, 9)),
                positions=int(rng.integers(1, 4)),
            )
            rep = mi.verify_mi_decomposition(m)
            assert rep.passed, f"trial {trial}: deviation {rep.max_deviation}"

    def test_data_processing_bound(self):
        for seed in range(30):
            m = mi.random_model(seed, nx=8, nz=5, ny=5, positions=2)
            hz, hy = mi.latent_entropies(m)
            i = mi.exact_mutual_information(m)
            assert i <= min(hz, hy) + 1e-12


class TestCollapseCounterexample:
    def test_stock_instance_numbers(self):
        rep = mi.collapse_counterexample()
        assert rep.collapsed_cross_entropy == 0.0
        assert rep.collapsed_mutual_information == 0.0
        npt.assert_allclose(rep.identity_mutual_information, math.log(4), atol=1e-12)
        npt.assert_allclose(rep.identity_cross_entropy, math.log(4), atol=1e-12)

    def test_ordering_gap_exceeds_half_nat(self):
        rep = mi.collapse_counterexample()
        assert rep.identity_mutual_information - rep.collapsed_mutual_information > 0.5

    def test_ordering_for_every_nondegenerate_source(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            px = rng.random(4) + 0.05
            px /= px.sum()
            rep = mi.collapse_counterexample(px)
            assert rep.ordering_holds
            assert rep.collapsed_cross_entropy <= rep.identity_cross_entropy

    def test_degenerate_source_has_no_gap(self):
        rep = mi.collapse_counterexample(np.array([1.0, 0.0, 0.0, 0.0]))
        assert rep.identity_mutual_information == 0.0  # H(x) = 0: nothing to learn


class TestRunVerification:
    def test_cli_style_run_passes(self):
        result = mi.run_verification(seeds=100, alphabet=8, positions=2)
        assert result["passed"]
        assert result["worst_deviation"] <= 1e-9
        assert result["failures"] == []
