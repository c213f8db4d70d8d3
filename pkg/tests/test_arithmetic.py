import numpy as np
import pytest

from xferlab.arithmetic import (TransferConfig, UndefinedSimilarityError, analogy, apply,
                                compensated_sum, cosine_similarity, explainability_vector,
                                task_vector, transfer, two_sum)
from xferlab.model import CompatibilityError, ModelConfig, init_parameters
from xferlab.numerics import ContractError

CFG = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=1, num_heads=2,
                  mlp_ratio=2, seed=0)


def perturb(theta, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    # mixed magnitudes make naive summation lose bits
    noise = scale * rng.normal(size=theta.size) * 10.0 ** rng.integers(-6, 3, size=theta.size)
    return theta.with_values(theta.values + noise)


@pytest.fixture(scope="module")
def family():
    base = init_parameters(CFG)
    s_ft, t_ft = perturb(base, 1), perturb(base, 2)
    s_star, t_star = perturb(s_ft, 3, 0.01), perturb(t_ft, 4, 0.01)
    return base, s_ft, s_star, t_ft, t_star


def test_two_sum_is_exact():
    a, b = np.array([1.0, 1e16]), np.array([1e-16, 1.0])
    s, e = two_sum(a, b)
    assert s[0] == 1.0 and e[0] == 1e-16
    assert s[1] == 1e16 and e[1] == 1.0


def test_compensated_sum_beats_naive():
    parts = [np.array([1.0]), np.array([1e-16]), np.array([1e-16]), np.array([-1.0])]
    hi, lo = compensated_sum(parts)
    assert hi[0] + lo[0] == 2e-16


def test_task_vector_zero_and_round_trip(family):
    base, s_ft, *_ = family
    assert not task_vector(base, base).values.any()
    tau = task_vector(s_ft, base)
    assert apply(base, [(1.0, tau)]).values.tobytes() == s_ft.values.tobytes()
    assert apply(base, []).values.tobytes() == base.values.tobytes()


def test_norm_is_checkpoint_distance(family):
    base, s_ft, *_ = family
    tau = task_vector(s_ft, base)
    assert tau.norm() == pytest.approx(np.linalg.norm(s_ft.values - base.values), rel=1e-12)


def test_additive_inverse(family):
    base, s_ft, *_ = family
    tau = task_vector(s_ft, base)
    back = apply(base, [(1.0, tau), (-1.0, tau)])
    assert back.values.tobytes() == base.values.tobytes()


def test_apply_order_independent(family):
    base, s_ft, _, t_ft, _ = family
    a, b = task_vector(s_ft, base), task_vector(t_ft, base)
    x = apply(base, [(0.3, a), (0.7, b)])
    y = apply(base, [(0.7, b), (0.3, a)])
    assert x.values.tobytes() == y.values.tobytes()


def test_explainability_vector_telescopes(family):
    base, s_ft, s_star, *_ = family
    assert not explainability_vector(s_ft, s_ft).values.any()
    tau_star = explainability_vector(s_star, s_ft)
    # tau_ft* - tau_ft = tau_* : both sides rebuild theta_ft* exactly
    lhs = apply(base, [(1.0, task_vector(s_ft, base)), (1.0, tau_star)])
    assert lhs.values.tobytes() == s_star.values.tobytes()
    assert tau_star.base_id == s_ft.content_fingerprint
    assert tau_star.finetuned_id == s_star.content_fingerprint
    assert tau_star.delta == "ft*-ft"
    with pytest.raises(ContractError):
        explainability_vector(s_star, s_ft, roles=("ft", "ft*"))


def test_analogy_examples(family):
    base, s_ft, s_star, t_ft, _ = family
    a, c = task_vector(s_ft, base), task_vector(t_ft, base)
    assert analogy(c, a, a).values.tobytes() == c.values.tobytes()
    same = analogy(c, c, a)
    assert apply(base, [(1.0, same)]).values.tobytes() == s_ft.values.tobytes()


def test_analogy_matches_two_term_apply(family):
    base, s_ft, s_star, t_ft, _ = family
    tau_t, tau_s = task_vector(t_ft, base), task_vector(s_ft, base)
    tau_s_ftstar = task_vector(s_star, base)
    lhs = apply(base, [(1.0, analogy(tau_t, tau_s, tau_s_ftstar))]).values
    rhs = apply(base, [(1.0, tau_t), (1.0, explainability_vector(s_star, s_ft))]).values
    ulp = np.spacing(np.abs(rhs))
    assert np.all(np.abs(lhs - rhs) <= ulp)


def test_transfer_boundaries(family):
    base, s_ft, s_star, t_ft, t_star = family
    tau_t = task_vector(t_ft, base)
    tau_s = explainability_vector(s_star, s_ft)
    assert transfer(base, tau_t, tau_s, TransferConfig(1.0, 0.0)).values.tobytes() == t_ft.values.tobytes()
    assert transfer(base, tau_t, tau_s, TransferConfig(0.0, 0.0)).values.tobytes() == base.values.tobytes()
    self_star = explainability_vector(t_star, t_ft)
    assert transfer(base, tau_t, self_star, TransferConfig(1.0, 1.0)).values.tobytes() == \
        t_star.values.tobytes()


def test_transfer_formula(family):
    base, s_ft, s_star, t_ft, _ = family
    tau_t, tau_s = task_vector(t_ft, base), explainability_vector(s_star, s_ft)
    got = transfer(base, tau_t, tau_s, TransferConfig(1.0, 0.6)).values
    want = base.values + (t_ft.values - base.values) + 0.6 * (s_star.values - s_ft.values)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_transfer_requires_explainability_vector(family):
    base, s_ft, _, t_ft, _ = family
    tau_t = task_vector(t_ft, base)
    with pytest.raises(ContractError):
        transfer(base, tau_t, task_vector(s_ft, base))
    with pytest.raises(ValueError):
        TransferConfig(1.0, float("nan"))


def test_fingerprint_gating(family):
    base, s_ft, *_ = family
    other = init_parameters(ModelConfig(image_size=8, patch_size=4, embed_dim=12, num_layers=1,
                                        num_heads=2, mlp_ratio=2))
    with pytest.raises(CompatibilityError):
        task_vector(other, base)
    tau_other = task_vector(other, other)
    tau = task_vector(s_ft, base)
    with pytest.raises(CompatibilityError):
        apply(base, [(1.0, tau_other)])
    with pytest.raises(CompatibilityError):
        cosine_similarity(tau, tau_other)
    with pytest.raises(CompatibilityError):
        analogy(tau, tau, tau_other)


def test_cosine_properties(family):
    base, s_ft, _, t_ft, _ = family
    a, b = task_vector(s_ft, base), task_vector(t_ft, base)
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(a, a.scaled(-1.0)) == pytest.approx(-1.0, abs=1e-12)
    assert cosine_similarity(a, a.scaled(3.0)) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert cosine_similarity(a.scaled(2.5), b) == pytest.approx(cosine_similarity(a, b), abs=1e-12)
    want = a.values @ b.values / (np.linalg.norm(a.values) * np.linalg.norm(b.values))
    assert cosine_similarity(a, b) == pytest.approx(want, abs=1e-12)


def test_cosine_of_zero_vector_is_undefined(family):
    base, s_ft, *_ = family
    with pytest.raises(UndefinedSimilarityError):
        cosine_similarity(task_vector(base, base), task_vector(s_ft, base))
