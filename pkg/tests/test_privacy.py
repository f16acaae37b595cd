import math

import numpy as np
import pytest

from fedkit.errors import ConfigError, NotClipped
from fedkit.params import ParameterSet, norms
from fedkit.privacy import PrivacyConfig, apply_privacy, clip, perturb


def pset(vals):
    return ParameterSet([("w", np.asarray(vals, dtype=np.float64))])


def test_clip_scales_onto_ball():
    p = pset([3.0, -4.0, 5.0])  # l1 = 12
    out = clip(p, 6.0, "l1")
    l1, _, _ = norms(out)
    assert l1 <= 6.0 * (1 + 1e-9)
    np.testing.assert_allclose(out["w"], np.array([3.0, -4.0, 5.0]) * 0.5)


def test_clip_l2():
    p = pset([3.0, 4.0])  # l2 = 5
    out = clip(p, 1.0, "l2")
    _, l2, _ = norms(out)
    assert l2 == pytest.approx(1.0, rel=1e-12)


def test_clip_inside_ball_is_identity_object():
    p = pset([0.1, -0.2])
    assert clip(p, 1.0, "l1") is p


def test_perturb_infinite_epsilon_is_bit_exact_noop():
    p = pset([1.0, 2.0, 3.0])
    cfg = PrivacyConfig(enabled=True, epsilon=math.inf, clip_norm=math.inf)
    rng = np.random.default_rng(0)
    assert perturb(p, cfg, rng) is p
    # and the rng stream is untouched
    assert np.random.default_rng(0).integers(1 << 30) == rng.integers(1 << 30)


def test_perturb_requires_clipped_input():
    cfg = PrivacyConfig(enabled=True, epsilon=1.0, clip_norm=1.0)
    with pytest.raises(NotClipped):
        perturb(pset([5.0, 5.0]), cfg, np.random.default_rng(0))


def test_perturb_is_deterministic_under_seed():
    cfg = PrivacyConfig(enabled=True, epsilon=2.0, clip_norm=1.0)
    p = clip(pset([0.7, -0.4, 0.1]), 1.0)
    a = perturb(p, cfg, np.random.default_rng(42))
    b = perturb(p, cfg, np.random.default_rng(42))
    assert a == b


def test_laplace_scale_matches_analytic_mean_abs():
    # E|Laplace(0, b)| = b; Monte-Carlo over 1e5 coords must land within 5%
    cfg = PrivacyConfig(enabled=True, epsilon=2.5, clip_norm=1.0)
    b = cfg.noise_scale
    assert b == pytest.approx(0.4)
    zero = ParameterSet([("w", np.zeros(100_000))])
    noised = perturb(zero, cfg, np.random.default_rng(7))
    mean_abs = float(np.mean(np.abs(noised["w"])))
    assert abs(mean_abs - b) / b < 0.05


def test_noise_magnitude_scales_inversely_with_epsilon():
    zero = ParameterSet([("w", np.zeros(50_000))])
    sizes = []
    for eps in (10.0, 1.0, 0.1):
        cfg = PrivacyConfig(enabled=True, epsilon=eps, clip_norm=1.0)
        out = perturb(zero, cfg, np.random.default_rng(3))
        sizes.append(float(np.mean(np.abs(out["w"]))))
    assert sizes[0] < sizes[1] < sizes[2]


def test_apply_privacy_disabled_is_identity():
    p = pset([9.0, 9.0])
    assert apply_privacy(p, PrivacyConfig(enabled=False), np.random.default_rng(0)) is p


def test_apply_privacy_pipeline_clips_then_noises():
    cfg = PrivacyConfig(enabled=True, epsilon=1e12, clip_norm=1.0)
    p = pset([10.0, -10.0])
    out = apply_privacy(p, cfg, np.random.default_rng(0))
    # nearly noiseless at huge epsilon: result is the clipped vector
    np.testing.assert_allclose(out["w"], [0.5, -0.5], atol=1e-9)


def test_config_validation():
    with pytest.raises(ConfigError):
        PrivacyConfig(epsilon=0.0)
    with pytest.raises(ConfigError):
        PrivacyConfig(clip_norm=-1.0)
    with pytest.raises(ConfigError):
        PrivacyConfig(clip_kind="linf")
    with pytest.raises(ConfigError):
        PrivacyConfig(enabled=True, epsilon=1.0, clip_norm=math.inf)
    # infinite epsilon with infinite clip is allowed (fully disabled mechanism)
    PrivacyConfig(enabled=True, epsilon=math.inf, clip_norm=math.inf)
