"""Update-level differential privacy: norm clipping plus Laplace noise.

The transmitted object (full weights or delta, whichever the client sends)
is clipped to an l1 ball of radius ``clip_norm`` and perturbed with
coordinate-wise Laplace noise of scale ``clip_norm / epsilon``.  With the
l1 clip this is the standard Laplace mechanism per round; l2 clipping is
accepted for experimentation but weakens the formal guarantee.

``epsilon = inf`` disables noise and ``clip_norm = inf`` disables clipping;
both together make the pipeline a bit-exact no-op.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NotClipped
from .params import ParameterSet, norms

CLIP_SLACK = 1e-9


@dataclass(frozen=True)
class PrivacyConfig:
    enabled: bool = False
    epsilon: float = math.inf
    clip_norm: float = math.inf
    clip_kind: str = "l1"  # l1 | l2

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.clip_kind not in ("l1", "l2"):
            raise ConfigError(f"clip_kind must be l1 or l2, got {self.clip_kind!r}")
        if self.enabled and math.isfinite(self.epsilon) and not math.isfinite(self.clip_norm):
            raise ConfigError("finite epsilon requires a finite clip_norm")

    @property
    def noise_scale(self) -> float:
        return 0.0 if math.isinf(self.epsilon) else self.clip_norm / self.epsilon


def _norm(p: ParameterSet, kind: str) -> float:
    l1, l2, _ = norms(p)
    return l1 if kind == "l1" else l2


def clip(p: ParameterSet, clip_norm: float, kind: str = "l1") -> ParameterSet:
    """Scale ``p`` onto the norm ball of radius ``clip_norm`` if it lies outside.

    Inside the ball the input is returned unchanged (same object, bit-exact).
    """
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    n = _norm(p, kind)
    if n <= clip_norm:
        return p
    scale = clip_norm / n
    return p.map(lambda name, a: a * a.dtype.type(scale))


def perturb(p: ParameterSet, cfg: PrivacyConfig, rng: np.random.Generator) -> ParameterSet:
    """Add iid Laplace(0, clip_norm/epsilon) to every coordinate.

    Requires the input to be inside the clip ball already; raises
    :class:`NotClipped` otherwise.  ``epsilon = inf`` returns the input
    unchanged without consuming random numbers.
    """
    if math.isinf(cfg.epsilon):
        return p
    n = _norm(p, cfg.clip_kind)
    if n > cfg.clip_norm * (1.0 + CLIP_SLACK):
        raise NotClipped(
            f"{cfg.clip_kind} norm {n:.6g} exceeds clip bound {cfg.clip_norm:.6g}"
        )
    b = cfg.noise_scale
    return p.map(lambda name, a: a + rng.laplace(0.0, b, a.shape).astype(a.dtype))


def apply_privacy(p: ParameterSet, cfg: PrivacyConfig, rng: np.random.Generator) -> ParameterSet:
    """Clip-then-perturb pipeline; identity when the config is disabled."""
    if not cfg.enabled:
        return p
    return perturb(clip(p, cfg.clip_norm, cfg.clip_kind), cfg, rng)
