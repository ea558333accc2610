"""Fixed, shared and sampling fusion of the spectral and semantic features.

All functions take batched features of shape (N, d). The fused vector always
puts the spectral half first.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoders import linear_count, linear_params
from .errors import ConfigError, DimensionError, ParameterError
from .tensor import Tensor

STRATEGIES = ("fixed", "shared", "sampling")


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = "sampling"
    d: int = 128
    tau1: float = 1.0
    tau2: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"fusion.strategy: unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.d < 1:
            raise ConfigError(f"fusion.d: must be >= 1, got {self.d}")
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ParameterError(f"fusion temperatures must be positive, got tau1={self.tau1}, tau2={self.tau2}")

    @property
    def out_dim(self) -> int:
        return 4 * self.d if self.strategy == "sampling" else 2 * self.d

    def param_count(self) -> int:
        if self.strategy == "fixed":
            return 0
        if self.strategy == "shared":
            return 2 * linear_count(self.d, self.d)
        return 4 * linear_count(self.d, 2 * self.d)

    def to_dict(self) -> dict:
        return asdict(self)


def init_fusion_params(cfg: FusionConfig, rng: np.random.Generator, prefix: str = "fusion") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    if cfg.strategy == "shared":
        # gate_sem reads f_spe, gate_spe reads f_sem
        for name in ("gate_sem", "gate_spe"):
            params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"] = linear_params(rng, cfg.d, cfg.d)
    elif cfg.strategy == "sampling":
        for name in ("mod_sem", "mod_spe", "logit_sem", "logit_spe"):
            params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"] = linear_params(rng, cfg.d, 2 * cfg.d)
    return params


def _check_pair(f_spe: Tensor, f_sem: Tensor):
    if f_spe.shape != f_sem.shape or f_spe.values.ndim != 2:
        raise DimensionError(f"fusion needs two (N, d) features of equal shape, got {f_spe.shape} and {f_sem.shape}")


def _lin(x: Tensor, params, prefix: str, name: str) -> Tensor:
    return T.linear(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])


def fuse_fixed(f_spe: Tensor, f_sem: Tensor) -> Tensor:
    _check_pair(f_spe, f_sem)
    return T.concat(f_spe, f_sem)


def fuse_shared(f_spe: Tensor, f_sem: Tensor, params, prefix: str = "fusion") -> Tensor:
    _check_pair(f_spe, f_sem)
    w_sem = T.sigmoid(_lin(f_spe, params, prefix, "gate_sem"))
    w_spe = T.sigmoid(_lin(f_sem, params, prefix, "gate_spe"))
    return T.concat(T.mul(f_spe, w_spe), T.mul(f_sem, w_sem))


def pairwise_gumbel(logits: Tensor, tau: float, rng=None, noise=None) -> Tensor:
    """Gumbel-Softmax over consecutive pairs of a (N, 2d) tensor, flattened back to (N, 2d)."""
    n, width = logits.shape
    pairs = T.reshape(logits, (n, width // 2, 2))
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64).reshape(n, width // 2, 2)
    return T.reshape(T.gumbel_softmax(pairs, tau, rng=rng, noise=noise), (n, width))


def sampling_gates(f_spe: Tensor, f_sem: Tensor, params, cfg: FusionConfig, rng=None, noise=None,
                   prefix: str = "fusion") -> tuple[Tensor, Tensor]:
    """(s_spe, s_sem) relaxed keep/suppress samples, each (N, 2d)."""
    g_sem, g_spe = (None, None) if noise is None else noise
    s_sem = pairwise_gumbel(_lin(f_sem, params, prefix, "logit_sem"), cfg.tau1, rng, g_sem)
    s_spe = pairwise_gumbel(_lin(f_spe, params, prefix, "logit_spe"), cfg.tau2, rng, g_spe)
    return s_spe, s_sem


def fuse_sampling(f_spe: Tensor, f_sem: Tensor, params, cfg: FusionConfig, rng=None, noise=None,
                  prefix: str = "fusion") -> Tensor:
    """Sampling fusion; width 4d.

    ``rng`` draws fresh Gumbel noise; ``noise=(g_sem, g_spe)`` pins it; with
    neither the noise is zero (evaluation mode).
    """
    _check_pair(f_spe, f_sem)
    if not (cfg.tau1 > 0 and cfg.tau2 > 0):
        raise ParameterError(f"temperatures must be positive, got tau1={cfg.tau1}, tau2={cfg.tau2}")
    mod_sem = T.relu(_lin(f_spe, params, prefix, "mod_sem"))
    mod_spe = T.relu(_lin(f_sem, params, prefix, "mod_spe"))
    f2_sem = T.mul(T.repeat_last(f_sem, 2), mod_sem)
    f2_spe = T.mul(T.repeat_last(f_spe, 2), mod_spe)
    s_spe, s_sem = sampling_gates(f_spe, f_sem, params, cfg, rng, noise, prefix)
    return T.concat(T.mul(f2_spe, s_spe), T.mul(f2_sem, s_sem))


def fuse(f_spe: Tensor, f_sem: Tensor, params, cfg: FusionConfig, rng=None, noise=None,
         prefix: str = "fusion") -> Tensor:
    if cfg.strategy == "fixed":
        return fuse_fixed(f_spe, f_sem)
    if cfg.strategy == "shared":
        return fuse_shared(f_spe, f_sem, params, prefix)
    if cfg.strategy == "sampling":
        return fuse_sampling(f_spe, f_sem, params, cfg, rng, noise, prefix)
    raise ConfigError(f"unknown fusion strategy {cfg.strategy!r}")
