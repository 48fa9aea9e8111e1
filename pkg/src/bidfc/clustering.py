"""Feature clustering: the dynamically weighted variance of each sample's K
augmented embeddings around their mean, with a linear ramp-up weight."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, InputError


@dataclass
class ScheduleConfig:
    """Linear ramp: 0 before t1, alpha_f from t2 on, linear in between."""

    t1: int = 30
    t2: int = 150
    alpha_f: float = 1.0

    def validate(self) -> None:
        if self.t1 < 0:
            raise ConfigurationError(f"t1 must be >= 0, got {self.t1}")
        if self.t2 <= self.t1:
            raise ConfigurationError(f"t2 must be > t1, got t1={self.t1} t2={self.t2}")
        if self.alpha_f <= 0:
            raise ConfigurationError(f"alpha_f must be > 0, got {self.alpha_f}")


def linear_schedule(t: int, cfg: ScheduleConfig) -> float:
    """Clustering-loss weight at epoch t (0-based)."""
    cfg.validate()
    if t < 0:
        raise InputError(f"epoch must be >= 0, got {t}")
    if t < cfg.t1:
        return 0.0
    if t >= cfg.t2:
        return cfg.alpha_f
    return cfg.alpha_f * (t - cfg.t1) / (cfg.t2 - cfg.t1)


def dwv_loss(z: torch.Tensor, weight: float, dim_reduce: str = "mean",
             stop_mean_gradient: bool = False) -> torch.Tensor:
    """Weighted variance of each sample's K embeddings around their mean.

    ``z`` has shape (n, K, d). With dim_reduce="mean" the squared deviations
    are averaged over n*K*d so the magnitude does not grow with the embedding
    width; "sum" keeps the per-embedding squared norm (averaged over n*K
    only). Gradients flow through the mean unless ``stop_mean_gradient``.
    """
    if weight < 0:
        raise InputError(f"weight must be >= 0, got {weight}")
    if z.dim() != 3 or z.numel() == 0:
        raise InputError(f"expected a nonempty (n, K, d) tensor, got shape {tuple(z.shape)}")
    if dim_reduce not in ("mean", "sum"):
        raise ConfigurationError(f"dim_reduce must be 'mean' or 'sum', got {dim_reduce!r}")
    if not torch.isfinite(z).all():
        raise InputError("embeddings contain non-finite values")
    mu = z.mean(dim=1, keepdim=True)
    if stop_mean_gradient:
        mu = mu.detach()
    sq = (z - mu) ** 2
    if dim_reduce == "mean":
        return weight * sq.mean()
    return weight * sq.sum(dim=2).mean()
