"""Batch instance discrimination: per-batch identity labels, a bias-free
linear classifier over batch instances, and the temperature-scaled
instance cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, InputError, NumericError


@dataclass
class BIDConfig:
    """Batch instance discrimination hyperparameters.

    Defaults: K=5 augmentation passes, temperature 2.0, batch size 512.
    Note: very small K (1-3) is known to fail to converge at full scale;
    that regime is allowed but not recommended.
    """

    k: int = 5
    temperature: float = 2.0
    batch_size: int = 512

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


class ClassifierHead(nn.Module):
    """Bias-free linear layer whose row i is the weight for batch instance i."""

    def __init__(self, embedding_dim: int, max_instances: int):
        super().__init__()
        self.linear = nn.Linear(embedding_dim, max_instances, bias=False)
        reinit_head(self)

    @property
    def weight(self) -> torch.Tensor:
        return self.linear.weight

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.linear(v)


def reinit_head(head: ClassifierHead, generator: torch.Generator | None = None) -> ClassifierHead:
    """Redraw every head weight uniformly from [-1/sqrt(d), +1/sqrt(d)].

    The caller owns any optimizer state for the head and must reset it after
    a reinit.
    """
    bound = 1.0 / math.sqrt(head.linear.in_features)
    with torch.no_grad():
        head.linear.weight.uniform_(-bound, bound, generator=generator)
    return head


def assign_batch_instance_labels(batch_size: int) -> torch.Tensor:
    """Identity labeling 0..N-1 for a batch of N instances."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    return torch.arange(batch_size, dtype=torch.long)


def instance_logits(v: torch.Tensor, head: ClassifierHead, temperature: float,
                    num_instances: int) -> torch.Tensor:
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    if num_instances > head.linear.out_features:
        raise InputError(f"num_instances {num_instances} exceeds head capacity {head.linear.out_features}")
    logits = F.linear(v, head.linear.weight[:num_instances]) / temperature
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite instance logits")
    return logits


def instance_probabilities(v: torch.Tensor, head: ClassifierHead, temperature: float,
                           num_instances: int) -> torch.Tensor:
    """P(i | v) = softmax_i(w_i^T v / T) over the first ``num_instances`` rows.

    Accepts a single embedding (d,) or a batch (n, d); softmax is computed
    with max-logit subtraction.
    """
    single = v.dim() == 1
    logits = instance_logits(v.unsqueeze(0) if single else v, head, temperature, num_instances)
    probs = F.softmax(logits, dim=-1)
    return probs.squeeze(0) if single else probs


def instance_cross_entropy(embeddings: torch.Tensor, head: ClassifierHead,
                           labels: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean negative log-likelihood of each embedding's instance label.

    The candidate set is the first n head rows, where n is the number of
    embeddings (ragged final batches use a truncated head).
    """
    if embeddings.dim() != 2 or embeddings.shape[0] == 0:
        raise InputError(f"expected (n, d) embeddings, got shape {tuple(embeddings.shape)}")
    n = embeddings.shape[0]
    if labels.shape != (n,):
        raise InputError(f"labels must have shape ({n},), got {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= n:
        raise InputError(f"labels out of range [0, {n})")
    logits = instance_logits(embeddings, head, temperature, n)
    return F.cross_entropy(logits, labels)
