"""Self-supervised pretraining loop.

Each epoch reshuffles the unlabeled set; each minibatch re-initializes the
instance classifier, runs K discrimination passes over freshly augmented
copies, then one feature-clustering update on the same K*n images; the
epoch ends with an exponential moving average of the encoder parameters.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import augment as aug
from .clustering import ScheduleConfig, dwv_loss, linear_schedule
from .data import Dataset
from .discrimination import (BIDConfig, ClassifierHead, assign_batch_instance_labels,
                             instance_cross_entropy, reinit_head)
from .encoder import build_encoder
from .errors import ConfigurationError, InputError, NumericError

FORMAT_VERSION = 1

Observer = Callable[[dict], None]


def scaled_lr(batch_size: int) -> float:
    """Linear learning-rate scaling: 0.3 * batch_size / 512."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    return 0.3 * batch_size / 512.0


def ema_update(theta_prev: dict, theta_curr: dict, m: float) -> dict:
    """Elementwise m * theta_prev + (1 - m) * theta_curr.

    m=0 returns copies of the current parameters, m=1 copies of the previous
    ones (bit-exact in both cases).
    """
    if not 0.0 <= m <= 1.0:
        raise ConfigurationError(f"momentum must be in [0, 1], got {m}")
    if theta_prev.keys() != theta_curr.keys():
        raise InputError("parameter sets have different names")
    out = {}
    for name, prev in theta_prev.items():
        curr = theta_curr[name]
        if prev.shape != curr.shape:
            raise InputError(f"shape mismatch for {name}: {tuple(prev.shape)} vs {tuple(curr.shape)}")
        if m == 0.0:
            out[name] = curr.clone()
        elif m == 1.0:
            out[name] = prev.clone()
        else:
            out[name] = m * prev + (1.0 - m) * curr
    return out


@dataclass
class PretrainConfig:
    bid: BIDConfig = field(default_factory=BIDConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    epochs: int = 300
    momentum: float = 0.999
    seed: int = 10
    encoder: str = "small"
    embedding_dim: int = 128
    ce_step_mode: str = "per_pass"      # or "aggregated": one step on the K-pass mean
    dwv_dim_reduce: str = "mean"        # or "sum": keep per-embedding squared norms
    stop_mean_gradient: bool = False
    ema_mode: str = "shadow"            # or "literal": blend the live weights each epoch

    def validate(self) -> None:
        self.bid.validate()
        self.schedule.validate()
        self.augment.validate()
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.ce_step_mode not in ("per_pass", "aggregated"):
            raise ConfigurationError(f"ce_step_mode must be 'per_pass' or 'aggregated', got {self.ce_step_mode!r}")
        if self.dwv_dim_reduce not in ("mean", "sum"):
            raise ConfigurationError(f"dwv_dim_reduce must be 'mean' or 'sum', got {self.dwv_dim_reduce!r}")
        if self.ema_mode not in ("shadow", "literal"):
            raise ConfigurationError(f"ema_mode must be 'shadow' or 'literal', got {self.ema_mode!r}")
        if self.embedding_dim < 1:
            raise ConfigurationError(f"embedding_dim must be >= 1, got {self.embedding_dim}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augment"]["enabled"] = sorted(self.augment.enabled)
        d["augment"]["crop_scale"] = list(self.augment.crop_scale)
        d["augment"]["blur_radius"] = list(self.augment.blur_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["bid"] = BIDConfig(**d.get("bid", {}))
        d["schedule"] = ScheduleConfig(**d.get("schedule", {}))
        d["augment"] = aug.AugmentConfig(**d.get("augment", {}))
        return cls(**d)


def params_digest(params: dict) -> str:
    """SHA-256 over sorted parameter names and their raw little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """Encoder parameters plus the configuration and trace that produced them."""

    params: dict[str, np.ndarray]
    config: dict
    epoch: int
    rng_digest: str
    ema_params: dict[str, np.ndarray] | None = None
    trace: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        path = Path(path)
        meta = {
            "format_version": FORMAT_VERSION,
            "kind": "bidfc-checkpoint",
            "epoch": self.epoch,
            "config": self.config,
            "rng_digest": self.rng_digest,
            "trace": self.trace,
            "params": [{"name": k, "shape": list(v.shape), "dtype": "<f4"} for k, v in self.params.items()],
            "ema_params": ([{"name": k, "shape": list(v.shape), "dtype": "<f4"} for k, v in self.ema_params.items()]
                           if self.ema_params is not None else None),
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=1))
            for group, params in (("params", self.params), ("ema", self.ema_params or {})):
                for name, arr in params.items():
                    buf = io.BytesIO()
                    np.save(buf, np.ascontiguousarray(arr, dtype="<f4"))
                    zf.writestr(f"{group}/{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"checkpoint not found: {path}")
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("kind") != "bidfc-checkpoint":
                raise InputError(f"not a checkpoint archive: {path}")

            def read_group(group, manifest):
                if manifest is None:
                    return None
                out = {}
                for entry in manifest:
                    arr = np.load(io.BytesIO(zf.read(f"{group}/{entry['name']}.npy")))
                    if list(arr.shape) != entry["shape"]:
                        raise InputError(f"shape mismatch for {entry['name']} in {path}")
                    out[entry["name"]] = arr
                return out

            params = read_group("params", meta["params"])
            ema_params = read_group("ema", meta.get("ema_params"))
        return cls(params=params, config=meta["config"], epoch=meta["epoch"],
                   rng_digest=meta["rng_digest"], ema_params=ema_params,
                   trace=meta.get("trace", []))

    def to_model(self, prefer_ema: bool = True) -> torch.nn.Module:
        """Rebuild the encoder; EMA weights are used when present."""
        model = build_encoder(self.config["encoder"], self.config["embedding_dim"])
        source = self.ema_params if (prefer_ema and self.ema_params is not None) else self.params
        state = {k: torch.from_numpy(np.ascontiguousarray(v)).float() for k, v in source.items()}
        model.load_state_dict(state)
        model.eval()
        return model

    def digest(self, prefer_ema: bool = True) -> str:
        source = self.ema_params if (prefer_ema and self.ema_params is not None) else self.params
        return params_digest(source)


def _augmented_batch(ds: Dataset, indices, k: int, cfg: aug.AugmentConfig,
                     seed: int, epoch: int) -> torch.Tensor:
    """Stack of K augmented copies, shape (K, n, 1, S, S), float32.

    Each (sample, pass) pair owns an independent rng stream derived from
    (seed, epoch, dataset index, pass), so augmentation order or parallelism
    cannot change the draws.
    """
    size = cfg.out_size
    out = np.empty((k, len(indices), 1, size, size), dtype=np.float32)
    for pos, gi in enumerate(indices):
        img = ds.items[int(gi)].image
        for pass_idx in range(k):
            rng = np.random.default_rng(np.random.SeedSequence((seed, epoch, int(gi), pass_idx)))
            out[pass_idx, pos, 0] = aug.apply_pipeline(img, cfg, rng)
    return torch.from_numpy(out)


def _check_finite(value: float, what: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} (value {value}) at epoch {epoch}, batch {batch}")


def pretrain(unlabeled: Dataset, cfg: PretrainConfig, observer: Observer | None = None) -> Checkpoint:
    """Run the full pretraining schedule and return the final checkpoint.

    The observer, when given, receives structured events (head_reinit,
    batch_start, bid_pass, fc_stage, epoch_end) for instrumentation.
    """
    cfg.validate()
    unlabeled.validate()
    notify = observer or (lambda event: None)

    torch.manual_seed(cfg.seed)
    model = build_encoder(cfg.encoder, cfg.embedding_dim)
    head = ClassifierHead(cfg.embedding_dim, cfg.bid.batch_size)
    head_gen = torch.Generator().manual_seed(cfg.seed + 1)

    lr = scaled_lr(cfg.bid.batch_size)
    opt_model = torch.optim.Adam(model.parameters(), lr=lr)
    opt_head = torch.optim.Adam(head.parameters(), lr=lr)

    shadow = None
    if cfg.ema_mode == "shadow":
        shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    trace: list[dict] = []
    n_total = len(unlabeled)
    model.train()
    for epoch in range(cfg.epochs):
        weight = linear_schedule(epoch, cfg.schedule)
        notify({"kind": "epoch_start", "epoch": epoch, "weight": weight})
        order = np.random.default_rng(cfg.seed ^ epoch).permutation(n_total)
        epoch_start = None
        if cfg.ema_mode == "literal":
            epoch_start = {k: v.detach().clone() for k, v in model.state_dict().items()}

        ce_values: list[float] = []
        dwv_values: list[float] = []
        for b in range(0, n_total, cfg.bid.batch_size):
            batch_idx = b // cfg.bid.batch_size
            indices = order[b:b + cfg.bid.batch_size]
            n = len(indices)
            labels = assign_batch_instance_labels(n)

            reinit_head(head, head_gen)
            opt_head = torch.optim.Adam(head.parameters(), lr=lr)  # fresh state after reinit
            notify({"kind": "head_reinit", "epoch": epoch, "batch": batch_idx})
            notify({"kind": "batch_start", "epoch": epoch, "batch": batch_idx,
                    "sample_indices": [int(i) for i in indices],
                    "labels": labels.tolist()})

            batch = _augmented_batch(unlabeled, indices, cfg.bid.k, cfg.augment, cfg.seed, epoch)

            if cfg.ce_step_mode == "per_pass":
                for pass_idx in range(cfg.bid.k):
                    v = model(batch[pass_idx])
                    loss = instance_cross_entropy(v, head, labels, cfg.bid.temperature)
                    opt_model.zero_grad(set_to_none=True)
                    opt_head.zero_grad(set_to_none=True)
                    loss.backward()
                    opt_model.step()
                    opt_head.step()
                    value = float(loss.detach())
                    _check_finite(value, "cross-entropy loss", epoch, batch_idx)
                    ce_values.append(value)
                    notify({"kind": "bid_pass", "epoch": epoch, "batch": batch_idx,
                            "k": pass_idx, "loss": value})
            else:
                pass_losses = []
                for pass_idx in range(cfg.bid.k):
                    v = model(batch[pass_idx])
                    pass_losses.append(instance_cross_entropy(v, head, labels, cfg.bid.temperature))
                    value = float(pass_losses[-1].detach())
                    _check_finite(value, "cross-entropy loss", epoch, batch_idx)
                    ce_values.append(value)
                    notify({"kind": "bid_pass", "epoch": epoch, "batch": batch_idx,
                            "k": pass_idx, "loss": value})
                loss = torch.stack(pass_losses).mean()
                opt_model.zero_grad(set_to_none=True)
                opt_head.zero_grad(set_to_none=True)
                loss.backward()
                opt_model.step()
                opt_head.step()

            # clustering stage: re-encode all K*n copies with the updated encoder
            stepped = weight > 0.0
            if stepped:
                k, _, _, s1, s2 = batch.shape
                z = model(batch.reshape(k * n, 1, s1, s2)).reshape(k, n, -1).permute(1, 0, 2)
                loss_fc = dwv_loss(z, weight, cfg.dwv_dim_reduce, cfg.stop_mean_gradient)
                opt_model.zero_grad(set_to_none=True)
                loss_fc.backward()
                opt_model.step()
                fc_value = float(loss_fc.detach())
                _check_finite(fc_value, "clustering loss", epoch, batch_idx)
            else:
                fc_value = 0.0
            dwv_values.append(fc_value)
            notify({"kind": "fc_stage", "epoch": epoch, "batch": batch_idx,
                    "weight": weight, "loss": fc_value, "stepped": stepped})

        if cfg.ema_mode == "literal":
            blended = ema_update(epoch_start, dict(model.state_dict()), cfg.momentum)
            model.load_state_dict(blended)
        else:
            shadow = ema_update(shadow, dict(model.state_dict()), cfg.momentum)

        record = {"epoch": epoch,
                  "mean_ce": float(np.mean(ce_values)),
                  "mean_dwv": float(np.mean(dwv_values)),
                  "weight": weight}
        trace.append(record)
        notify({"kind": "epoch_end", **record})

    rng_digest = hashlib.sha256(
        torch.get_rng_state().numpy().tobytes() + head_gen.get_state().numpy().tobytes()
    ).hexdigest()
    to_numpy = lambda sd: {k: v.detach().cpu().numpy().astype("<f4") for k, v in sd.items()}
    return Checkpoint(
        params=to_numpy(dict(model.state_dict())),
        config=cfg.to_dict(),
        epoch=cfg.epochs,
        rng_digest=rng_digest,
        ema_params=to_numpy(shadow) if shadow is not None else None,
        trace=trace,
    )


def write_trace_csv(path, trace: list[dict]) -> None:
    """Loss trace CSV: epoch, mean_ce, mean_dwv, weight."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_ce", "mean_dwv", "weight"])
        for row in trace:
            writer.writerow([row["epoch"], repr(row["mean_ce"]), repr(row["mean_dwv"]), repr(row["weight"])])
