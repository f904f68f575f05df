"""Joint cross-sensor training.

Every step draws one homogeneous minibatch through the two-stage bucket
sampler, fuses it, and minimizes ``L1 + lambda * (1 - SSIM)`` with AdamW
under a cosine learning-rate schedule.  A single parameter set serves all
buckets; MK slabs beyond the batch's band count receive no gradient and are
left bitwise untouched by the optimizer, weight decay included.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetBucket, sample_minibatch, stack_batch
from .errors import ConfigurationError, NumericError
from .metrics import total_loss
from .model import FusionModel, ModelConfig, fuse
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainResult",
    "cosine_lr",
    "optimizer_step",
    "probe_l1",
    "train",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "bucket_id", "loss", "l1", "ssim_loss", "lr")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr_start: float = 2e-4
    lr_min: float = 1e-5
    lam_ssim: float = 0.1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    enc_spe_depth: int = 2
    enc_spa_depth: int = 2
    d_feat: int = 64
    c_max: int = 40
    hidden: int = 256
    hidden_layers: int = 4
    checkpoint_every: int = 500
    probe_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError(f"need steps >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}")
        if not 0 <= self.lr_min <= self.lr_start:
            raise ConfigurationError(f"need 0 <= lr_min <= lr_start, got {self.lr_min}, {self.lr_start}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.weight_decay < 0 or self.lam_ssim < 0:
            raise ConfigurationError("eps must be positive; weight_decay and lam_ssim non-negative")
        if self.checkpoint_every < 0 or self.probe_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 0 and probe_every >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_feat=self.d_feat, c_max=self.c_max, hidden=self.hidden,
                           hidden_layers=self.hidden_layers, enc_spe_depth=self.enc_spe_depth,
                           enc_spa_depth=self.enc_spa_depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def cosine_lr(step: int, total: int, lr_start: float, lr_min: float) -> float:
    if total < 1 or not 0 <= step <= total:
        raise ConfigurationError(f"need 0 <= step <= total and total >= 1, got step={step}, total={total}")
    return lr_min + 0.5 * (lr_start - lr_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()}, 0)


def _update_mask(t: Tensor) -> np.ndarray | None | bool:
    """``False`` to skip the parameter, ``None`` for a dense update, or an element mask."""
    if t.grad is None:
        return False
    if t.grad_mask is not None:
        return t.grad_mask if t.grad_mask.any() else False
    return None if np.any(t.grad) else False


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> list[str]:
    """One AdamW update from each parameter's ``.grad``; returns the names updated.

    Decay multiplies the parameter by ``1 - lr * weight_decay`` before the
    moment step.  Parameters without a gradient, or elements outside the
    gradient's mask, keep their values and moments.
    """
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            bad = int(np.size(t.grad) - np.count_nonzero(np.isfinite(t.grad)))
            raise NumericError(f"non-finite gradient in parameter {name!r} ({bad} entries); step aborted")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    updated = []
    for name, t in params.items():
        mask = _update_mask(t)
        if mask is False:
            continue
        g = t.grad.astype(t.data.dtype, copy=False)
        m, v, p = state.m[name], state.v[name], t.data
        dt = p.dtype.type
        m_new = dt(beta1) * m + dt(1 - beta1) * g
        v_new = dt(beta2) * v + dt(1 - beta2) * g * g
        step = dt(lr) * (m_new / dt(bc1)) / (np.sqrt(v_new / dt(bc2)) + dt(eps))
        p_new = p * dt(1 - lr * weight_decay) - step
        if mask is None:
            m[...], v[...], p[...] = m_new, v_new, p_new
        else:
            m[mask], v[mask], p[mask] = m_new[mask], v_new[mask], p_new[mask]
        updated.append(name)
    return updated


# --- loop ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FusionModel
    state: OptimizerState
    log_rows: list[dict]
    probe: list[tuple[int, float]]
    checkpoints: list[Path]


def _probe_batches(buckets: Sequence[DatasetBucket], batch_size: int):
    return [stack_batch(b.samples[:batch_size]) for b in buckets]


def probe_l1(model: FusionModel, batches) -> float:
    """Mean L1 of the model over fixed probe batches (no tape)."""
    vals = []
    for y, z, x in batches:
        out = fuse(model, y, z).data
        vals.append(float(np.mean(np.abs(out.astype(np.float64) - x))))
    return float(np.mean(vals))


def _check_buckets(buckets: Sequence[DatasetBucket], c_max: int) -> None:
    if not buckets:
        raise ConfigurationError("train needs at least one bucket")
    for b in buckets:
        if b.band_count + b.msi_bands > c_max:
            raise ConfigurationError(
                f"bucket {b.dataset_id!r}: C + c = {b.band_count + b.msi_bands} exceeds c_max={c_max}"
            )


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["step"]) <= upto]


def _write_probe(path: Path, probe: list[tuple[int, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("step,probe_l1\n")
        for s, v in probe:
            fh.write(f"{s},{v!r}\n")


def train(config: TrainConfig, buckets: Sequence[DatasetBucket], out_dir=None, resume=None,
          stop_after: int | None = None, on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run (or resume) training; fully deterministic given ``config.seed`` and the corpus.

    ``out_dir`` receives ``train_log.csv``, ``probe.csv`` and checkpoints
    ``ckpt_<step>.ssa`` every ``checkpoint_every`` steps plus ``final.ssa``.
    ``resume`` is a checkpoint path; the sampler RNG, optimizer moments and
    step counters are restored so the continued run matches an unbroken one
    bitwise.  ``stop_after`` ends the run early at that step (the cosine
    schedule still spans ``config.steps``).
    """
    _check_buckets(buckets, config.c_max)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([config.seed, 1])
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model.config != config.model_config():
            raise ConfigurationError(f"checkpoint model config {ck.model.config} does not match the run")
        model = ck.model
        params = model.parameters()
        state = OptimizerState(ck.moments.get("m", {}), ck.moments.get("v", {}), ck.optimizer_step)
        for name, t in params.items():
            state.m.setdefault(name, np.zeros_like(t.data))
            state.v.setdefault(name, np.zeros_like(t.data))
        rng.bit_generator.state = ck.rng_state
        start = ck.train_step
        probe = [(int(s), float(v)) for s, v in ck.extra.get("probe", [])]
        rows = _read_log(out / "train_log.csv", start) if out is not None else []
    else:
        model = FusionModel(config.model_config(), rng=np.random.default_rng([config.seed, 0]))
        params = model.parameters()
        state = OptimizerState.for_params(params)
        start, probe, rows = 0, [], []

    probes = _probe_batches(buckets, config.batch_size)
    checkpoints: list[Path] = []
    end = config.steps if stop_after is None else min(stop_after, config.steps)

    def checkpoint(step: int, name: str) -> Path:
        path = out / name
        save_checkpoint(path, model, {"m": state.m, "v": state.v}, state.step, step,
                        rng.bit_generator.state, {"train_config": config.to_dict(), "probe": probe})
        checkpoints.append(path)
        return path

    if start == 0:
        probe.append((0, probe_l1(model, probes)))

    for step in range(start + 1, end + 1):
        batch = sample_minibatch(buckets, rng, config.batch_size)
        y, z, x = stack_batch(batch)
        lr = cosine_lr(step - 1, max(config.steps, 1), config.lr_start, config.lr_min)
        model.zero_grad()
        with Tape() as tape:
            pred = fuse(model, y, z)
            loss, l1, ssim_loss = total_loss(pred, x, config.lam_ssim, peak=1.0, parts=True)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at step {step} (bucket {batch[0].dataset_id!r})")
            tape.backward(loss)
        optimizer_step(params, state, lr, config.beta1, config.beta2, config.eps, config.weight_decay)
        row = {"step": step, "bucket_id": batch[0].dataset_id, "loss": repr(float(loss.data)),
               "l1": repr(float(l1.data)), "ssim_loss": repr(float(ssim_loss.data)), "lr": repr(lr)}
        rows.append(row)
        if step % config.probe_every == 0:
            probe.append((step, probe_l1(model, probes)))
            log.info("step %d probe L1 %.6f", step, probe[-1][1])
        if on_step is not None:
            on_step(step, row)
        if out is not None:
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                checkpoint(step, f"ckpt_{step:06d}.ssa")
                _write_log(out / "train_log.csv", rows)

    if out is not None:
        checkpoint(end, "final.ssa")
        _write_log(out / "train_log.csv", rows)
        _write_probe(out / "probe.csv", probe)
    return TrainResult(model, state, rows, probe, checkpoints)
