"""Pretraining loop: AdamW with cosine schedule, clipping, monitors, checkpoints.

A checkpoint is a directory ``step_XXXXXXXX`` holding ``model.bin``
(NYOMODL1), ``train_state.bin`` (NYOTRN1), ``stream.txt`` (NYOSTREAM v1) and
``manifest.json`` naming all three with their SHA-256. Directories are
assembled under a temporary name and renamed into place; ``latest`` is then
replaced atomically.

The metric log holds one JSON object per optimizer step. Everything in it is
deterministic except the ``wall`` field (timing).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CheckpointCorrupt, NonFiniteGradient, ShapeMismatch, TraceMissing, VocabMismatch
from .model import ModelConfig, backward, compute_loss, forward, is_bias, is_gain, load_model, save_model
from .scheduler import StreamCheckpoint, TokenBatch, rng_from_bytes, rng_state_bytes
from .tokenizer import PAD_ID

log = logging.getLogger(__name__)

TRAIN_STATE_MAGIC = b"NYOTRN1"
HISTORY_LEN = 256


@dataclass(frozen=True)
class OptimConfig:
    max_lr: float = 3.0e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    warmup_steps: int = 2000
    total_steps: int = 100_000
    final_lr_ratio: float = 0.1

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if not 0 <= self.final_lr_ratio <= 1:
            raise ValueError("final_lr_ratio must lie in [0, 1]")


def decay_exempt(name: str) -> bool:
    """Norm gains/biases and all biases skip weight decay."""
    return is_gain(name) or is_bias(name)


def cosine_lr(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to max_lr, cosine decay to final_lr_ratio * max_lr, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    p = min(1.0, (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps))
    r = cfg.final_lr_ratio
    return cfg.max_lr * (r + (1.0 - r) * 0.5 * (1.0 + math.cos(math.pi * p)))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by clip_norm/norm when the global L2 norm exceeds clip_norm."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteGradient(f"global gradient norm is {norm}")
    if norm > clip_norm:
        s = clip_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


# PCG64 state and increment, then the buffered 32-bit half-draw flag and value
RNG_RECORD = 32 + 1 + 4


def _rng_record(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    has, value = st["has_uint32"], st["uinteger"]
    bg = np.random.PCG64()
    bg.state = {**st, "has_uint32": 0, "uinteger": 0}
    return rng_state_bytes(np.random.Generator(bg)) + struct.pack("<BI", has, value)


def _rng_from_record(raw: bytes) -> np.random.Generator:
    rng = rng_from_bytes(raw[:32])
    has, value = struct.unpack("<BI", raw[32:RNG_RECORD])
    rng.bit_generator.state = {**rng.bit_generator.state, "has_uint32": has, "uinteger": value}
    return rng


@dataclass
class TrainState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN))

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], seed: int = 0) -> "TrainState":
        return cls(
            0,
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            np.random.default_rng([seed, 3]),
        )

    def save(self, path: str | PathLike) -> None:
        with open(path, "wb") as f:
            f.write(TRAIN_STATE_MAGIC)
            f.write(struct.pack("<Q", self.step))
            f.write(_rng_record(self.rng))
            f.write(struct.pack("<I", len(self.m)))
            for name in self.m:
                m = np.ascontiguousarray(self.m[name], dtype="<f8")
                v = np.ascontiguousarray(self.v[name], dtype="<f8")
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", m.size))
                f.write(m.tobytes())
                f.write(v.tobytes())
            hist = json.dumps(list(self.history), sort_keys=True).encode("utf-8")
            f.write(struct.pack("<I", len(hist)) + hist)

    @classmethod
    def load(cls, path: str | PathLike, params: dict[str, np.ndarray]) -> "TrainState":
        data = Path(path).read_bytes()
        try:
            if data[:7] != TRAIN_STATE_MAGIC:
                raise CheckpointCorrupt(f"{path}: not a train state file")
            off = 7
            (step,) = struct.unpack_from("<Q", data, off)
            rng = _rng_from_record(data[off + 8 : off + 8 + RNG_RECORD])
            off += 8 + RNG_RECORD
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            m, v = {}, {}
            for _ in range(n):
                (ln,) = struct.unpack_from("<I", data, off)
                name = data[off + 4 : off + 4 + ln].decode("utf-8")
                off += 4 + ln
                (size,) = struct.unpack_from("<Q", data, off)
                off += 8
                if name not in params or params[name].size != size:
                    raise CheckpointCorrupt(f"{path}: moment {name!r} does not match the model")
                shape = params[name].shape
                m[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).copy()
                v[name] = np.frombuffer(data, "<f8", size, off + 8 * size).reshape(shape).copy()
                off += 16 * size
            (hl,) = struct.unpack_from("<I", data, off)
            history = json.loads(data[off + 4 : off + 4 + hl].decode("utf-8"))
            if off + 4 + hl != len(data) or set(m) != set(params):
                raise CheckpointCorrupt(f"{path}: incomplete train state")
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointCorrupt(f"{path}: {exc}") from exc
        return cls(step, m, v, rng, deque(history, maxlen=HISTORY_LEN))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    cfg: OptimConfig,
) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    if set(grads) != set(params):
        raise ShapeMismatch("gradient names do not match parameters")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and not decay_exempt(name):
            p -= lr * cfg.weight_decay * p
        p -= lr * update


# monitors


@dataclass
class MonitorReport:
    step: int
    max_attention_logits: list[float]
    mean_query_norm: list[float]
    output_logit_mean: float
    rms_grad_mlp1: list[float]
    block_output_rms: list[float]
    loss: dict[str, float] = field(default_factory=dict)
    lr: float = 0.0
    grad_norm: float = 0.0
    tokens: int = 0
    tokens_per_sec: float = 0.0
    events: list[str] = field(default_factory=list)

    def finite(self) -> bool:
        vals = [self.output_logit_mean, self.grad_norm, *self.loss.values()]
        vals += self.max_attention_logits + self.mean_query_norm + self.rms_grad_mlp1 + self.block_output_rms
        return all(math.isfinite(v) for v in vals)

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "lr": self.lr,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "max_attention_logits": self.max_attention_logits,
            "mean_query_norm": self.mean_query_norm,
            "output_logit_mean": self.output_logit_mean,
            "rms_grad_mlp1": self.rms_grad_mlp1,
            "block_output_rms": self.block_output_rms,
            "tokens": self.tokens,
            "events": self.events,
            "wall": {"tokens_per_sec": self.tokens_per_sec},
        }


def collect_metrics(trace, grads: dict[str, np.ndarray], logits: np.ndarray, step: int = 0) -> MonitorReport:
    """The five stability monitors, read off the retained forward trace."""
    if trace is None:
        raise TraceMissing("monitors need the forward trace")
    n = trace.config.n_layers
    max_logits, q_norms, block_rms, grad_rms = [], [], [], []
    for layer in range(n):
        cache = trace.attn[layer]
        max_logits.append(float(np.max(np.where(cache["mask"], cache["scores"], -np.inf))))
        q_norms.append(float(np.linalg.norm(cache["qr"], axis=-1).mean()))
        out = trace.block_outputs[layer]
        block_rms.append(float(np.sqrt(np.mean(out * out))))
        g = grads[f"layers.{layer}.mlp.w1"]
        grad_rms.append(float(np.sqrt(np.mean(g * g))))
    return MonitorReport(
        step=step,
        max_attention_logits=max_logits,
        mean_query_norm=q_norms,
        output_logit_mean=float(np.mean(logits)),
        rms_grad_mlp1=grad_rms,
        block_output_rms=block_rms,
    )


# one step


def batch_to_arrays(batch: TokenBatch, pad_id: int = PAD_ID):
    """Inputs, targets (PAD masked to -1) and per-row segment ends for the input window."""
    arr = batch.tokens_array()
    inputs = arr[:, :-1]
    targets = arr[:, 1:].copy()
    for i, seq in enumerate(batch.sequences):
        if seq.pad_count:
            targets[i, targets.shape[1] - seq.pad_count :] = -1
    T = inputs.shape[1]
    bounds = []
    for seq in batch.sequences:
        ends = sorted({min(e, T) for e in seq.doc_boundaries})
        bounds.append(ends)
    return inputs, targets, bounds


def train_step(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    optim: OptimConfig,
    state: TrainState,
    inputs: np.ndarray,
    targets: np.ndarray,
    boundaries=None,
    lr: float | None = None,
    on_trace=None,
) -> MonitorReport:
    """Forward, loss, backward, clip, AdamW. Skips the update on a non-finite gradient.

    ``on_trace(report, trace, grads, logits)`` runs before parameters change,
    while the trace still describes them.
    """
    t0 = time.perf_counter()
    lr = cosine_lr(state.step, optim) if lr is None else lr
    logits, trace = forward(params, config, inputs, boundaries)
    loss = compute_loss(logits, targets, config.loss)
    grads = backward(trace, loss)
    report = collect_metrics(trace, grads, logits, step=state.step + 1)
    report.loss = loss.breakdown()
    report.lr = lr
    report.tokens = loss.n_tokens
    if on_trace is not None:
        on_trace(report, trace, grads, logits)
    try:
        clipped, norm = clip_gradients(grads, optim.clip_norm)
    except NonFiniteGradient as exc:
        report.grad_norm = float("nan")
        report.step = state.step
        report.events.append(f"NonFiniteGradient: {exc}; step skipped")
        log.warning("step %d: %s", state.step, exc)
        return report
    report.grad_norm = norm
    adamw_step(params, clipped, state, lr, optim)
    if not report.finite():
        report.events.append("non-finite monitor value")
        log.warning("step %d: non-finite monitor value", state.step)
    state.history.append({"step": state.step, "loss": report.loss["total"], "grad_norm": norm, "lr": lr})
    report.tokens_per_sec = inputs.size / max(time.perf_counter() - t0, 1e-12)
    return report


# checkpoints


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_checkpoint(
    checkpoint_dir: str | PathLike,
    config: ModelConfig,
    params: dict[str, np.ndarray],
    state: TrainState,
    stream: StreamCheckpoint | None,
    extra: dict | None = None,
) -> Path:
    """Atomically publish ``step_XXXXXXXX`` under checkpoint_dir and point ``latest`` at it."""
    root = Path(checkpoint_dir)
    root.mkdir(parents=True, exist_ok=True)
    name = f"step_{state.step:08d}"
    tmp = root / f".tmp-{name}-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    files = {"model": "model.bin", "train_state": "train_state.bin"}
    save_model(tmp / files["model"], config, params)
    state.save(tmp / files["train_state"])
    if stream is not None:
        files["stream"] = "stream.txt"
        stream.save(tmp / files["stream"])
    manifest = {
        "format": "nyoforge-checkpoint/1",
        "step": state.step,
        "files": files,
        "sha256": {k: _sha256(tmp / f) for k, f in files.items()},
    }
    if extra:
        manifest.update(extra)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    final = root / name
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    latest_tmp = root / f".latest-{os.getpid()}"
    latest_tmp.write_text(name + "\n", encoding="utf-8")
    os.replace(latest_tmp, root / "latest")
    return final


def resolve_checkpoint(path: str | PathLike) -> Path:
    path = Path(path)
    if (path / "manifest.json").is_file():
        return path
    latest = path / "latest"
    if latest.is_file():
        target = path / latest.read_text(encoding="utf-8").strip()
        if (target / "manifest.json").is_file():
            return target
    raise CheckpointCorrupt(f"{path}: no checkpoint manifest found")


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    config: ModelConfig
    params: dict[str, np.ndarray]
    state: TrainState
    stream: StreamCheckpoint | None


def load_checkpoint(path: str | PathLike) -> Checkpoint:
    path = resolve_checkpoint(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        files = manifest["files"]
        for key, fname in files.items():
            if _sha256(path / fname) != manifest["sha256"][key]:
                raise CheckpointCorrupt(f"{path / fname}: checksum mismatch")
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"{path}: {exc}") from exc
    config, params = load_model(path / files["model"])
    state = TrainState.load(path / files["train_state"], params)
    stream = StreamCheckpoint.load(path / files["stream"]) if "stream" in files else None
    return Checkpoint(path, manifest, config, params, state, stream)


# the loop


@dataclass
class TrainResult:
    steps: int
    reports: list[MonitorReport]
    checkpoints: list[Path]
    stream_exhausted: bool


def _truncate_log(log_path: Path, last_step: int) -> None:
    if not log_path.exists():
        return
    keep = []
    for line in log_path.read_text(encoding="utf-8").splitlines():
        if line.strip() and json.loads(line)["step"] <= last_step:
            keep.append(line)
    log_path.write_text("".join(l + "\n" for l in keep), encoding="utf-8")


def train_loop(
    config: ModelConfig,
    optim: OptimConfig,
    batches: Iterable[TokenBatch],
    params: dict[str, np.ndarray],
    state: TrainState,
    *,
    checkpoint_dir: str | PathLike | None = None,
    checkpoint_every: int = 100,
    log_path: str | PathLike | None = None,
    stop_after: int | None = None,
    manifest_extra: dict | None = None,
    on_trace=None,
) -> TrainResult:
    """Train until total_steps, the end of the stream, or ``stop_after`` steps.

    ``batches`` is normally a Scheduler; its ``checkpoint()`` is stored with
    every model checkpoint. A final checkpoint is always written when a
    checkpoint directory is given.
    """
    tokenizer = getattr(batches, "tokenizer", None)
    if tokenizer is not None and tokenizer.vocab_size != config.vocab_size:
        raise VocabMismatch(f"tokenizer vocab {tokenizer.vocab_size} != model vocab {config.vocab_size}")
    pad_id = tokenizer.pad_id if tokenizer is not None else PAD_ID
    stream_ckpt = getattr(batches, "checkpoint", None)
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        _truncate_log(log_path, state.step)
        log_file = open(log_path, "a", encoding="utf-8")
    at_boundary = getattr(batches, "at_file_boundary", None)

    def save() -> Path:
        extra = dict(manifest_extra or {})
        if at_boundary is not None:
            extra["stream_at_file_boundary"] = at_boundary()
        return write_checkpoint(checkpoint_dir, config, params, state, stream_ckpt() if stream_ckpt else None, extra)

    reports, written = [], []
    last_saved = None
    exhausted = True
    it = iter(batches)
    try:
        while state.step < optim.total_steps and (stop_after is None or state.step < stop_after):
            try:
                b = next(it)
            except StopIteration:
                break
            inputs, targets, bounds = batch_to_arrays(b, pad_id)
            if (targets >= 0).sum() == 0:
                continue
            report = train_step(params, config, optim, state, inputs, targets, bounds, on_trace=on_trace)
            reports.append(report)
            if log_file is not None:
                rec = report.to_record()
                rec["source_tokens"] = b.source_tokens
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                log_file.flush()
            if checkpoint_dir is not None and state.step % checkpoint_every == 0 and state.step != last_saved:
                written.append(save())
                last_saved = state.step
        else:
            exhausted = False
        if checkpoint_dir is not None and state.step != last_saved:
            written.append(save())
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(state.step, reports, written, exhausted)
