"""Metric-learning trainer for the chunk embedding model.

Pieces: Multi-Similarity loss over a batch of unit embeddings with
hard-pair mining, exact reverse-mode gradients through the whole network
(checked against finite differences in the test suite), the LAMB
optimizer with a cosine learning-rate schedule, and a deterministic
class-balanced batch sampler over augmented text pairs.

All training math runs in float64; the returned parameters are cast back
to the model's canonical float32.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _net
from .codec import CharMatrix, vectorize_chunk
from .errors import EmptyInputError, NumericError, ScheduleExhaustedError
from .model import ModelConfig, ModelParams, save_params


@dataclass(frozen=True)
class LossConfig:
    """Multi-Similarity loss and mining hyperparameters."""

    alpha: float = 4.0
    beta: float = 40.0
    lam: float = 0.5
    epsilon_mining: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must be in [0, 1]")
        if self.epsilon_mining < 0:
            raise ValueError("epsilon_mining must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    """LAMB optimizer settings with cosine learning-rate decay."""

    max_lr: float = 0.001
    end_lr: float = 0.0
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    batch_size: int = 32
    total_steps: int = 2000

    def __post_init__(self):
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule: {self.schedule}")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 4")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass(frozen=True)
class SamplerConfig:
    """Class sampling; languages are balanced with probability ~ count**alpha."""

    language_alpha: float = 0.3

    def __post_init__(self):
        if not 0 < self.language_alpha <= 1:
            raise ValueError("language_alpha must be in (0, 1]")


@dataclass
class Batch:
    """Encoded chunks with class labels; every class must appear >= 2 times."""

    inputs: list[CharMatrix]
    class_ids: list[int]

    def __post_init__(self):
        if len(self.inputs) != len(self.class_ids):
            raise ValueError("inputs and class_ids must have equal length")
        _check_class_counts(self.class_ids)


def _check_class_counts(class_ids) -> None:
    _, counts = np.unique(np.asarray(class_ids), return_counts=True)
    if len(counts) == 0:
        raise ValueError("batch is empty")
    if counts.min() < 2:
        raise ValueError("every class in a batch must appear at least twice")


# ---------------------------------------------------------------------------
# Multi-Similarity loss


def multi_similarity_loss(embeddings, class_ids, cfg: LossConfig = LossConfig()):
    """Loss and gradient wrt the embeddings for one batch.

    Similarity is the plain dot product (callers pass unit vectors). Per
    anchor, positives harder than the hardest negative minus a margin and
    negatives harder than the easiest positive plus a margin are mined;
    anchors with nothing mined contribute nothing and are excluded from
    the averaging denominator. Returns (loss, grad) with grad shaped like
    the embeddings.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(class_ids)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    if labels.shape[0] != emb.shape[0]:
        raise ValueError("class_ids must match embeddings")
    _check_class_counts(labels)

    n = emb.shape[0]
    sims = emb @ emb.T
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same

    neg_sims = np.where(neg_mask, sims, -np.inf)
    pos_sims = np.where(pos_mask, sims, np.inf)
    hardest_neg = neg_sims.max(axis=1)  # -inf when the anchor has no negatives
    easiest_pos = pos_sims.min(axis=1)  # +inf when the anchor has no positives

    eps = cfg.epsilon_mining
    mined_pos = pos_mask & (sims < hardest_neg[:, None] + eps)
    mined_neg = neg_mask & (sims > easiest_pos[:, None] - eps)

    pos_exp = np.where(mined_pos, np.exp(-cfg.alpha * (sims - cfg.lam)), 0.0)
    neg_exp = np.where(mined_neg, np.exp(cfg.beta * (sims - cfg.lam)), 0.0)
    pos_sum = pos_exp.sum(axis=1)
    neg_sum = neg_exp.sum(axis=1)

    active = mined_pos.any(axis=1) | mined_neg.any(axis=1)
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(emb)

    per_anchor = np.log1p(pos_sum) / cfg.alpha + np.log1p(neg_sum) / cfg.beta
    loss = float(per_anchor[active].sum() / n_active)

    w = (-pos_exp / (1.0 + pos_sum[:, None]) + neg_exp / (1.0 + neg_sum[:, None])) / n_active
    grad = (w + w.T) @ emb
    return loss, grad


# ---------------------------------------------------------------------------
# full-model gradients


def _batch_arrays(batch: Batch, cfg: ModelConfig):
    for m in batch.inputs:
        if m.chunk_len != cfg.chunk_len or m.bits_per_char != cfg.bits_per_char:
            raise ValueError("batch chunk shape does not match the model config")
    bits = np.stack([m.data for m in batch.inputs]).astype(np.float64)
    valid = np.array([m.valid_len for m in batch.inputs], dtype=np.int64)
    return bits, valid


def backward(tensors, model_cfg: ModelConfig, batch: Batch, loss_cfg: LossConfig = LossConfig()):
    """Loss value and exact parameter gradients for one batch.

    ``tensors`` maps tensor names to arrays (float32 or float64); the
    returned gradients are float64 keyed the same way.
    """
    bits, valid = _batch_arrays(batch, model_cfg)
    emb, cache = _net.forward_batch(tensors, model_cfg, bits, valid, want_cache=True)
    loss, d_emb = multi_similarity_loss(emb, batch.class_ids, loss_cfg)
    grads = _net.backward_batch(model_cfg, cache, d_emb)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {name}")
    return loss, grads


# ---------------------------------------------------------------------------
# LAMB optimizer


def cosine_lr(step: int, cfg: OptimizerConfig) -> float:
    """Learning rate at ``step``; valid for steps 0 .. total_steps-1."""
    if step >= cfg.total_steps:
        raise ScheduleExhaustedError(f"step {step} is past total_steps {cfg.total_steps}")
    span = cfg.max_lr - cfg.end_lr
    return cfg.end_lr + span * (1.0 + math.cos(math.pi * step / cfg.total_steps)) / 2.0


def init_optimizer_state(tensors) -> dict:
    zeros = lambda: {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in tensors.items()}
    return {"m": zeros(), "v": zeros()}


def lamb_step(tensors, grads, state, step_index: int, cfg: OptimizerConfig):
    """One LAMB update; returns (new_tensors, new_state) without mutating inputs."""
    lr = cosine_lr(step_index, cfg)
    t = step_index + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_tensors, new_m, new_v = {}, {}, {}
    for name, w in tensors.items():
        w = np.asarray(w, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        m = cfg.beta1 * state["m"][name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state["v"][name] + (1.0 - cfg.beta2) * g * g
        r = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay:
            r = r + cfg.weight_decay * w
        w_norm = np.linalg.norm(w)
        r_norm = np.linalg.norm(r)
        trust = w_norm / r_norm if w_norm > 0 and r_norm > 0 else 1.0
        new_tensors[name] = w - lr * trust * r
        new_m[name] = m
        new_v[name] = v
    return new_tensors, {"m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict] = field(repr=False)  # rows of {"step", "lr", "loss"}


class PairSampler:
    """Deterministic class-balanced sampler over (anchor, positive) pairs.

    ``pairs`` is a list of (anchor_text, positive_text, class_id, lang)
    tuples; texts are pre-encoded once. Each draw picks distinct classes
    (language-balanced with probability ~ count(lang)**alpha) and one
    pair per class, giving two examples per class in the batch.
    """

    def __init__(self, pairs, model_cfg: ModelConfig, sampler_cfg: SamplerConfig, seed: int):
        if not pairs:
            raise EmptyInputError("no training pairs")
        self._rng = np.random.default_rng(seed)
        codec = model_cfg.codec
        by_class: dict[int, list] = {}
        langs: dict[int, str] = {}
        for anchor, positive, class_id, lang in pairs:
            a = vectorize_chunk(anchor[: codec.chunk_len], codec)
            p = vectorize_chunk(positive[: codec.chunk_len], codec)
            by_class.setdefault(class_id, []).append((a, p))
            langs[class_id] = lang
        self._classes = sorted(by_class)
        self._by_class = by_class
        counts: dict[str, int] = {}
        for cid in self._classes:
            counts[langs[cid]] = counts.get(langs[cid], 0) + 1
        # per-class weight count(lang)**alpha / count(lang) so each language's
        # total mass scales like count**alpha
        weights = np.array(
            [counts[langs[cid]] ** sampler_cfg.language_alpha / counts[langs[cid]] for cid in self._classes]
        )
        self._probs = weights / weights.sum()

    @property
    def num_classes(self) -> int:
        return len(self._classes)

    def next_batch(self, batch_size: int) -> Batch:
        per_batch = batch_size // 2
        if per_batch > len(self._classes):
            raise ValueError(
                f"batch needs {per_batch} distinct classes but the corpus provides {len(self._classes)}"
            )
        chosen = self._rng.choice(len(self._classes), size=per_batch, replace=False, p=self._probs)
        inputs, class_ids = [], []
        for idx in sorted(chosen):
            cid = self._classes[idx]
            pairs = self._by_class[cid]
            a, p = pairs[self._rng.integers(len(pairs))]
            inputs.extend([a, p])
            class_ids.extend([cid, cid])
        return Batch(inputs=inputs, class_ids=class_ids)


def train(
    pairs,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig = LossConfig(),
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    sampler_cfg: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    log_every: int = 100,
    checkpoint_every: int = 0,
    checkpoint_path=None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Train from scratch (or from ``init``) over pre-generated text pairs.

    Single-threaded and fully deterministic for a fixed seed. ``pairs``
    come from :func:`neardup.augment.generate_training_pairs` or any
    iterable of (anchor, positive, class_id, lang) tuples.
    """
    sampler = PairSampler(list(pairs), model_cfg, sampler_cfg, seed=seed + 1)
    if sampler.num_classes < opt_cfg.batch_size // 2:
        raise ValueError("corpus smaller than one batch")
    from .model import init_params  # local import to avoid a cycle at module load

    start = init if init is not None else init_params(model_cfg, seed)
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in start.tensors.items()}
    state = init_optimizer_state(tensors)

    metrics = []
    for step in range(opt_cfg.total_steps):
        batch = sampler.next_batch(opt_cfg.batch_size)
        loss, grads = backward(tensors, model_cfg, batch, loss_cfg)
        lr = cosine_lr(step, opt_cfg)
        tensors, state = lamb_step(tensors, grads, state, step, opt_cfg)
        if step % log_every == 0 or step == opt_cfg.total_steps - 1:
            metrics.append({"step": step, "lr": lr, "loss": loss})
        if checkpoint_every and checkpoint_path and (step + 1) % checkpoint_every == 0:
            save_params(_to_params(model_cfg, tensors), checkpoint_path)

    return TrainResult(params=_to_params(model_cfg, tensors), metrics=metrics)


def _to_params(cfg: ModelConfig, tensors) -> ModelParams:
    return ModelParams(config=cfg, tensors={k: v.astype(np.float32) for k, v in tensors.items()})


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "lr", "loss"])
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# flat key=value config files


_CONFIG_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "sampler": SamplerConfig,
}


def load_train_config(path):
    """Parse a flat key=value file into (ModelConfig, LossConfig, OptimizerConfig, SamplerConfig).

    Keys are the dataclass field names; unknown keys are an error. Values
    are parsed as int, then float, then kept as strings.
    """
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()

    def coerce(text: str):
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                continue
        return text

    configs = []
    consumed = set()
    for cls in _CONFIG_SECTIONS.values():
        names = set(cls.__dataclass_fields__)
        kwargs = {k: coerce(v) for k, v in raw.items() if k in names}
        consumed |= set(kwargs)
        configs.append(cls(**kwargs))
    unknown = set(raw) - consumed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return tuple(configs)
