"""Episodic meta-training loop.

Cross-entropy on query rows only, micro-batching with gradient
accumulation, global-norm clipping, warmup + cosine learning-rate
schedule, adaptive moment optimizer, periodic checkpoints, and an
NDJSON training log.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attention import NEG_BIAS
from .autodiff import Tensor, cross_entropy, global_grad_norm
from .episodes import episodes_to_batch, make_episode_random
from .model import ModelConfig, TabularICLModel
from .synthetic import PriorConfig, sample_table


@dataclass
class TrainConfig:
    steps: int = 200
    episodes_per_step: int = 64
    micro_batch_size: int = 8
    n_support: int = 24
    n_query: int = 16
    lr: float = 3e-4
    warmup_steps: int = 100
    decay_steps: int | None = None      # cosine horizon; defaults to `steps`
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 100
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if self.episodes_per_step % self.micro_batch_size:
            raise ValueError("episodes_per_step must be divisible by micro_batch_size")
        if self.decay_steps is None:
            self.decay_steps = self.steps


class Adam:
    """Adaptive moment estimation, momentum-free beyond its own estimates."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_schedule(step: int, base_lr: float, warmup: int, horizon: int) -> float:
    """Linear warmup then cosine decay to zero at `horizon` steps."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if horizon <= warmup:
        return base_lr
    frac = min(1.0, (step - warmup) / (horizon - warmup))
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def episode_loss(model: TabularICLModel, episodes) -> tuple[Tensor, float]:
    """Mean query-row cross-entropy over a batch of same-shaped episodes.

    Logits beyond each episode's class count are masked to NEG_BIAS so the
    softmax runs over the first C classes only. Returns (loss, accuracy).
    """
    batch = episodes_to_batch(episodes, skip_value=model.config.skip_value)
    c_max = model.config.c_max
    if any(ep.n_classes > c_max for ep in episodes):
        raise ValueError("training episodes must satisfy C <= c_max")
    logits = model.forward(batch)                       # [B, n, c_max]
    q_logits = logits[:, batch.n_train:, :]
    class_bias = np.zeros((len(episodes), 1, c_max), dtype=np.float32)
    for i, ep in enumerate(episodes):
        class_bias[i, 0, ep.n_classes:] = NEG_BIAS
    q_logits = q_logits + class_bias
    n_query = q_logits.shape[1]
    flat = q_logits.reshape(len(episodes) * n_query, c_max)
    labels = np.concatenate([ep.y_query for ep in episodes])
    loss = cross_entropy(flat, labels)
    acc = float((flat.data.argmax(axis=1) == labels).mean())
    return loss, acc


def clip_gradients(params, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def accumulate_gradients(model: TabularICLModel, episode_chunk, micro_batch_size: int):
    """Sum per-micro-batch gradients into .grad, then average.

    Equivalent (up to float reassociation) to one large batch because
    micro-batches are equally sized.
    """
    model.zero_grad()
    n_micro = 0
    losses, accs = [], []
    for start in range(0, len(episode_chunk), micro_batch_size):
        micro = episode_chunk[start:start + micro_batch_size]
        loss, acc = episode_loss(model, micro)
        if not np.isfinite(loss.item()):
            return None, float(loss.item()), 0
        loss.backward()
        losses.append(loss.item())
        accs.append(acc)
        n_micro += 1
    for p in model.parameters():
        if p.grad is not None:
            p.grad /= n_micro
    return float(np.mean(losses)), float(np.mean(accs)), n_micro


def train_step(model: TabularICLModel, episode_chunk, config: TrainConfig,
               opt: Adam, step: int) -> dict:
    t0 = time.perf_counter()
    mean_loss, bad_or_acc, n_micro = accumulate_gradients(
        model, episode_chunk, config.micro_batch_size)
    record = {"step": step}
    if mean_loss is None:  # non-finite loss: skip the update, log the event
        record.update(loss=bad_or_acc, query_acc=None, lr=0.0, skipped=True)
        record["wall_ms"] = 1000 * (time.perf_counter() - t0)
        return record
    mean_acc = bad_or_acc
    grad_norm = clip_gradients(list(model.parameters()), config.clip_norm)
    lr = lr_schedule(step, config.lr, config.warmup_steps, config.decay_steps)
    opt.step(lr=lr)
    record.update(loss=mean_loss, query_acc=mean_acc, lr=lr,
                  grad_norm=grad_norm, skipped=False)
    record["wall_ms"] = 1000 * (time.perf_counter() - t0)
    return record


def _episode_source(prior_config: PriorConfig, config: TrainConfig):
    """Endless deterministic stream of same-shaped random-split episodes."""
    table_seed = 0
    min_rows = config.n_support + config.n_query
    while True:
        table = sample_table(prior_config, table_seed)
        table_seed += 1
        if table.x.shape[0] < min_rows or table.n_classes > config.n_support:
            continue
        for k in range(4):  # several distinct splits per table
            sub_seed = int(np.random.SeedSequence(
                [config.seed, table_seed, k]).generate_state(1)[0])
            yield make_episode_random(table.x, table.y, config.n_support,
                                      config.n_query, sub_seed)


def meta_train(model: TabularICLModel, config: TrainConfig,
               prior_config: PriorConfig, log_path=None) -> str:
    """Run the full loop; returns the final checkpoint path."""
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else ckpt_dir / "train_log.ndjson"
    opt = Adam(model.parameters(), lr=config.lr)
    source = _episode_source(prior_config, config)
    final_path = ckpt_dir / "model_final.obix"
    train_cfg = asdict(config)
    with open(log_path, "w") as log:
        for step in range(config.steps):
            chunk = [next(source) for _ in range(config.episodes_per_step)]
            record = train_step(model, chunk, config, opt, step)
            log.write(json.dumps(record) + "\n")
            if config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
                _write_checkpoint(model, ckpt_dir / f"model_step{step + 1:06d}.obix",
                                  train_cfg)
    _write_checkpoint(model, final_path, train_cfg)
    return str(final_path)


def _write_checkpoint(model: TabularICLModel, path: Path, train_cfg: dict) -> None:
    try:
        from . import checkpoint
        checkpoint.save(path, dict(model.named_parameters()),
                        config={"model": asdict(model.config), "train": train_cfg})
    except OSError as exc:
        raise RuntimeError(
            f"checkpoint write failed at {path}; training state not persisted") from exc


def load_checkpoint(path) -> TabularICLModel:
    from . import checkpoint
    tensors, config = checkpoint.load(path)
    if config is None or "model" not in config:
        raise checkpoint.CheckpointError(f"{path}: missing config echo block")
    model = TabularICLModel(ModelConfig(**config["model"]))
    model.load_state(tensors)
    return model
