"""Deterministic training/evaluation harness for SRAVEN tasks.

Batches are streamed from the train tuples every step (fresh instances, no
fixed dataset file); evaluation uses frozen per-seed snapshots so curves are
comparable across runs. The loss is the mean over the M target heads of
cross-entropy at the final position.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import sraven
from .common import ConfigError, config_hash, derive_seed, stable_json
from .model import ModelConfig, SMoETransformer
from .optim import adam_step, clip_grad_norm, init_state, zero_grads


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    M: int = 1
    p: int = 10
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eval_every: int = 500
    eval_snapshot_size: int = 2048
    seed: int = 0
    eval_k_list: list = field(default_factory=lambda: list(range(1, 9)))
    ood_fraction: float = 0.25
    grad_clip: float = 0.0   # 0 disables clipping

    def validate(self) -> None:
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        for k in self.eval_k_list:
            if not (1 <= k <= self.model.num_experts):
                raise ConfigError(f"eval k={k} outside [1, T]")
        self.model.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    curve: list            # (step, train_loss, test_acc, ood_acc)
    per_k_eval: dict       # k -> {"test_acc": .., "ood_acc": ..}
    expert_usage: list     # per block, length-T histogram of routed tokens
    final_test_acc: float
    final_ood_acc: float
    M: int
    k_train: int
    wall_time_seconds: float
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def digest(self) -> str:
        """Content hash excluding wall time (the only non-deterministic field)."""
        d = asdict(self)
        d.pop("wall_time_seconds")
        return config_hash(d)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "test_acc", "ood_acc"])
            for row in self.curve:
                w.writerow(row)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic record."""

    def __init__(self, step: int, layer_norms: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.layer_norms = layer_norms


def _encode_batch(instances, p: int):
    tokens = np.stack([sraven.encode(inst, p) for inst in instances])
    targets = np.stack([inst.target for inst in instances])
    return tokens, targets


def evaluate(model: SMoETransformer, snapshot, k_eval: int, p: int,
             batch_size: int = 256) -> tuple[float, float]:
    """(exact-match accuracy, mean loss) on a frozen snapshot.

    Never mutates the model; routing uses ``k_eval``.
    """
    if not snapshot:
        raise ConfigError("evaluation snapshot is empty")
    if not (1 <= k_eval <= model.cfg.num_experts):
        raise ConfigError(f"k_eval={k_eval} outside [1, T]")
    correct = 0
    loss_sum = 0.0
    n = 0
    for i in range(0, len(snapshot), batch_size):
        chunk = snapshot[i:i + batch_size]
        tokens, targets = _encode_batch(chunk, p)
        with ad.no_grad():
            logits = model.forward(tokens, k_eval)
        preds = np.stack([lg.data.argmax(axis=-1) for lg in logits], axis=1)
        correct += int((preds == targets).all(axis=1).sum())
        for h, lg in enumerate(logits):
            loss_sum += _mean_nll(lg.data, targets[:, h]) * len(chunk)
        n += len(chunk)
    return correct / n, loss_sum / (n * len(model.heads))


def _mean_nll(logits: np.ndarray, targets: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float((lse - shifted[np.arange(len(targets)), targets]).mean())


def make_eval_snapshots(config: TrainConfig):
    """Frozen test (fresh instances of train tuples) and OOD (held-out tuples)
    snapshots, both keyed by the run seed."""
    tuples = sraven.enumerate_rule_tuples(sraven.NUM_RULES, config.M)
    split = sraven.split_combinations(tuples, config.ood_fraction,
                                      derive_seed(config.seed, "tuple-split"))
    test = sraven.make_snapshot(split.train_tuples, config.p,
                                config.eval_snapshot_size,
                                config.seed, "test")
    ood = sraven.make_snapshot(split.ood_tuples, config.p,
                               config.eval_snapshot_size,
                               config.seed, "ood")
    return split, test, ood


def train(config: TrainConfig) -> tuple[SMoETransformer, RunRecord]:
    """Run exactly ``config.steps`` optimizer steps and return the model plus
    its serialized outcome."""
    config.validate()
    t0 = time.time()
    cfg_hash = config.hash()

    # The run owns a private model config: vocabulary and head count follow
    # the task, and the run seed drives initialization.
    model_cfg = replace(
        config.model,
        vocab_size=sraven.vocab_size(config.p),
        num_targets=config.M,
        max_seq_len=max(config.model.max_seq_len,
                        sraven.sequence_length(config.M)),
        seed=derive_seed(config.seed, "init"),
    )

    model = SMoETransformer(model_cfg)
    params = model.params()
    state = init_state(params, lr=config.lr, beta1=config.beta1,
                       beta2=config.beta2)

    split, test_snap, ood_snap = make_eval_snapshots(config)
    data_rng = np.random.default_rng(derive_seed(config.seed, "data"))
    train_tuples = split.train_tuples

    usage = [np.zeros(model_cfg.num_experts, dtype=np.int64)
             for _ in range(model_cfg.num_blocks)]
    curve = []
    k = model_cfg.k_train

    for step in range(1, config.steps + 1):
        batch = [
            sraven.sample_instance(
                train_tuples[int(data_rng.integers(len(train_tuples)))],
                config.p, data_rng)
            for _ in range(config.batch_size)
        ]
        tokens, targets = _encode_batch(batch, config.p)
        logits = model.forward(tokens, k, usage=usage)
        losses = [ad.cross_entropy(lg, targets[:, h])
                  for h, lg in enumerate(logits)]
        total = losses[0]
        for l in losses[1:]:
            total = ad.add(total, l)
        loss = ad.scale(total, 1.0 / len(losses))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            norms = {name: float(np.linalg.norm(p.data))
                     for name, p in model.named_params()}
            raise TrainingDiverged(step, norms)

        zero_grads(params)
        ad.backward(loss)
        if config.grad_clip > 0:
            clip_grad_norm(params, config.grad_clip)
        adam_step(params, state)

        if step % config.eval_every == 0 or step == config.steps:
            test_acc, _ = evaluate(model, test_snap, k, config.p)
            ood_acc, _ = evaluate(model, ood_snap, k, config.p)
            curve.append((step, loss_val, test_acc, ood_acc))

    per_k = {}
    for ke in config.eval_k_list:
        model.set_inference_k(ke)
        ta, _ = evaluate(model, test_snap, ke, config.p)
        oa, _ = evaluate(model, ood_snap, ke, config.p)
        per_k[str(ke)] = {"test_acc": ta, "ood_acc": oa}
    model.set_inference_k(k)

    record = RunRecord(
        config_hash=cfg_hash,
        seed=config.seed,
        curve=[list(c) for c in curve],
        per_k_eval=per_k,
        expert_usage=[u.tolist() for u in usage],
        final_test_acc=curve[-1][2],
        final_ood_acc=curve[-1][3],
        M=config.M,
        k_train=k,
        wall_time_seconds=time.time() - t0,
        config=config.to_dict(),
    )
    return model, record
