"""Sparse mixture-of-experts transformer with configurable top-k routing.

The feed-forward block of every layer is a mixture of T homogeneous 2-layer
MLP experts. A 1-layer dense router scores experts per token; the k largest
logits are kept and softmax-normalized over the kept entries only, so the
mixture weights have exactly k nonzeros summing to 1. Selection itself is
discrete and carries no gradient; gradients flow through the softmax over
the selected logits, and unselected experts receive exactly zero gradient.

Training-time and inference-time k are independent knobs (``k_train`` vs
``k_infer``), so a trained model can be evaluated at any sparsity level.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .common import ConfigError, derive_seed

CHECKPOINT_MAGIC = b"SMOE-CKPT-1"


@dataclass
class ModelConfig:
    d_model: int = 128
    num_heads: int = 4
    num_blocks: int = 2
    num_experts: int = 8
    k_train: int = 2
    expert_hidden: int = 256
    vocab_size: int = 13
    max_seq_len: int = 128
    rel_pos_window: int = 16
    num_targets: int = 1
    activation: str = "gelu"
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.num_heads != 0:
            raise ConfigError("d_model must be divisible by num_heads")
        if not (1 <= self.k_train <= self.num_experts):
            raise ConfigError("k_train must lie in [1, num_experts]")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class RouterOutput:
    """Sparse mixture weights for one input: exactly k nonzeros, summing to 1."""
    weights: np.ndarray   # (T,) floats, zero off the selected set
    selected: np.ndarray  # (k,) expert indices, descending logit order
    logits: np.ndarray    # (T,) raw router scores


def route(logits, k: int) -> RouterOutput:
    """Top-k selection then softmax over the selected logits only.

    Ties break toward the lowest index. k == T degenerates to a full softmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    T = logits.shape[-1]
    if not (1 <= k <= T):
        raise ConfigError(f"k={k} out of range [1, {T}]")
    if not np.isfinite(logits).all():
        raise ConfigError("router logits must be finite")
    sel = ad.top_k_indices(logits, k)
    chosen = logits[sel]
    e = np.exp(chosen - chosen.max())
    w = e / e.sum()
    weights = np.zeros(T, dtype=np.float64)
    weights[sel] = w
    return RouterOutput(weights=weights, selected=sel, logits=logits.copy())


def _activation(name: str):
    return ad.gelu if name == "gelu" else ad.relu


class ExpertMLP:
    """2-layer MLP expert: d_model -> hidden -> d_model."""

    def __init__(self, d_model: int, hidden: int, activation: str, rng):
        self.w1 = _init((d_model, hidden), rng)
        self.b1 = _zeros((hidden,))
        self.w2 = _init((hidden, d_model), rng)
        self.b2 = _zeros((d_model,))
        self.hidden_dim = hidden
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        h = _activation(self.activation)(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def params(self, prefix: str):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


class SMoELayer:
    """T parallel homogeneous experts behind a 1-layer dense router."""

    def __init__(self, cfg: ModelConfig, rng):
        self.num_experts = cfg.num_experts
        self.k_train = cfg.k_train
        self.k_infer = cfg.k_train
        self.experts = [
            ExpertMLP(cfg.d_model, cfg.expert_hidden, cfg.activation, rng)
            for _ in range(cfg.num_experts)
        ]
        self.router_weights = _init((cfg.d_model, cfg.num_experts), rng)

    def forward(self, x: Tensor, k: int, router_input: Tensor | None = None,
                usage: np.ndarray | None = None) -> Tensor:
        """Mixture output, rows = sum over selected experts of w_j * expert_j.

        ``x`` is (n_tokens, d_model). Only the selected experts are evaluated;
        ``router_input`` defaults to ``x`` (the block passes the pre-layernorm
        stream here). ``usage``, when given, accumulates a per-expert routing
        count histogram.
        """
        T = self.num_experts
        if not (1 <= k <= T):
            raise ConfigError(f"k={k} out of range [1, {T}]")
        rin = x if router_input is None else router_input
        if x.shape[-1] != self.router_weights.shape[0]:
            raise ValueError(
                f"input width {x.shape[-1]} != d_model {self.router_weights.shape[0]}"
            )
        logits = ad.matmul(rin, self.router_weights)          # (n, T)
        sel = ad.top_k_indices(logits.data, k)                 # (n, k), no grad
        chosen = ad.take_along(logits, sel, axis=-1, unique=True)  # (n, k)
        w = ad.softmax(chosen, axis=-1)                        # (n, k)

        n = x.shape[0]
        if k == T:
            # dense case: run all experts as one batched matmul pair instead
            # of T separate gather/compute/scatter round trips
            if usage is not None:
                usage += n
            w1 = ad.stack([e.w1 for e in self.experts])      # (T, d, h)
            b1 = ad.reshape(ad.stack([e.b1 for e in self.experts]),
                            (T, 1, -1))
            w2 = ad.stack([e.w2 for e in self.experts])      # (T, h, d)
            b2 = ad.reshape(ad.stack([e.b2 for e in self.experts]),
                            (T, 1, -1))
            act = _activation(self.experts[0].activation)
            h = act(ad.add(ad.matmul(x, w1), b1))            # (T, n, h)
            y = ad.add(ad.matmul(h, w2), b2)                 # (T, n, d)
            # reorder the selection-sorted weights back to expert order
            inv = np.argsort(sel, axis=-1, kind="stable")    # (n, T)
            w_full = ad.take_along(w, inv, axis=-1, unique=True)
            wt = ad.reshape(ad.swapaxes(w_full, 0, 1), (T, n, 1))
            return ad.tsum(ad.mul(y, wt), axis=0)

        out = None
        for j in range(T):
            rows, slots = np.nonzero(sel == j)
            if rows.size == 0:
                continue
            if usage is not None:
                usage[j] += rows.size
            wj = ad.reshape(ad.gather_nd(w, (rows, slots), unique=True),
                            (rows.size, 1))
            xj = ad.gather_rows(x, rows, unique=True)
            yj = self.experts[j](xj)
            contrib = ad.scatter_rows(ad.mul(yj, wj), rows, n)
            out = contrib if out is None else ad.add(out, contrib)
        return out

    def params(self, prefix: str):
        out = [(f"{prefix}.router", self.router_weights)]
        for j, e in enumerate(self.experts):
            out.extend(e.params(f"{prefix}.expert{j}"))
        return out


class MultiHeadAttention:
    """Causal scaled-dot-product attention with a learned relative-position
    bias per head over clipped signed distance."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.num_heads = cfg.num_heads
        self.head_dim = d // cfg.num_heads
        self.window = cfg.rel_pos_window
        self.wq = _init((d, d), rng)
        self.wk = _init((d, d), rng)
        self.wv = _init((d, d), rng)
        self.wo = _init((d, d), rng)
        self.rel_bias = _zeros((cfg.num_heads, 2 * cfg.rel_pos_window + 1),
                               requires_grad=True)

    def forward(self, x: Tensor, causal: bool = True) -> Tensor:
        B, L, d = x.shape
        H, dh = self.num_heads, self.head_dim

        def split_heads(t):
            return ad.swapaxes(ad.reshape(t, (B, L, H, dh)), 1, 2)  # (B,H,L,dh)

        q = split_heads(ad.matmul(x, self.wq))
        kk = split_heads(ad.matmul(x, self.wk))
        v = split_heads(ad.matmul(x, self.wv))

        scores = ad.scale(ad.matmul(q, ad.swapaxes(kk, -1, -2)),
                          1.0 / np.sqrt(dh))                       # (B,H,L,L)

        idx = np.arange(L)
        rel = np.clip(idx[:, None] - idx[None, :],
                      -self.window, self.window) + self.window     # (L, L)
        bias = ad.gather_nd(self.rel_bias,
                            (np.arange(self.num_heads)[:, None, None],
                             rel[None, :, :]))                     # (H, L, L)
        scores = ad.add(scores, ad.reshape(bias, (1, H, L, L)))

        if causal:
            mask = np.where(idx[None, :] > idx[:, None], -1e30, 0.0)
            scores = ad.add_const(scores, mask[None, None, :, :])

        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)                                   # (B,H,L,dh)
        merged = ad.reshape(ad.swapaxes(ctx, 1, 2), (B, L, d))
        return ad.matmul(merged, self.wo)

    def params(self, prefix: str):
        return [(f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk),
                (f"{prefix}.wv", self.wv), (f"{prefix}.wo", self.wo),
                (f"{prefix}.rel_bias", self.rel_bias)]


class Block:
    """Pre-norm transformer block: attention then SMoE feed-forward.

    Router logits are computed from the pre-layernorm residual stream while
    experts consume the normalized input.
    """

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.attn = MultiHeadAttention(cfg, rng)
        self.smoe = SMoELayer(cfg, rng)
        self.ln1_g = _ones((d,))
        self.ln1_b = _zeros((d,))
        self.ln2_g = _ones((d,))
        self.ln2_b = _zeros((d,))

    def forward(self, x: Tensor, k: int, usage: np.ndarray | None = None) -> Tensor:
        B, L, d = x.shape
        h = ad.add(x, self.attn.forward(ad.layer_norm(x, self.ln1_g, self.ln1_b)))
        flat = ad.reshape(h, (B * L, d))
        normed = ad.layer_norm(flat, self.ln2_g, self.ln2_b)
        moe = self.smoe.forward(normed, k, router_input=flat, usage=usage)
        return ad.add(h, ad.reshape(moe, (B, L, d)))

    def params(self, prefix: str):
        out = [(f"{prefix}.ln1_g", self.ln1_g), (f"{prefix}.ln1_b", self.ln1_b),
               (f"{prefix}.ln2_g", self.ln2_g), (f"{prefix}.ln2_b", self.ln2_b)]
        out.extend(self.attn.params(f"{prefix}.attn"))
        out.extend(self.smoe.params(f"{prefix}.smoe"))
        return out


class SMoETransformer:
    """Decoder-only stack; reads num_targets prediction heads at the final
    position."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(derive_seed(cfg.seed, "model-init"))
        d = cfg.d_model
        self.embed = _init((cfg.vocab_size, d), rng, std=0.02)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.num_blocks)]
        self.lnf_g = _ones((d,))
        self.lnf_b = _zeros((d,))
        self.heads = [_init((d, cfg.vocab_size), rng)
                      for _ in range(cfg.num_targets)]
        self.k_infer = cfg.k_train

    # -- forward ----------------------------------------------------------
    def forward(self, tokens: np.ndarray, k: int,
                usage: list[np.ndarray] | None = None) -> list[Tensor]:
        """Logits for each target head at the final position.

        ``tokens`` is (batch, seq) int64; returns num_targets Tensors of
        shape (batch, vocab_size).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, L = tokens.shape
        if L > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {L} exceeds {self.cfg.max_seq_len}")
        if (tokens < 0).any() or (tokens >= self.cfg.vocab_size).any():
            raise IndexError("token id outside vocabulary")
        x = ad.embedding(self.embed, tokens)
        for i, blk in enumerate(self.blocks):
            x = blk.forward(x, k, usage=usage[i] if usage is not None else None)
        x = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        last = ad.gather_nd(x, (np.arange(B), np.full(B, L - 1)))  # (B, d)
        return [ad.matmul(last, h) for h in self.heads]

    def predict(self, tokens: np.ndarray, k: int | None = None) -> np.ndarray:
        """Greedy per-head predictions, (batch, num_targets) ints."""
        k = self.k_infer if k is None else k
        logits = self.forward(tokens, k)
        return np.stack([lg.data.argmax(axis=-1) for lg in logits], axis=1)

    # -- sparsity control ---------------------------------------------------
    def set_inference_k(self, k: int) -> None:
        if not (1 <= k <= self.cfg.num_experts):
            raise ConfigError(f"k={k} out of range [1, {self.cfg.num_experts}]")
        self.k_infer = k
        for blk in self.blocks:
            blk.smoe.k_infer = k

    # -- parameters ----------------------------------------------------------
    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("embed", self.embed)]
        for i, blk in enumerate(self.blocks):
            out.extend(blk.params(f"block{i}"))
        out.append(("lnf_g", self.lnf_g))
        out.append(("lnf_b", self.lnf_b))
        for i, h in enumerate(self.heads):
            out.append((f"head{i}", h))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def param_digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.named_params():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()[:16]

    # -- checkpointing ---------------------------------------------------------
    def save(self, path) -> None:
        header = {
            "config": asdict(self.cfg),
            "k_infer": self.k_infer,
            "params": [{"name": n, "shape": list(p.shape)}
                       for n, p in self.named_params()],
        }
        blob = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + b"\n")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, p in self.named_params():
                fh.write(np.ascontiguousarray(p.data).tobytes())

    @classmethod
    def load(cls, path) -> "SMoETransformer":
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC) + 1)
            if magic != CHECKPOINT_MAGIC + b"\n":
                raise ValueError("not a SMOE-CKPT-1 checkpoint")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen))
            model = cls(ModelConfig(**header["config"]))
            for spec, (name, p) in zip(header["params"], model.named_params()):
                if spec["name"] != name or tuple(spec["shape"]) != p.shape:
                    raise ValueError(f"checkpoint/model mismatch at {name}")
                raw = fh.read(8 * int(np.prod(spec["shape"])))
                p.data = np.frombuffer(raw, dtype=np.float64).reshape(p.shape).copy()
            model.set_inference_k(header["k_infer"])
        return model


# ---------------------------------------------------------------------------
# parameter initializers


def _init(shape, rng, std: float | None = None) -> Tensor:
    if std is None:
        std = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
