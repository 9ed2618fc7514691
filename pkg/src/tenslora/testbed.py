"""Desk-scale transformer encoder with adapters on Q, K and V.

The backbone is randomly initialised and frozen; only the adapter and the
classifier head are trained.  Two synthetic classification tasks make the
effect of the adapter measurable:

``majority-token``
    label 1 iff token ``a`` occurs more often than token ``b``.
``pairwise-match``
    label 1 iff positions ``i`` and ``j`` hold the same token.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .adapters import PROJECTIONS, ModelDims, TensLoRAAdapter, delta_graph

log = logging.getLogger(__name__)

__all__ = [
    "BackboneConfig",
    "TransformerBackbone",
    "TrainConfig",
    "SyntheticTask",
    "Dataset",
    "TrainResult",
    "init_backbone",
    "forward",
    "forward_graph",
    "loss_graph",
    "evaluate",
    "lr_at",
    "AdamW",
    "train_adapter",
    "make_task",
    "majority_label",
    "pairwise_label",
    "GENERATORS",
]

_PROJ_KEYS = ("wq", "wk", "wv")


@dataclass(frozen=True)
class BackboneConfig:
    dims: ModelDims
    vocab: int = 16
    seq_len: int = 16
    mlp_ratio: int = 4
    classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab, self.seq_len, self.classes) < 2:
            raise ValueError("vocab, seq_len and classes must all be >= 2")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")


@dataclass
class TransformerBackbone:
    """Pre-LayerNorm encoder with mean pooling and a linear classifier.

    ``weights`` holds every array by name: ``embed``, ``pos``,
    ``layer{l}.{wq,wk,wv,wo,w1,b1,w2,b2,ln1_g,ln1_b,ln2_g,ln2_b}``,
    ``lnf_g``, ``lnf_b``, ``head.w`` and ``head.b``.  Everything except the
    ``head.*`` entries is frozen.
    """

    config: BackboneConfig
    weights: dict = field(default_factory=dict)

    @property
    def dims(self) -> ModelDims:
        return self.config.dims

    def projection(self, p, l: int) -> np.ndarray:
        p = PROJECTIONS.index(p) if isinstance(p, str) else int(p)
        return self.weights[f"layer{l}.{_PROJ_KEYS[p]}"]

    def with_projections(self, mapping) -> "TransformerBackbone":
        new = self.copy()
        for (p, l), w in mapping.items():
            p = PROJECTIONS.index(p) if isinstance(p, str) else int(p)
            new.weights[f"layer{l}.{_PROJ_KEYS[p]}"] = np.array(w, dtype=np.float64)
        return new

    def with_head(self, head: dict) -> "TransformerBackbone":
        new = self.copy()
        for k, v in head.items():
            new.weights[k] = np.array(v, dtype=np.float64)
        return new

    @property
    def head(self) -> dict:
        return {k: v for k, v in self.weights.items() if k.startswith("head.")}

    def frozen(self) -> dict:
        return {k: v for k, v in self.weights.items() if not k.startswith("head.")}

    def copy(self) -> "TransformerBackbone":
        return replace(self, weights={k: v.copy() for k, v in self.weights.items()})

    def checksum(self, frozen_only: bool = True) -> str:
        """SHA-256 over the raw bytes of the (frozen) weights."""
        h = hashlib.sha256()
        items = self.frozen() if frozen_only else self.weights
        for k in sorted(items):
            h.update(k.encode())
            h.update(np.ascontiguousarray(items[k], dtype="<f8").tobytes())
        return h.hexdigest()


def init_backbone(config: BackboneConfig) -> TransformerBackbone:
    rng = np.random.default_rng(config.seed)
    d, L = config.dims.d, config.dims.L
    hidden = config.mlp_ratio * d
    w = {
        "embed": rng.standard_normal((config.vocab, d)),
        "cls": rng.standard_normal((1, d)),
        "pos": 0.1 * rng.standard_normal((config.seq_len + 1, d)),
    }
    for l in range(L):
        for k in ("wq", "wk", "wv", "wo"):
            w[f"layer{l}.{k}"] = rng.standard_normal((d, d)) / math.sqrt(d)
        w[f"layer{l}.w1"] = rng.standard_normal((d, hidden)) / math.sqrt(d)
        w[f"layer{l}.b1"] = np.zeros(hidden)
        w[f"layer{l}.w2"] = rng.standard_normal((hidden, d)) / math.sqrt(hidden)
        w[f"layer{l}.b2"] = np.zeros(d)
        for k in ("ln1", "ln2"):
            w[f"layer{l}.{k}_g"] = np.ones(d)
            w[f"layer{l}.{k}_b"] = np.zeros(d)
    w["lnf_g"] = np.ones(d)
    w["lnf_b"] = np.zeros(d)
    w["head.w"] = rng.standard_normal((d, config.classes)) / math.sqrt(d)
    w["head.b"] = np.zeros(config.classes)
    return TransformerBackbone(config, w)


def _check_tokens(backbone: TransformerBackbone, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    cfg = backbone.config
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ValueError(f"tokens must have shape (batch, {cfg.seq_len}), got {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    return tokens


def forward_graph(backbone: TransformerBackbone, tokens, adapter: TensLoRAAdapter | None = None, leaves: dict | None = None) -> ag.Variable:
    """Logits as a graph node.

    ``leaves`` optionally maps adapter parameter names and ``head.w`` /
    ``head.b`` to Variables; anything missing is treated as a constant.
    """
    tokens = _check_tokens(backbone, tokens)
    leaves = leaves or {}
    w = backbone.weights
    dims = backbone.dims
    B, T = tokens.shape
    h, dh = dims.h, dims.d_h

    def get(name):
        return leaves[name] if name in leaves else ag.constant(w[name])

    deltas = {}
    if adapter is not None:
        if adapter.dims != dims:
            raise ValueError(f"adapter dims {adapter.dims} do not match backbone dims {dims}")
        adapter_leaves = {k: leaves[k] if k in leaves else ag.constant(v) for k, v in adapter.params.items()}
        deltas = delta_graph(adapter, adapter_leaves)

    x = ag.embedding_lookup(ag.constant(w["embed"]), tokens)
    x = ag.concat([ag.constant(np.broadcast_to(w["cls"], (B, 1, dims.d))), x], axis=1)
    x = ag.add(x, ag.constant(w["pos"]))
    T = T + 1
    for l in range(dims.L):
        pre = f"layer{l}."
        xn = ag.layer_norm(x, ag.constant(w[pre + "ln1_g"]), ag.constant(w[pre + "ln1_b"]))
        heads = []
        for p, key in enumerate(_PROJ_KEYS):
            wp = ag.constant(w[pre + key])
            if (p, l) in deltas:
                wp = ag.add(wp, ag.scale(deltas[(p, l)], adapter.alpha))
            y = ag.matmul(xn, wp)  # (B, T, d)
            heads.append(ag.transpose(ag.reshape(y, (B, T, h, dh)), (0, 2, 1, 3)))
        q, k, v = heads
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ag.matmul(ag.softmax(scores, axis=-1), v)  # (B, h, T, dh)
        att = ag.reshape(ag.transpose(att, (0, 2, 1, 3)), (B, T, dims.d))
        x = ag.add(x, ag.matmul(att, ag.constant(w[pre + "wo"])))
        xn = ag.layer_norm(x, ag.constant(w[pre + "ln2_g"]), ag.constant(w[pre + "ln2_b"]))
        hid = ag.gelu(ag.add(ag.matmul(xn, ag.constant(w[pre + "w1"])), ag.constant(w[pre + "b1"])))
        x = ag.add(x, ag.add(ag.matmul(hid, ag.constant(w[pre + "w2"])), ag.constant(w[pre + "b2"])))
    x = ag.layer_norm(x, ag.constant(w["lnf_g"]), ag.constant(w["lnf_b"]))
    pooled = ag.index(x, (slice(None), 0))
    return ag.add(ag.matmul(pooled, get("head.w")), get("head.b"))


def forward(backbone: TransformerBackbone, adapter: TensLoRAAdapter | None, tokens) -> np.ndarray:
    """Logits ``(batch, classes)``; ``adapter=None`` runs the bare backbone."""
    return forward_graph(backbone, tokens, adapter).value


def loss_graph(backbone, adapter, tokens, labels, leaves=None) -> ag.Variable:
    return ag.cross_entropy(forward_graph(backbone, tokens, adapter, leaves), labels)


def evaluate(backbone: TransformerBackbone, adapter: TensLoRAAdapter | None, dataset: "Dataset", batch: int = 512) -> float:
    """Fraction of examples whose argmax logit (lowest index on ties) is the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch):
        logits = forward(backbone, adapter, dataset.tokens[start : start + batch])
        correct += int((logits.argmax(axis=1) == dataset.labels[start : start + batch]).sum())
    return correct / len(dataset)


# --------------------------------------------------------------------------
# synthetic tasks

GENERATORS = ("majority-token", "pairwise-match")


@dataclass(frozen=True)
class SyntheticTask:
    """``params`` must give ``vocab`` and ``seq_len``; ``majority-token`` also
    takes ``a`` / ``b`` (defaults 0 / 1), ``pairwise-match`` takes ``i`` /
    ``j`` (defaults 0 / seq_len - 1)."""

    generator: str
    params: dict
    seed: int = 0


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.labels[idx])


def majority_label(seq, a: int = 0, b: int = 1) -> int:
    seq = np.asarray(seq)
    return int(np.count_nonzero(seq == a) > np.count_nonzero(seq == b))


def pairwise_label(seq, i: int, j: int) -> int:
    seq = np.asarray(seq)
    return int(seq[i] == seq[j])


def _task_params(task: SyntheticTask) -> dict:
    if task.generator not in GENERATORS:
        raise ValueError(f"unknown generator {task.generator!r}; choose from {GENERATORS}")
    p = dict(task.params)
    vocab, seq_len = int(p.get("vocab", 0)), int(p.get("seq_len", 0))
    if vocab < 2 or seq_len < 2:
        raise ValueError("task params need vocab >= 2 and seq_len >= 2")
    if task.generator == "majority-token":
        a, b = int(p.get("a", 0)), int(p.get("b", 1))
        if a == b or not (0 <= a < vocab and 0 <= b < vocab):
            raise ValueError("majority-token needs two distinct in-vocabulary tokens a and b")
        extra = set(p) - {"vocab", "seq_len", "a", "b"}
        out = dict(vocab=vocab, seq_len=seq_len, a=a, b=b)
    else:
        i, j = int(p.get("i", 0)), int(p.get("j", seq_len - 1))
        if i == j or not (0 <= i < seq_len and 0 <= j < seq_len):
            raise ValueError("pairwise-match needs two distinct in-range positions i and j")
        extra = set(p) - {"vocab", "seq_len", "i", "j"}
        out = dict(vocab=vocab, seq_len=seq_len, i=i, j=j)
    if extra:
        raise ValueError(f"unknown task parameters: {sorted(extra)}")
    return out


def make_task(task: SyntheticTask, count: int) -> Dataset:
    """Deterministic labelled dataset with labels drawn as fair coin flips.

    ``majority-token`` never produces ties between ``a`` and ``b``; filler
    positions use the other tokens (or only ``a``/``b`` when vocab is 2).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    p = _task_params(task)
    rng = np.random.default_rng(task.seed)
    vocab, T = p["vocab"], p["seq_len"]
    tokens = np.empty((count, T), dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    want = rng.integers(0, 2, size=count)
    if task.generator == "majority-token":
        a, b = p["a"], p["b"]
        fillers = np.array([t for t in range(vocab) if t not in (a, b)])
        for n in range(count):
            k = T if fillers.size == 0 else int(rng.integers(1, T + 1))
            # ways to split k into (n_a, n_b) with n_a != n_b on the wanted side
            choices = [x for x in range(k + 1) if (x > k - x) == bool(want[n]) and x != k - x]
            n_a = int(rng.choice(choices))
            seq = np.concatenate([
                np.full(n_a, a),
                np.full(k - n_a, b),
                rng.choice(fillers, size=T - k) if T > k else np.empty(0, dtype=np.int64),
            ])
            tokens[n] = rng.permutation(seq)
            labels[n] = majority_label(tokens[n], a, b)
    else:
        i, j = p["i"], p["j"]
        tokens[:] = rng.integers(0, vocab, size=(count, T))
        for n in range(count):
            if want[n]:
                tokens[n, j] = tokens[n, i]
            else:
                other = rng.integers(0, vocab - 1)
                tokens[n, j] = other + (other >= tokens[n, i])
            labels[n] = pairwise_label(tokens[n], i, j)
    return Dataset(tokens, labels)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and schedule settings.

    ``warmup_steps`` defaults to 10% of ``total_steps``.  AdamW uses the
    usual defaults ``betas=(0.9, 0.999)``, ``eps=1e-8``, ``weight_decay=0.01``.
    """

    peak_lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_steps: int | None = None
    total_steps: int = 500
    batch: int = 64
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", max(1, self.total_steps // 10))
        if not self.min_lr < self.peak_lr:
            raise ValueError("min_lr must be below peak_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine down to ``min_lr``."""
    if step <= cfg.warmup_steps and cfg.warmup_steps > 0:
        return cfg.peak_lr * (step / cfg.warmup_steps)
    if step >= cfg.total_steps:
        return cfg.min_lr
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """AdamW with decoupled weight decay, updating arrays in place."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            p *= 1.0 - lr * self.weight_decay
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainResult:
    adapter: TensLoRAAdapter | None
    backbone: TransformerBackbone
    log: list

    def log_rows(self):
        return [(r["step"], r["loss"], r["lr"], r["accuracy"]) for r in self.log]


def train_adapter(
    backbone: TransformerBackbone,
    adapter: TensLoRAAdapter | None,
    data: Dataset,
    cfg: TrainConfig,
) -> TrainResult:
    """Train the adapter and the classifier head on minibatches of ``data``.

    Update ``s`` (1-based) uses ``lr_at(s)``, so the last update runs at
    ``min_lr``.  Frozen backbone weights are never touched; the returned
    backbone is a copy carrying the trained head.  ``adapter=None`` trains
    the head alone.  Each log row holds the step, minibatch loss, learning
    rate and minibatch accuracy.
    """
    if adapter is not None and adapter.dims != backbone.dims:
        raise ValueError("adapter dims do not match the backbone")
    adapter = adapter.copy() if adapter is not None else None
    head = {k: v.copy() for k, v in backbone.head.items()}
    params = dict(head)
    if adapter is not None:
        params.update(adapter.params)
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    log.debug("AdamW betas=%s eps=%s weight_decay=%s", cfg.betas, cfg.eps, cfg.weight_decay)
    # frozen weights are shared, not copied: the loop only reads them
    model = TransformerBackbone(backbone.config, {**backbone.frozen(), **head})
    rows = []
    n = len(data)
    for step in range(1, cfg.total_steps + 1):
        idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
        leaves = {k: ag.variable(v) for k, v in params.items()}
        logits = forward_graph(model, data.tokens[idx], adapter, leaves)
        loss = ag.cross_entropy(logits, data.labels[idx])
        if not np.isfinite(loss.value):
            raise FloatingPointError(f"non-finite loss {float(loss.value)} at step {step}")
        ag.backward(loss)
        lr = lr_at(step, cfg)
        opt.step({k: leaves[k].grad for k in params}, lr)
        acc = float((logits.value.argmax(axis=1) == data.labels[idx]).mean())
        rows.append({"step": step, "loss": float(loss.value), "lr": lr, "accuracy": acc})
    return TrainResult(adapter, backbone.with_head(head), rows)
