"""MLP backbones with early-exit heads: the recursive moving-mass model and a
plain multi-softmax baseline, with manual reverse-mode gradients and SGD training.

The recursive model maintains one running per-class probability vector across
exits.  The first exit emits independent per-class sigmoid probabilities; every
intermediate exit then moves probability mass with two sigmoid heads, adding a
fraction of the head's output times the remaining headroom and removing a
fraction of the accumulated value:

    f_t = f_{t-1} + (1 - f_{t-1}) * add_t - f_{t-1} * sub_t

which keeps every coordinate in [0, 1] by construction.  The final exit folds
the backbone's softmax distribution into the running vector the same way,
using the distribution itself as the additive fraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# numerics


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; underflows cleanly to exact 0/1."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def mass_recursion_step(f_prev: np.ndarray, add: np.ndarray, sub: np.ndarray) -> np.ndarray:
    """One intermediate-exit update of the running probability vector."""
    return f_prev + (1.0 - f_prev) * add - f_prev * sub


def final_absorption_step(f_prev: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Final-exit update: fold a distribution into the running vector."""
    return f_prev + (1.0 - f_prev) * dist


def margins_from_probs(probs: np.ndarray) -> np.ndarray:
    """Top-1 minus top-2 probability gap along the last axis."""
    part = np.partition(probs, -2, axis=-1)
    return part[..., -1] - part[..., -2]


# ---------------------------------------------------------------------------
# configuration and trace types


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the backbone and placement of its exits.

    `exit_indices` are 1-based block indices; the default attaches one exit to
    every block.  The last block always carries the final classifier.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    exit_indices: tuple[int, ...] = ()

    def __post_init__(self):
        hidden = tuple(int(d) for d in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", hidden)
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if len(hidden) < 2:
            raise ValueError("need at least two blocks")
        if any(d < 1 for d in hidden):
            raise ValueError("hidden_dims must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        exits = tuple(int(i) for i in self.exit_indices) or tuple(range(1, len(hidden) + 1))
        object.__setattr__(self, "exit_indices", exits)
        if len(exits) < 2:
            raise ValueError("need at least two exits (one early, one final)")
        if any(b >= a for a, b in zip(exits[1:], exits)):
            raise ValueError("exit_indices must be strictly increasing")
        if exits[0] < 1 or exits[-1] != len(hidden):
            raise ValueError("exit_indices must lie in 1..num_blocks and end at the last block")

    @property
    def num_blocks(self) -> int:
        return len(self.hidden_dims)

    @property
    def num_exits(self) -> int:
        return len(self.exit_indices)

    def head_dim(self, block_index: int) -> int:
        """Feature width of an exit head attached to the given (1-based) block."""
        return max(self.num_classes, self.hidden_dims[block_index - 1] // 4)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "exit_indices": list(self.exit_indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            num_classes=int(d["num_classes"]),
            exit_indices=tuple(d.get("exit_indices") or ()),
        )


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings; `margin` defaults to 2/num_classes when left as None."""

    margin: float | None = None
    learning_rate: float = 0.1
    epochs: int = 40
    batch_size: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.margin is not None and not 0.0 < self.margin < 1.0:
            raise ValueError("margin must lie in (0, 1)")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def resolved_margin(self, num_classes: int) -> float:
        return self.margin if self.margin is not None else 2.0 / num_classes


@dataclass
class PredictionTrace:
    """Per-exit outputs for one input.

    per_exit_probs[t] is the running probability vector after exit t (the last
    entry is the final combined output); per_exit_margin holds the top1-top2
    gaps; final_distribution is the raw softmax of the last classifier before
    it is folded into the running vector.
    """

    per_exit_probs: list[np.ndarray]
    per_exit_margin: np.ndarray
    final_distribution: np.ndarray


# ---------------------------------------------------------------------------
# parameter initialisation helpers

MASS_HEAD_BIAS = -2.0  # keeps initial mass movement small, near the recursion fixed point


def _affine_init(out_dim: int, in_dim: int, rng: np.random.Generator, bias: float = 0.0):
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = np.full(out_dim, bias, dtype=np.float64)
    return w, b


class _ExitNetworkBase:
    """Shared machinery: block stack, parameter dict, FLOPs accounting, checkpoints."""

    model_kind = "base"

    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    # -- construction ------------------------------------------------------

    @classmethod
    def initialize(cls, config: BackboneConfig, seed: int):
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        in_dim = config.input_dim
        for j, out_dim in enumerate(config.hidden_dims):
            w, b = _affine_init(out_dim, in_dim, rng)
            params[f"block{j}.W"] = w
            params[f"block{j}.b"] = b
            in_dim = out_dim
        cls._init_heads(config, params, rng)
        return cls(config, params)

    @classmethod
    def _init_heads(cls, config, params, rng):
        raise NotImplementedError

    def copy(self):
        return type(self)(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- backbone forward ---------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(
                f"input has shape {x.shape}, expected (*, {self.config.input_dim})"
            )
        return x

    def _blocks_forward(self, x: np.ndarray):
        """Returns pre-activations Z and activations H per block (H[0] is the input)."""
        zs, hs = [], [x]
        h = x
        for j in range(self.config.num_blocks):
            z = h @ self.params[f"block{j}.W"].T + self.params[f"block{j}.b"]
            h = relu(z)
            zs.append(z)
            hs.append(h)
        return zs, hs

    def _blocks_backward(self, zs, hs, dh_blocks, grads):
        """Propagate per-block activation gradients down to the input."""
        dh = np.zeros_like(hs[-1])
        for j in range(self.config.num_blocks - 1, -1, -1):
            dh = dh + dh_blocks[j]
            dz = dh * (zs[j] > 0)
            grads[f"block{j}.W"] += dz.T @ hs[j]
            grads[f"block{j}.b"] += dz.sum(axis=0)
            dh = dz @ self.params[f"block{j}.W"]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- FLOPs accounting ----------------------------------------------------

    def _head_macs(self, position: int) -> int:
        raise NotImplementedError

    def mac_counts(self) -> np.ndarray:
        """Cumulative multiply-accumulate count through each exit.

        Counts every affine map evaluated up to and including exit t: all
        backbone blocks through that exit's block plus every head at exits
        <= t (earlier heads are evaluated on the way, both to run the
        recursion and to test halting).
        """
        cfg = self.config
        dims = (cfg.input_dim,) + cfg.hidden_dims
        block_macs = [dims[j] * dims[j + 1] for j in range(cfg.num_blocks)]
        block_cum = np.cumsum(block_macs)
        totals = []
        head_running = 0
        for t, block in enumerate(cfg.exit_indices):
            head_running += self._head_macs(t)
            totals.append(block_cum[block - 1] + head_running)
        return np.asarray(totals, dtype=np.int64)

    def flops_fractions(self) -> np.ndarray:
        cum = self.mac_counts().astype(np.float64)
        return cum / cum[-1]

    def embedding_bits(self, activation_bits: int = 8) -> np.ndarray:
        """Payload size of the activations available at each exit, in bits."""
        dims = [self.config.hidden_dims[b - 1] for b in self.config.exit_indices]
        return np.asarray(dims, dtype=np.float64) * activation_bits

    # -- checkpointing -------------------------------------------------------

    def save(self, path) -> None:
        """Write a single-file checkpoint (npz: json header + float64 tensors).

        Round-trips bit-exactly: `load_network(path)` restores identical arrays.
        """
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "model": self.model_kind,
            "config": self.config.to_dict(),
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_network(path):
    """Load a checkpoint written by `save`, dispatching on the model kind."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('format_version')}")
        params = {
            k[len("param/"):]: np.array(blob[k]) for k in blob.files if k.startswith("param/")
        }
    config = BackboneConfig.from_dict(meta["config"])
    kinds = {
        RecursiveEENetwork.model_kind: RecursiveEENetwork,
        MultiExitNetwork.model_kind: MultiExitNetwork,
    }
    try:
        cls = kinds[meta["model"]]
    except KeyError:
        raise ValueError(f"unknown model kind in checkpoint: {meta['model']!r}") from None
    return cls(config, params)


# ---------------------------------------------------------------------------
# recursive moving-mass network


class RecursiveEENetwork(_ExitNetworkBase):
    """Backbone with a sigmoid first exit, moving-mass intermediate exits and a
    softmax final classifier folded into the running probability vector."""

    model_kind = "recursive"

    @classmethod
    def _init_heads(cls, config, params, rng):
        for t, block in enumerate(config.exit_indices):
            width = config.hidden_dims[block - 1]
            if t == config.num_exits - 1:
                params["final.W"], params["final.b"] = _affine_init(
                    config.num_classes, width, rng
                )
                continue
            hd = config.head_dim(block)
            params[f"exit{t}.feature.W"], params[f"exit{t}.feature.b"] = _affine_init(
                hd, width, rng
            )
            if t == 0:
                params["exit0.predictor.W"], params["exit0.predictor.b"] = _affine_init(
                    config.num_classes, hd, rng
                )
            else:
                params[f"exit{t}.mass_add.W"], params[f"exit{t}.mass_add.b"] = _affine_init(
                    config.num_classes, hd, rng, bias=MASS_HEAD_BIAS
                )
                params[f"exit{t}.mass_sub.W"], params[f"exit{t}.mass_sub.b"] = _affine_init(
                    config.num_classes, hd, rng, bias=MASS_HEAD_BIAS
                )

    def _head_macs(self, position: int) -> int:
        cfg = self.config
        block = cfg.exit_indices[position]
        width = cfg.hidden_dims[block - 1]
        if position == cfg.num_exits - 1:
            return width * cfg.num_classes
        hd = cfg.head_dim(block)
        if position == 0:
            return width * hd + hd * cfg.num_classes
        return width * hd + 2 * hd * cfg.num_classes

    # -- forward -------------------------------------------------------------

    def _forward_cached(self, x: np.ndarray) -> dict:
        cfg = self.config
        zs, hs = self._blocks_forward(x)
        cache = {"zs": zs, "hs": hs, "exits": []}
        probs = []
        f = None
        for t, block in enumerate(cfg.exit_indices):
            h = hs[block]
            if t == cfg.num_exits - 1:
                logits = h @ self.params["final.W"].T + self.params["final.b"]
                dist = softmax(logits)
                combined = final_absorption_step(f, dist)
                cache["exits"].append({"kind": "final", "dist": dist})
                cache["final_distribution"] = dist
                probs.append(combined)
                f = combined
                continue
            a = h @ self.params[f"exit{t}.feature.W"].T + self.params[f"exit{t}.feature.b"]
            e = relu(a)
            if t == 0:
                logits = e @ self.params["exit0.predictor.W"].T + self.params["exit0.predictor.b"]
                f = sigmoid(logits)
                cache["exits"].append({"kind": "first", "a": a, "e": e, "f": f})
            else:
                add = sigmoid(e @ self.params[f"exit{t}.mass_add.W"].T + self.params[f"exit{t}.mass_add.b"])
                sub = sigmoid(e @ self.params[f"exit{t}.mass_sub.W"].T + self.params[f"exit{t}.mass_sub.b"])
                cache["exits"].append(
                    {"kind": "mass", "a": a, "e": e, "add": add, "sub": sub, "f_prev": f}
                )
                f = mass_recursion_step(f, add, sub)
            probs.append(f)
        cache["probs"] = probs
        return cache

    def forward_batch(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Per-exit running probabilities and the raw final softmax, batched."""
        x = self._check_input(x)
        cache = self._forward_cached(x)
        return cache["probs"], cache["final_distribution"]

    def forward(self, x: np.ndarray) -> PredictionTrace:
        """Trace a single input through every exit."""
        probs, dist = self.forward_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        per_exit = [p[0] for p in probs]
        margins = np.array([margins_from_probs(p) for p in per_exit])
        return PredictionTrace(per_exit, margins, dist[0])


# ---------------------------------------------------------------------------
# loss


def _check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if np.any((y < 0) | (y >= num_classes)):
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    return y.astype(np.int64)


def margin_loss(trace: PredictionTrace, label: int, margin: float) -> float:
    """Cross-entropy of the final distribution plus the averaged hinge terms.

    Every non-final exit contributes max(0, best_wrong - p_true + margin),
    pushing the true-class probability a safety margin above the runner-up.
    """
    num_classes = trace.final_distribution.shape[-1]
    (label,) = _check_labels(label, num_classes)
    ce = -np.log(trace.final_distribution[label])
    hinges = 0.0
    early = trace.per_exit_probs[:-1]
    for probs in early:
        best_wrong = np.max(np.delete(probs, label))
        hinges += max(0.0, best_wrong - probs[label] + margin)
    return float(ce + hinges / len(early))


def _hinge_terms(probs: np.ndarray, y: np.ndarray):
    """Vectorised hinge pieces for one exit: slack and the best-wrong index."""
    n = probs.shape[0]
    rows = np.arange(n)
    masked = probs.copy()
    masked[rows, y] = -np.inf
    wrong_idx = masked.argmax(axis=1)
    slack = masked[rows, wrong_idx] - probs[rows, y]
    return slack, wrong_idx


def loss_and_grads(
    net: RecursiveEENetwork, x: np.ndarray, y: np.ndarray, margin: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean margin loss over the batch and its gradient for every parameter.

    Reverse-mode through the mass recursion, the sigmoids and the hinge;
    hinge and ReLU subgradients at their kinks are taken as 0.
    """
    x = net._check_input(x)
    y = _check_labels(y, net.config.num_classes)
    if x.shape[0] != y.shape[0]:
        raise ValueError("batch size mismatch between inputs and labels")
    n = x.shape[0]
    cfg = net.config
    cache = net._forward_cached(x)
    probs = cache["probs"]
    dist = cache["final_distribution"]
    rows = np.arange(n)
    num_early = cfg.num_exits - 1
    hinge_w = 1.0 / (num_early * n)

    # loss value
    logp = np.log(dist[rows, y])
    loss = -logp.mean()
    slacks, wrong_idx = [], []
    for t in range(num_early):
        slack, widx = _hinge_terms(probs[t], y)
        slacks.append(slack)
        wrong_idx.append(widx)
        loss += np.maximum(0.0, slack + margin).sum() * hinge_w

    grads = net.zero_grads()
    dh_blocks = [np.zeros((n, d)) for d in cfg.hidden_dims]

    # cross-entropy into the final classifier (the combined final vector has
    # no loss term of its own, so no gradient flows back through the folding)
    dzc = (dist - np.eye(cfg.num_classes)[y]) / n
    grads["final.W"] += dzc.T @ cache["hs"][-1]
    grads["final.b"] += dzc.sum(axis=0)
    dh_blocks[cfg.num_blocks - 1] += dzc @ net.params["final.W"]

    # walk the recursion backwards, accumulating dL/df_t per exit
    df = np.zeros((n, cfg.num_classes))
    for t in range(num_early - 1, -1, -1):
        active = slacks[t] + margin > 0  # strict: subgradient 0 at the kink
        if np.any(active):
            idx = np.where(active)[0]
            df[idx, wrong_idx[t][idx]] += hinge_w
            df[idx, y[idx]] -= hinge_w
        info = cache["exits"][t]
        block = cfg.exit_indices[t]
        h = cache["hs"][block]
        if info["kind"] == "first":
            f = info["f"]
            dlogits = df * f * (1.0 - f)
            grads["exit0.predictor.W"] += dlogits.T @ info["e"]
            grads["exit0.predictor.b"] += dlogits.sum(axis=0)
            de = dlogits @ net.params["exit0.predictor.W"]
            df = np.zeros_like(df)  # nothing upstream of the first exit
        else:
            add, sub, f_prev = info["add"], info["sub"], info["f_prev"]
            dadd = df * (1.0 - f_prev)
            dsub = -df * f_prev
            df = df * (1.0 - add - sub)
            dz_add = dadd * add * (1.0 - add)
            dz_sub = dsub * sub * (1.0 - sub)
            grads[f"exit{t}.mass_add.W"] += dz_add.T @ info["e"]
            grads[f"exit{t}.mass_add.b"] += dz_add.sum(axis=0)
            grads[f"exit{t}.mass_sub.W"] += dz_sub.T @ info["e"]
            grads[f"exit{t}.mass_sub.b"] += dz_sub.sum(axis=0)
            de = dz_add @ net.params[f"exit{t}.mass_add.W"] + dz_sub @ net.params[f"exit{t}.mass_sub.W"]
        da = de * (info["a"] > 0)
        grads[f"exit{t}.feature.W"] += da.T @ h
        grads[f"exit{t}.feature.b"] += da.sum(axis=0)
        dh_blocks[block - 1] += da @ net.params[f"exit{t}.feature.W"]

    net._blocks_backward(cache["zs"], cache["hs"], dh_blocks, grads)
    return float(loss), grads


def batch_mean_loss(net: RecursiveEENetwork, x: np.ndarray, y: np.ndarray, margin: float) -> float:
    """Forward-only mean margin loss (used by finite-difference checks)."""
    x = net._check_input(x)
    y = _check_labels(y, net.config.num_classes)
    cache = net._forward_cached(x)
    rows = np.arange(x.shape[0])
    loss = -np.log(cache["final_distribution"][rows, y]).mean()
    num_early = net.config.num_exits - 1
    for t in range(num_early):
        slack, _ = _hinge_terms(cache["probs"][t], y)
        loss += np.maximum(0.0, slack + margin).sum() / (num_early * x.shape[0])
    return float(loss)


def loss_gradient(
    net: RecursiveEENetwork, x: np.ndarray, y: int, margin: float
) -> dict[str, np.ndarray]:
    """Gradient bundle for a single sample."""
    _, grads = loss_and_grads(net, np.atleast_2d(np.asarray(x, dtype=np.float64)), [y], margin)
    return grads


# ---------------------------------------------------------------------------
# baseline multi-softmax network


class MultiExitNetwork(_ExitNetworkBase):
    """Baseline with an independent softmax classifier at every exit, trained
    with the equal-weight sum of per-exit cross-entropies."""

    model_kind = "multi_exit"

    @classmethod
    def _init_heads(cls, config, params, rng):
        for t, block in enumerate(config.exit_indices):
            width = config.hidden_dims[block - 1]
            if t == config.num_exits - 1:
                params["final.W"], params["final.b"] = _affine_init(
                    config.num_classes, width, rng
                )
                continue
            hd = config.head_dim(block)
            params[f"exit{t}.feature.W"], params[f"exit{t}.feature.b"] = _affine_init(hd, width, rng)
            params[f"exit{t}.predictor.W"], params[f"exit{t}.predictor.b"] = _affine_init(
                config.num_classes, hd, rng
            )

    def _head_macs(self, position: int) -> int:
        cfg = self.config
        block = cfg.exit_indices[position]
        width = cfg.hidden_dims[block - 1]
        if position == cfg.num_exits - 1:
            return width * cfg.num_classes
        hd = cfg.head_dim(block)
        return width * hd + hd * cfg.num_classes

    def _forward_cached(self, x: np.ndarray) -> dict:
        cfg = self.config
        zs, hs = self._blocks_forward(x)
        cache = {"zs": zs, "hs": hs, "exits": [], "probs": []}
        for t, block in enumerate(cfg.exit_indices):
            h = hs[block]
            if t == cfg.num_exits - 1:
                dist = softmax(h @ self.params["final.W"].T + self.params["final.b"])
                cache["exits"].append({"kind": "final", "dist": dist})
                cache["final_distribution"] = dist
                cache["probs"].append(dist)
                continue
            a = h @ self.params[f"exit{t}.feature.W"].T + self.params[f"exit{t}.feature.b"]
            e = relu(a)
            dist = softmax(e @ self.params[f"exit{t}.predictor.W"].T + self.params[f"exit{t}.predictor.b"])
            cache["exits"].append({"kind": "soft", "a": a, "e": e, "dist": dist})
            cache["probs"].append(dist)
        return cache

    def forward_batch(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        x = self._check_input(x)
        cache = self._forward_cached(x)
        return cache["probs"], cache["final_distribution"]

    def forward(self, x: np.ndarray) -> PredictionTrace:
        probs, dist = self.forward_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        per_exit = [p[0] for p in probs]
        margins = np.array([margins_from_probs(p) for p in per_exit])
        return PredictionTrace(per_exit, margins, dist[0])


def multi_exit_loss_and_grads(
    net: MultiExitNetwork, x: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean of per-exit cross-entropies and its gradients."""
    x = net._check_input(x)
    y = _check_labels(y, net.config.num_classes)
    n = x.shape[0]
    cfg = net.config
    cache = net._forward_cached(x)
    rows = np.arange(n)
    onehot = np.eye(cfg.num_classes)[y]
    w = 1.0 / (cfg.num_exits * n)

    loss = 0.0
    grads = net.zero_grads()
    dh_blocks = [np.zeros((n, d)) for d in cfg.hidden_dims]
    for t, block in enumerate(cfg.exit_indices):
        info = cache["exits"][t]
        dist = info["dist"]
        loss += -np.log(dist[rows, y]).sum() * w
        dz = (dist - onehot) * w
        if info["kind"] == "final":
            grads["final.W"] += dz.T @ cache["hs"][-1]
            grads["final.b"] += dz.sum(axis=0)
            dh_blocks[cfg.num_blocks - 1] += dz @ net.params["final.W"]
            continue
        grads[f"exit{t}.predictor.W"] += dz.T @ info["e"]
        grads[f"exit{t}.predictor.b"] += dz.sum(axis=0)
        de = dz @ net.params[f"exit{t}.predictor.W"]
        da = de * (info["a"] > 0)
        grads[f"exit{t}.feature.W"] += da.T @ cache["hs"][block]
        grads[f"exit{t}.feature.b"] += da.sum(axis=0)
        dh_blocks[block - 1] += da @ net.params[f"exit{t}.feature.W"]
    net._blocks_backward(cache["zs"], cache["hs"], dh_blocks, grads)
    return float(loss), grads


# ---------------------------------------------------------------------------
# training


def _sgd(net, x, y, cfg: TrainConfig, grad_fn) -> list[float]:
    x = net._check_input(x)
    y = _check_labels(y, net.config.num_classes)
    if x.shape[0] == 0:
        raise TrainingError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.rng_seed)
    curve: list[float] = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = grad_fn(x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}")
            for key, g in grads.items():
                net.params[key] -= cfg.learning_rate * g
            batch_losses.append(loss)
        curve.append(float(np.mean(batch_losses)))
    return curve


def train_recursive(
    net: RecursiveEENetwork, x: np.ndarray, y: np.ndarray, cfg: TrainConfig
) -> tuple[RecursiveEENetwork, list[float]]:
    """Mini-batch SGD on the margin loss; mutates `net` in place and returns it
    together with the per-epoch mean training loss.  Deterministic per seed;
    epochs=0 leaves the parameters untouched."""
    margin = cfg.resolved_margin(net.config.num_classes)
    curve = _sgd(net, x, y, cfg, lambda xb, yb: loss_and_grads(net, xb, yb, margin))
    return net, curve


def train_multi_exit(
    net: MultiExitNetwork, x: np.ndarray, y: np.ndarray, cfg: TrainConfig
) -> tuple[MultiExitNetwork, list[float]]:
    """Mini-batch SGD on the summed per-exit cross-entropy (baseline scheme)."""
    curve = _sgd(net, x, y, cfg, lambda xb, yb: multi_exit_loss_and_grads(net, xb, yb))
    return net, curve


def accuracy_per_exit(net, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Classification accuracy of every exit's running prediction."""
    probs, _ = net.forward_batch(x)
    y = _check_labels(y, net.config.num_classes)
    return np.array([(p.argmax(axis=1) == y).mean() for p in probs])
