"""Low-rank adapters with per-sample top-n routing over the seven linears.

Every block linear can carry an adapter: x' = x W + g * (x A) B + b, with
g a binary gate chosen per sample by that layer's router. The product A B
is never materialized; the adapter path is two thin matmuls. Gates are
constants to the gradient tape, so router weights learn only through the
load-balance term, which is built from the differentiable mean gate
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .tensor import ShapeError, Tensor

MODULE_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
N_MODULES = len(MODULE_NAMES)
ADAPTER_INIT_STD = 0.02
ROUTER_INIT_STD = 0.02


class LoraAdapter:
    """Rank-r factors for one linear: down (d_in, r) Gaussian, up (r, d_out) zero."""

    def __init__(self, name: str, d_in: int, d_out: int, r: int, gen: np.random.Generator):
        if r < 1:
            raise ShapeError(f"adapter '{name}': rank must be positive, got {r}")
        if r > min(d_in, d_out) // 2:
            raise ShapeError(
                f"adapter '{name}': rank {r} exceeds min({d_in}, {d_out})/2; "
                "a low-rank update must stay thin"
            )
        self.name = name
        self.rank = r
        self.down = T.parameter(rng.gaussian(gen, (d_in, r), ADAPTER_INIT_STD))
        self.up = T.parameter(np.zeros((r, d_out)))

    def delta(self, x: Tensor) -> Tensor:
        """The low-rank correction (x @ down) @ up, shaped like x @ W."""
        return T.matmul(T.matmul(x, self.down), self.up)

    def param_count(self) -> int:
        return self.down.size + self.up.size


def apply(x: Tensor, weight: Tensor, bias: Tensor | None,
          adapter: LoraAdapter | None, gate) -> Tensor:
    """Adapted linear map: x W + g * (x A) B + b.

    `gate` may be None (no adapter path), a scalar, or a per-sample array
    broadcastable against the output; it is always a constant to the tape.
    """
    out = T.matmul(x, weight)
    if adapter is not None and gate is not None:
        mask = np.asarray(gate, dtype=np.float64)
        if mask.size == 1 and float(mask.reshape(-1)[0]) == 0.0:
            pass  # fully closed gate contributes exactly zero
        elif mask.ndim == 1 and np.all(mask == 0.0):
            pass
        else:
            delta = adapter.delta(x)
            if mask.ndim == 0:
                gated = T.scale(delta, float(mask))
            else:
                # per-sample gates lead, singleton axes broadcast over the rest
                mask = mask.reshape(mask.shape + (1,) * (delta.ndim - mask.ndim))
                gated = T.mul(delta, Tensor(mask))
            out = T.add(out, gated)
    if bias is not None:
        out = T.add(out, bias)
    return out


class LoraRouter:
    """Per-layer gate chooser: probs = softmax(tanh(pooled) @ weight)."""

    def __init__(self, dim: int, n_active: int, layer: int, seed: int,
                 activation: str = "tanh"):
        if not (1 <= n_active <= N_MODULES):
            raise ShapeError(f"n_active must be in [1, {N_MODULES}], got {n_active}")
        if activation not in ("tanh", "identity"):
            raise ShapeError(f"unknown router activation '{activation}'")
        gen = rng.generator(seed, f"router:{layer}")
        self.dim = dim
        self.n_active = n_active
        self.layer = layer
        self.activation = activation
        self.weight = T.parameter(rng.gaussian(gen, (dim, N_MODULES), ROUTER_INIT_STD))

    def probs(self, pooled: Tensor) -> Tensor:
        """(B, dim) or (dim,) pooled states -> gate probabilities over modules."""
        h = T.tanh(pooled) if self.activation == "tanh" else pooled
        return T.softmax(T.matmul(T.reshape(h, (-1, self.dim)), self.weight), axis=-1)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight}


def pool_last_token(h: Tensor) -> Tensor:
    """Last token row of (.., N, dim): the routing summary of the sequence."""
    if h.ndim == 2:
        n = h.shape[0]
        return T.reshape(h[n - 1 : n, :], (h.shape[1],))
    n = h.shape[1]
    return T.reshape(h[:, n - 1 : n, :], (h.shape[0], h.shape[2]))


def top_n_gates(probs: np.ndarray, n: int) -> np.ndarray:
    """Binary gate vector keeping the n most probable modules.

    Ties break toward the lower index (stable sort on descending prob),
    so a uniform distribution opens modules 0..n-1 deterministically.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] != N_MODULES:
        raise ShapeError(f"expected {N_MODULES} probabilities, got shape {probs.shape}")
    order = np.argsort(-probs, kind="stable")
    gates = np.zeros(N_MODULES)
    gates[order[:n]] = 1.0
    return gates


def top_n_gates_rows(probs: np.ndarray, n: int) -> np.ndarray:
    """Row-wise top-n gates for a (B, N_MODULES) probability matrix."""
    order = np.argsort(-probs, axis=1, kind="stable")
    gates = np.zeros_like(probs)
    np.put_along_axis(gates, order[:, :n], 1.0, axis=1)
    return gates


@dataclass
class RouterDecision:
    """One sample's routing outcome at one layer."""

    layer: int
    probs: np.ndarray  # (N_MODULES,)
    gates: np.ndarray  # (N_MODULES,) binary

    def active_modules(self) -> list[str]:
        return [MODULE_NAMES[i] for i in range(N_MODULES) if self.gates[i] == 1.0]


def route(pooled: np.ndarray, router: LoraRouter) -> RouterDecision:
    """Route a single pooled vector. Forward-only; never recorded on a tape."""
    pooled = np.asarray(pooled, dtype=np.float64).reshape(-1)
    if pooled.shape[0] != router.dim:
        raise ShapeError(f"pooled dim {pooled.shape[0]} != router dim {router.dim}")
    probs = router.probs(Tensor(pooled)).data.reshape(-1)
    return RouterDecision(layer=router.layer, probs=probs,
                          gates=top_n_gates(probs, router.n_active))


@dataclass
class RoutingStats:
    """Per-layer activation frequencies f and mean probabilities p-hat.

    `phat_nodes` holds the live tape tensors when the stats were collected
    during a recorded forward; load_balance_loss uses them so the balance
    term stays differentiable. f rows are argmax frequencies and always
    constants.
    """

    f: np.ndarray  # (L, N_MODULES)
    phat: np.ndarray  # (L, N_MODULES)
    samples: int
    n_active: int
    phat_nodes: list[Tensor] | None = field(default=None, repr=False)

    def entropy_bits(self) -> np.ndarray:
        """Shannon entropy of each layer's mean gate probabilities."""
        p = np.clip(self.phat, 1e-300, 1.0)
        return -(p * np.log2(p)).sum(axis=1)

    def to_json_dict(self) -> dict:
        return {
            "n_active": self.n_active,
            "samples": self.samples,
            "layers": [
                {
                    "layer": i,
                    "frequency": {m: float(self.f[i, j]) for j, m in enumerate(MODULE_NAMES)},
                    "mean_prob": {m: float(self.phat[i, j]) for j, m in enumerate(MODULE_NAMES)},
                    "entropy_bits": float(self.entropy_bits()[i]),
                }
                for i in range(self.f.shape[0])
            ],
        }


def accumulate_stats(prob_rows: list[np.ndarray], n_active: int,
                     phat_nodes: list[Tensor] | None = None) -> RoutingStats:
    """Fold per-layer (B, N_MODULES) probability batches into RoutingStats."""
    if not prob_rows:
        raise ShapeError("no probability rows to accumulate")
    f_rows, p_rows = [], []
    batch = prob_rows[0].shape[0]
    for rows in prob_rows:
        if rows.ndim != 2 or rows.shape[1] != N_MODULES:
            raise ShapeError(f"expected (B, {N_MODULES}) probabilities, got {rows.shape}")
        winners = np.argmax(rows, axis=1)
        f_rows.append(np.bincount(winners, minlength=N_MODULES) / rows.shape[0])
        p_rows.append(rows.mean(axis=0))
    return RoutingStats(
        f=np.stack(f_rows), phat=np.stack(p_rows), samples=batch,
        n_active=n_active, phat_nodes=phat_nodes,
    )


def load_balance_loss(stats: RoutingStats) -> Tensor:
    """N_MODULES * sum over layers and modules of f_i * phat_i.

    Equals the layer count exactly when both distributions are uniform and
    N_MODULES * layers when routing collapses onto a single module.
    Differentiable through phat when live tape nodes are attached.
    """
    if stats.phat_nodes is not None:
        terms = [
            T.total(T.mul(Tensor(stats.f[i]), node))
            for i, node in enumerate(stats.phat_nodes)
        ]
        acc = terms[0]
        for t in terms[1:]:
            acc = T.add(acc, t)
        return T.scale(acc, float(N_MODULES))
    return Tensor(N_MODULES * float((stats.f * stats.phat).sum()))
