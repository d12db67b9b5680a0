"""Frozen transformer stack operating on channel tokens.

Each block is pre-norm: RMS-normalized multi-head self-attention over the
token axis, then an RMS-normalized gated feed-forward, both residual.
Attention is bidirectional by default because channel tokens carry no
temporal order; a causal flag exists for ablation. Any of the seven
linears can carry a low-rank adapter chosen per sample by a router.

The stack is a stand-in for a pretrained language-model trunk at desk
scale: either randomly initialized and frozen, or briefly pretrained on
synthetic next-window prediction and then frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import dlora
from . import rng
from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_STD = 0.02
NORM_EPS = 1e-6
MASK_FILL = -1e30


@dataclass
class BackboneConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    causal_mask: bool = False
    pretrain_mode: str = "random_frozen"  # or "pretrain_then_freeze"

    def __post_init__(self):
        if self.layers < 0:
            raise ShapeError(f"layers must be >= 0, got {self.layers}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            raise ShapeError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.ffn_dim < 1:
            raise ShapeError(f"ffn_dim must be positive, got {self.ffn_dim}")
        if self.pretrain_mode not in ("random_frozen", "pretrain_then_freeze"):
            raise ShapeError(f"unknown pretrain_mode '{self.pretrain_mode}'")


def module_dims(cfg: BackboneConfig) -> dict[str, tuple[int, int]]:
    d, f = cfg.dim, cfg.ffn_dim
    return {
        "q_proj": (d, d),
        "k_proj": (d, d),
        "v_proj": (d, d),
        "o_proj": (d, d),
        "gate_proj": (d, f),
        "up_proj": (d, f),
        "down_proj": (f, d),
    }


class TransformerBlock:
    def __init__(self, cfg: BackboneConfig, gen: np.random.Generator):
        self.cfg = cfg
        self.head_dim = cfg.dim // cfg.heads
        self.weights: dict[str, Tensor] = {}
        self.biases: dict[str, Tensor] = {}
        for name, (d_in, d_out) in module_dims(cfg).items():
            self.weights[name] = T.parameter(rng.gaussian(gen, (d_in, d_out), INIT_STD))
            self.biases[name] = T.parameter(np.zeros(d_out))
        self.attn_norm = T.parameter(np.ones(cfg.dim))
        self.ffn_norm = T.parameter(np.ones(cfg.dim))

    def _linear(self, x, name, adapters, gates):
        adapter = adapters.get(name) if adapters else None
        gate = gates.get(name) if gates else None
        return dlora.apply(x, self.weights[name], self.biases[name], adapter, gate)

    def forward(self, h: Tensor, adapters=None, gates=None) -> Tensor:
        """One block pass over (.., N, dim) token states."""
        if h.shape[-1] != self.cfg.dim:
            raise ShapeError(f"block dim {self.cfg.dim} does not match input {h.shape}")
        x = T.rmsnorm(h, self.attn_norm, NORM_EPS)
        q = self._linear(x, "q_proj", adapters, gates)
        k = self._linear(x, "k_proj", adapters, gates)
        v = self._linear(x, "v_proj", adapters, gates)
        n = h.shape[-2]
        scale = 1.0 / np.sqrt(self.head_dim)
        mask = None
        if self.cfg.causal_mask and n > 1:
            mask = Tensor(np.triu(np.full((n, n), MASK_FILL), k=1))
        full = (slice(None),) * (h.ndim - 1)
        ctx_heads = []
        for i in range(self.cfg.heads):
            cols = slice(i * self.head_dim, (i + 1) * self.head_dim)
            qh = q[full + (cols,)]
            kh = k[full + (cols,)]
            vh = v[full + (cols,)]
            kt = T.transpose(kh, (0, 2, 1)) if h.ndim == 3 else T.transpose(kh)
            scores = T.scale(T.matmul(qh, kt), scale)
            if mask is not None:
                scores = T.add(scores, mask)
            attn = T.softmax(scores, axis=-1)
            ctx_heads.append(T.matmul(attn, vh))
        ctx = T.concat(ctx_heads, axis=-1)
        h = T.add(h, self._linear(ctx, "o_proj", adapters, gates))

        x2 = T.rmsnorm(h, self.ffn_norm, NORM_EPS)
        gated = T.silu(self._linear(x2, "gate_proj", adapters, gates))
        up = self._linear(x2, "up_proj", adapters, gates)
        ffn = self._linear(T.mul(gated, up), "down_proj", adapters, gates)
        return T.add(h, ffn)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in dlora.MODULE_NAMES:
            out[f"{prefix}.{name}.weight"] = self.weights[name]
            out[f"{prefix}.{name}.bias"] = self.biases[name]
        out[f"{prefix}.attn_norm"] = self.attn_norm
        out[f"{prefix}.ffn_norm"] = self.ffn_norm
        return out


class Backbone:
    """A stack of blocks, frozen after construction or after pretraining."""

    def __init__(self, cfg: BackboneConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        gen = rng.generator(seed, "backbone")
        self.blocks = [TransformerBlock(cfg, gen) for _ in range(cfg.layers)]
        self.frozen = False
        if cfg.pretrain_mode == "random_frozen":
            self.freeze()

    def forward(self, h0: Tensor, adapters_per_layer=None, gates_per_layer=None
                ) -> tuple[Tensor, list[Tensor]]:
        """Run all blocks; also return each block's input state for routing."""
        h = h0
        pre_states = []
        for i, block in enumerate(self.blocks):
            pre_states.append(h)
            adapters = adapters_per_layer[i] if adapters_per_layer else None
            gates = gates_per_layer[i] if gates_per_layer else None
            h = block.forward(h, adapters, gates)
        return h, pre_states

    def tensors(self, prefix: str = "backbone") -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.tensors(f"{prefix}.block{i}"))
        return out

    def freeze(self):
        """Disable gradients; frozen tensors never get grad buffers."""
        for t in self.tensors().values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True

    def unfreeze(self):
        for t in self.tensors().values():
            t.requires_grad = True
        self.frozen = False

    def checksum(self) -> str:
        """SHA-256 over all block tensors in name order; detects any drift."""
        digest = hashlib.sha256()
        for name in sorted(self.tensors()):
            digest.update(name.encode())
            digest.update(self.tensors()[name].data.tobytes())
        return digest.hexdigest()

    def frozen_tensor_count(self) -> int:
        return sum(1 for t in self.tensors().values() if not t.requires_grad)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors().values())


def expected_tensor_count(layers: int) -> int:
    # 7 linears carry weight+bias, plus 2 norm gains, per block
    return layers * (7 * 2 + 2)


def expected_parameter_count(cfg: BackboneConfig) -> int:
    per_block = sum(d_in * d_out + d_out for d_in, d_out in module_dims(cfg).values())
    per_block += 2 * cfg.dim
    return cfg.layers * per_block


def pretrain_then_freeze(backbone: Backbone, corpus_view, lookback: int,
                         horizon: int, steps: int, batch_size: int = 16,
                         lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Briefly train the stack on synthetic next-window prediction, then freeze.

    A throwaway embedder and head are fit jointly and discarded; only the
    block weights persist. Returns the per-step loss trace.
    """
    from .data import DataError, make_windows
    from .embedding import OutputHead, TsEmbedder, denormalize, instance_normalize
    from .training import AdamW

    if backbone.cfg.pretrain_mode != "pretrain_then_freeze":
        raise ShapeError("backbone was not configured for pretraining")
    windows = make_windows(corpus_view, lookback, horizon)
    if windows.count < 1:
        raise DataError("pretraining corpus has no usable windows")
    backbone.unfreeze()
    emb = TsEmbedder(lookback, backbone.cfg.dim, seed)
    head = OutputHead(backbone.cfg.dim, horizon, seed)
    params = dict(backbone.tensors())
    params.update(emb.params("pretrain_embedder"))
    params.update(head.params("pretrain_head"))
    opt = AdamW(params, lr=lr)
    gen = rng.generator(seed, "pretrain")
    losses = []
    for _ in range(steps):
        idx = gen.integers(0, windows.count, size=min(batch_size, windows.count))
        batch = windows.batch(idx)
        xn, stats = instance_normalize(batch.x)
        with T.Tape() as tape:
            tokens = emb.embed(Tensor(xn))
            hL, _ = backbone.forward(tokens)
            pred = denormalize(head.project(hL), stats)
            loss = T.mean(T.square(T.sub(pred, Tensor(batch.y))))
            tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    backbone.freeze()
    return losses
