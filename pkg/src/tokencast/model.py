"""The composed forecaster and its ablation variants.

Pipeline: per-window channel normalization, channel-as-token embedding,
prompt alignment, the frozen adapted trunk, linear projection to the
horizon, de-normalization. Variants switch parts of that pipeline:

  full              everything
  v1_no_align       alignment removed, tokens go straight to the trunk
  v2_prefix_prompt  no cross-attention; prompt rows prepended as a prefix
  v3_static_lora    adapters always on for every module, no routers
  v4_frozen         trunk only, no adapters at all

Every component draws its initialization from a generator keyed by the run
seed and the component's name, so two variants built from the same seed
hold bit-identical copies of every component they share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dlora
from . import rng
from . import tensor as T
from .alignment import CrossAttention, PromptEmbedding
from .backbone import Backbone, BackboneConfig
from .config import RunConfig, VARIANTS
from .dlora import (
    MODULE_NAMES,
    LoraAdapter,
    LoraRouter,
    RoutingStats,
    accumulate_stats,
    pool_last_token,
    top_n_gates_rows,
)
from .embedding import OutputHead, TsEmbedder, denormalize, instance_normalize
from .tensor import ShapeError, Tensor


@dataclass
class ForwardOutput:
    pred: Tensor
    stats: RoutingStats | None


class Forecaster:
    def __init__(self, cfg: RunConfig):
        if cfg.variant not in VARIANTS:
            raise ShapeError(f"unknown variant '{cfg.variant}'")
        self.cfg = cfg
        self.variant = cfg.variant
        bb_cfg = BackboneConfig(
            layers=cfg.layers, dim=cfg.dim, heads=cfg.heads, ffn_dim=cfg.ffn_dim,
            causal_mask=cfg.causal_mask, pretrain_mode=cfg.pretrain_mode,
        )
        self.backbone = Backbone(bb_cfg, cfg.seed)
        self.embedder = TsEmbedder(cfg.lookback, cfg.dim, cfg.seed)
        self.head = OutputHead(cfg.dim, cfg.horizon, cfg.seed)

        self.uses_alignment = self.variant in ("full", "v3_static_lora", "v4_frozen")
        self.uses_prompt = self.variant != "v1_no_align"
        self.uses_adapters = self.variant in ("full", "v1_no_align", "v2_prefix_prompt",
                                              "v3_static_lora")
        self.uses_routers = self.variant in ("full", "v1_no_align", "v2_prefix_prompt")

        self.cross = (
            CrossAttention(cfg.dim, cfg.align_heads, cfg.seed)
            if self.uses_alignment else None
        )
        self.prompt = (
            PromptEmbedding(cfg.dim, cfg.prompt_buckets, cfg.seed)
            if self.uses_prompt else None
        )
        dataset = cfg.dataset_name or (
            cfg.synthetic if cfg.data_kind == "synthetic" else "series"
        )
        self.prompt_text = cfg.prompt_template.format(
            dataset=dataset, horizon=cfg.horizon, frequency=cfg.frequency
        )

        dims = {
            "q_proj": (cfg.dim, cfg.dim), "k_proj": (cfg.dim, cfg.dim),
            "v_proj": (cfg.dim, cfg.dim), "o_proj": (cfg.dim, cfg.dim),
            "gate_proj": (cfg.dim, cfg.ffn_dim), "up_proj": (cfg.dim, cfg.ffn_dim),
            "down_proj": (cfg.ffn_dim, cfg.dim),
        }
        self.adapters: list[dict[str, LoraAdapter]] = []
        if self.uses_adapters:
            for layer in range(cfg.layers):
                gen = rng.generator(cfg.seed, f"adapters:{layer}")
                self.adapters.append({
                    name: LoraAdapter(f"block{layer}.{name}", d_in, d_out, cfg.rank, gen)
                    for name, (d_in, d_out) in dims.items()
                })
        self.routers: list[LoraRouter] = []
        if self.uses_routers:
            self.routers = [
                LoraRouter(cfg.dim, cfg.n_active, layer, cfg.seed,
                           activation=cfg.router_activation)
                for layer in range(cfg.layers)
            ]

    # ------------------------------------------------------------- forward

    def _prompt_rows(self) -> Tensor:
        return self.prompt.encode(self.prompt_text, self.cfg.prompt_max_tokens)

    def forward_batch(self, batch, want_stats: bool = False) -> tuple[Tensor, RoutingStats | None]:
        """Forecast a WindowBatch; returns de-normalized predictions."""
        return self.forward_array(batch.x, want_stats)

    def forward_array(self, x: np.ndarray, want_stats: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected (batch, channels, lookback), got {x.shape}")
        if self.cfg.normalize:
            xn, norm_stats = instance_normalize(x)
        else:
            xn, norm_stats = x, None
        tokens = self.embedder.embed(Tensor(xn))  # (B, N, dim)

        prefix_len = 0
        if self.variant == "v2_prefix_prompt":
            rows = self._prompt_rows()  # (P, dim)
            prefix_len = rows.shape[0]
            b = tokens.shape[0]
            lift = Tensor(np.zeros((b, prefix_len, self.cfg.dim)))
            prompt_b = T.add(lift, rows)  # broadcast rows across the batch
            h = T.concat([prompt_b, tokens], axis=1)
        elif self.uses_alignment:
            h = self.cross.align(tokens, self._prompt_rows())
        else:
            h = tokens

        prob_rows: list[np.ndarray] = []
        phat_nodes: list[Tensor] = []
        for i, block in enumerate(self.backbone.blocks):
            adapters = self.adapters[i] if self.uses_adapters else None
            gates = None
            if self.uses_routers:
                pooled = pool_last_token(h)
                probs = self.routers[i].probs(pooled)  # (B, 7)
                gate_rows = top_n_gates_rows(probs.data, self.cfg.n_active)
                gates = {name: gate_rows[:, j] for j, name in enumerate(MODULE_NAMES)}
                prob_rows.append(probs.data)
                phat_nodes.append(T.mean(probs, axis=0))
            elif self.variant == "v3_static_lora":
                gates = {name: 1.0 for name in MODULE_NAMES}
            h = block.forward(h, adapters, gates)

        if prefix_len:
            h = h[:, prefix_len:, :]
        pred = self.head.project(h)
        if norm_stats is not None:
            pred = denormalize(pred, norm_stats)

        stats = None
        if want_stats and self.uses_routers:
            stats = accumulate_stats(prob_rows, self.cfg.n_active, phat_nodes)
        return pred, stats

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward outside any tape: plain arrays in, plain arrays out."""
        pred, _ = self.forward_array(x)
        return pred.data

    def collect_routing_stats(self, windows, batch_size: int = 64) -> RoutingStats:
        """Aggregate routing frequencies over every window of a WindowSet.

        Per-batch stats merge exactly: frequencies and mean probabilities
        are sample-weighted averages of the batch values.
        """
        if not self.uses_routers:
            raise ShapeError(f"variant '{self.variant}' has no routers")
        f_sum = np.zeros((self.cfg.layers, dlora.N_MODULES))
        p_sum = np.zeros((self.cfg.layers, dlora.N_MODULES))
        samples = 0
        for lo in range(0, windows.count, batch_size):
            idx = np.arange(lo, min(lo + batch_size, windows.count))
            batch = windows.batch(idx)
            _, stats = self.forward_batch(batch, want_stats=True)
            f_sum += stats.f * len(idx)
            p_sum += stats.phat * len(idx)
            samples += len(idx)
        return RoutingStats(f=f_sum / samples, phat=p_sum / samples,
                            samples=samples, n_active=self.cfg.n_active)

    # ---------------------------------------------------------- bookkeeping

    def routed_layers(self) -> int:
        return self.cfg.layers if self.uses_routers else 0

    def layer_count(self) -> int:
        return self.cfg.layers

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.embedder.params("embedder"))
        if self.cross is not None:
            out.update(self.cross.params("align"))
        if self.prompt is not None:
            out.update(self.prompt.params("prompt"))
        out.update(self.backbone.tensors("backbone"))
        for i, adapters in enumerate(self.adapters):
            for name, ad in adapters.items():
                out[f"adapters.block{i}.{name}.down"] = ad.down
                out[f"adapters.block{i}.{name}.up"] = ad.up
        for i, router in enumerate(self.routers):
            out.update(router.params(f"routers.block{i}"))
        out.update(self.head.params("head"))
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def parameter_report(self) -> dict:
        """Parameter counts by component plus the trainable fraction."""
        groups = {"backbone": 0, "embedder": 0, "alignment": 0, "adapters": 0,
                  "routers": 0, "head": 0}
        for name, p in self.named_parameters().items():
            if name.startswith("backbone."):
                groups["backbone"] += p.size
            elif name.startswith("embedder."):
                groups["embedder"] += p.size
            elif name.startswith(("align.", "prompt.")):
                groups["alignment"] += p.size
            elif name.startswith("adapters."):
                groups["adapters"] += p.size
            elif name.startswith("routers."):
                groups["routers"] += p.size
            elif name.startswith("head."):
                groups["head"] += p.size
        total = sum(groups.values())
        trainable = sum(p.size for p in self.trainable().values())
        return {
            **groups,
            "total": total,
            "trainable": trainable,
            "trainable_fraction": trainable / total if total else 0.0,
        }


def trainable_fraction_estimate(cfg: RunConfig) -> float:
    """Closed-form trainable fraction for a config, no tensors allocated."""
    d, f, L, r = cfg.dim, cfg.ffn_dim, cfg.layers, cfg.rank
    backbone = L * (4 * (d * d + d) + 2 * (d * f + f) + (f * d + d) + 2 * d)
    embedder = cfg.lookback * 2 * d + 2 * d + 2 * d * d + d
    alignment = 4 * d * d + cfg.prompt_buckets * d
    adapters = L * (4 * (d * r + r * d) + 2 * (d * r + r * f) + (f * r + r * d))
    routers = L * d * 7
    head = d * cfg.horizon + cfg.horizon
    variant = cfg.variant
    if variant == "v1_no_align":
        alignment = 0
    if variant == "v2_prefix_prompt":
        alignment = cfg.prompt_buckets * d
    if variant == "v4_frozen":
        adapters = routers = 0
    if variant == "v3_static_lora":
        routers = 0
    trainable = embedder + alignment + adapters + routers + head
    return trainable / (trainable + backbone)
