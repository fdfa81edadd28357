"""Semantic decomposition: refine k learnable view tokens against local features.

Each aggregation block computes

    E_hat = softmax(Q K^T / sqrt(r_h)) V W_o + E_prev
    E     = E_hat + MLP(LayerNorm(E_hat))

with Q from the view tokens and K, V from the local features. After the last
block the global feature is added to every view and the result is layer
normalized. The pre-softmax logits of every block are kept for the variance
loss and for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .numerics import Parameter, ParamStore, Tensor


@dataclass
class AggregationBlockParams:
    W_Q: Parameter
    W_K: Parameter
    W_V: Parameter
    W_o: Parameter
    ln: tuple[Parameter, Parameter]
    mlp1: tuple[Parameter, Parameter]
    mlp2: tuple[Parameter, Parameter]


@dataclass
class SdmParams:
    E0: Parameter  # [k, r]
    blocks: list[AggregationBlockParams]
    out_ln: tuple[Parameter, Parameter]

    @property
    def k(self) -> int:
        return self.E0.shape[0]


@dataclass
class AggregationTrace:
    """Pre-softmax logits, one ``[..., k, n_tokens]`` tensor per block."""
    blocks: list[Tensor]

    def as_array(self) -> np.ndarray:
        return np.stack([b.data for b in self.blocks], axis=-3)


@dataclass
class ViewEmbeddings:
    B: Tensor  # [..., k, r]
    E_L: Tensor  # [..., k, r]


def init_sdm(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
             prefix: str) -> SdmParams:
    r, rh = cfg.r, cfg.head_dim
    E0 = store.add(f"{prefix}.E0", rng.standard_normal((cfg.k, r)))
    blocks = []
    for t in range(cfg.sdm_layers):
        p = f"{prefix}.blk{t}"
        blocks.append(AggregationBlockParams(
            W_Q=nx.init_affine(store, f"{p}.q", r, rh, rng, bias=False)[0],
            W_K=nx.init_affine(store, f"{p}.k", r, rh, rng, bias=False)[0],
            W_V=nx.init_affine(store, f"{p}.v", r, rh, rng, bias=False)[0],
            W_o=nx.init_affine(store, f"{p}.o", rh, r, rng, bias=False)[0],
            ln=nx.init_norm(store, f"{p}.ln", r),
            mlp1=nx.init_affine(store, f"{p}.mlp1", r, cfg.hidden, rng),
            mlp2=nx.init_affine(store, f"{p}.mlp2", cfg.hidden, r, rng, scale=0.1),
        ))
    return SdmParams(E0, blocks, nx.init_norm(store, f"{prefix}.out_ln", r))


def aggregation_block(E: Tensor, local: Tensor, blk: AggregationBlockParams):
    Q = nx.matmul(E, blk.W_Q)
    K = nx.matmul(local, blk.W_K)
    V = nx.matmul(local, blk.W_V)
    attended, logits = nx.scaled_attention(Q, K, V)
    E_hat = nx.add(nx.matmul(attended, blk.W_o), E)
    h = nx.affine(nx.gelu(nx.affine(nx.layer_norm(E_hat, *blk.ln), *blk.mlp1)), *blk.mlp2)
    return nx.add(E_hat, h), logits


def sdm_forward(local, global_feat, params: SdmParams,
                no_global: bool = False) -> tuple[ViewEmbeddings, AggregationTrace]:
    """Run the aggregation blocks and fuse the global feature.

    ``local`` is ``[n, r]`` (or ``[B, n, r]``) and ``global_feat`` is ``[r]``
    (or ``[B, r]``). The same function serves both modalities with their own
    parameters.
    """
    local = local if isinstance(local, Tensor) else Tensor(local)
    if local.shape[-2] < 1:
        raise nx.DimensionError("sdm_forward needs at least one local token")
    if local.shape[-1] != params.E0.shape[1]:
        raise nx.DimensionError(
            f"local features {local.shape} do not match view width {params.E0.shape}")
    E: Tensor = params.E0
    trace = []
    for blk in params.blocks:
        E, logits = aggregation_block(E, local, blk)
        trace.append(logits)
    if E.ndim < local.ndim:  # a zero-block stack never broadcasts E0 over the batch
        E = nx.add(E, nx.Tensor(np.zeros(local.shape[:-2] + E.shape)))
    E_L = E
    if no_global:
        fused = E_L
    else:
        g = global_feat if isinstance(global_feat, Tensor) else Tensor(global_feat)
        fused = nx.add(E_L, nx.reshape(g, g.shape[:-1] + (1, g.shape[-1])))
    B = nx.layer_norm(fused, *params.out_ln)
    return ViewEmbeddings(B=B, E_L=E_L), AggregationTrace(trace)


def redundancy_matrix(E_L) -> Tensor:
    """Cosine similarities between the rows of ``E_L`` ([..., k, k])."""
    U = nx.l2_normalize(E_L, axis=-1)
    return nx.matmul(U, nx.swapaxes(U, -1, -2))


def circular_variance(B) -> Tensor:
    """``1 - ||mean of unit-normalized rows||``; 0 means all rows point the same way."""
    U = nx.l2_normalize(B, axis=-1)
    return nx.sub(1.0, nx.norm(nx.mean(U, axis=-2), axis=-1))
