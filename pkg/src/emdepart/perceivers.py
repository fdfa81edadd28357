"""Image and text perceivers: project raw features into the shared width r.

The text encoder uses no positional encoding, so it treats a document as a
bag of tokens: permuting the input permutes the word outputs and leaves the
CLS output unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .numerics import Parameter, ParamStore, Tensor


@dataclass
class PerceivedImage:
    cls: Tensor  # [..., r]
    local: Tensor  # [..., n, r]


@dataclass
class PerceivedText:
    cls: Tensor  # [r]
    local: Tensor  # [m, r]


@dataclass
class ImagePerceiverParams:
    proj: tuple[Parameter, Parameter]
    mlp: list[tuple[Parameter, Parameter]]
    residual: bool = True


@dataclass
class EncoderBlockParams:
    ln1: tuple[Parameter, Parameter]
    qkv: tuple[Parameter, Parameter]  # fused [r, 3r]
    out: tuple[Parameter, Parameter]
    ln2: tuple[Parameter, Parameter]
    ff1: tuple[Parameter, Parameter]
    ff2: tuple[Parameter, Parameter]
    heads: int


@dataclass
class TextPerceiverParams:
    proj: tuple[Parameter, Parameter]
    cls_token: Parameter
    blocks: list[EncoderBlockParams]


def init_image_perceiver(store: ParamStore, r0: int, cfg: ModelConfig,
                         rng: np.random.Generator, prefix: str = "img") -> ImagePerceiverParams:
    proj = nx.init_affine(store, f"{prefix}.proj", r0, cfg.r, rng)
    mlp = []
    widths = [cfg.r] + [cfg.hidden] * (cfg.img_mlp_layers - 1) + [cfg.r]
    for i in range(cfg.img_mlp_layers):
        last = i == cfg.img_mlp_layers - 1
        mlp.append(nx.init_affine(store, f"{prefix}.mlp{i}", widths[i], widths[i + 1], rng,
                                  scale=0.1 if last else 1.0))
    return ImagePerceiverParams(proj, mlp, residual=not cfg.no_residual)


def image_perceive(raw, params: ImagePerceiverParams, dropout: float = 0.0,
                   rng: np.random.Generator | None = None,
                   training: bool = False) -> PerceivedImage:
    """Tokenwise ``y0 + MLP(y0)`` with ``y0`` the r0 -> r projection.

    ``raw`` is ``[n + 1, r0]`` or a batch ``[B, n + 1, r0]``; token 0 is the
    global token. Without the residual the output is ``MLP(y0)``.
    """
    y0 = nx.affine(raw, *params.proj)
    h = y0
    for i, (W, b) in enumerate(params.mlp):
        h = nx.affine(h, W, b)
        if i < len(params.mlp) - 1:
            h = nx.gelu(h)
    h = nx.dropout(h, dropout, rng, training)
    y = nx.add(y0, h) if params.residual else h
    return PerceivedImage(cls=y[..., 0, :], local=y[..., 1:, :])


def init_text_perceiver(store: ParamStore, word_dim: int, cfg: ModelConfig,
                        rng: np.random.Generator, prefix: str = "txt") -> TextPerceiverParams:
    r = cfg.r
    proj = nx.init_affine(store, f"{prefix}.proj", word_dim, r, rng)
    cls_token = store.add(f"{prefix}.cls", 0.1 * rng.standard_normal(r))
    blocks = []
    for i in range(cfg.enc_layers):
        p = f"{prefix}.enc{i}"
        blocks.append(EncoderBlockParams(
            ln1=nx.init_norm(store, f"{p}.ln1", r),
            qkv=nx.init_affine(store, f"{p}.qkv", r, 3 * r, rng),
            out=nx.init_affine(store, f"{p}.out", r, r, rng, scale=0.1),
            ln2=nx.init_norm(store, f"{p}.ln2", r),
            ff1=nx.init_affine(store, f"{p}.ff1", r, cfg.hidden, rng),
            ff2=nx.init_affine(store, f"{p}.ff2", cfg.hidden, r, rng, scale=0.1),
            heads=cfg.enc_heads,
        ))
    return TextPerceiverParams(proj, cls_token, blocks)


def self_attention(x: Tensor, blk: EncoderBlockParams) -> Tensor:
    """Multi-head self-attention over the rows of ``x`` ([L, r])."""
    L, r = x.shape
    h = blk.heads
    d = r // h
    qkv = nx.affine(x, *blk.qkv)  # [L, 3r]
    # [L, 3r] -> [L, 3h, d] -> [3h, L, d]
    qkv = nx.swapaxes(nx.reshape(qkv, (L, 3 * h, d)), 0, 1)
    q, k, v = qkv[:h], qkv[h:2 * h], qkv[2 * h:]
    out, _ = nx.scaled_attention(q, k, v)  # [h, L, d]
    out = nx.reshape(nx.swapaxes(out, 0, 1), (L, r))
    return nx.affine(out, *blk.out)


def encoder_block(x: Tensor, blk: EncoderBlockParams, dropout: float = 0.0,
                  rng=None, training: bool = False) -> Tensor:
    a = self_attention(nx.layer_norm(x, *blk.ln1), blk)
    x = nx.add(x, nx.dropout(a, dropout, rng, training))
    f = nx.affine(nx.gelu(nx.affine(nx.layer_norm(x, *blk.ln2), *blk.ff1)), *blk.ff2)
    return nx.add(x, nx.dropout(f, dropout, rng, training))


def text_perceive(tokens, params: TextPerceiverParams, dropout: float = 0.0,
                  rng: np.random.Generator | None = None,
                  training: bool = False) -> PerceivedText:
    """Project ``[m, word_dim]`` tokens, prepend CLS, run the encoder blocks."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise nx.DimensionError(f"text_perceive expects [m >= 1, dim], got {tokens.shape}")
    x = nx.affine(tokens, *params.proj)
    x = nx.concat([nx.reshape(params.cls_token, (1, -1)), x], axis=0)
    for blk in params.blocks:
        x = encoder_block(x, blk, dropout, rng, training)
    return PerceivedText(cls=x[0], local=x[1:])
