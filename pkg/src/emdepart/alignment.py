"""Set similarities between view-embedding sets and the four training losses.

Batched scoring works on a 2-D cosine matrix between all visual rows
``[B*k]`` and all textual rows ``[C*k]``; reshaping it to ``[B*k, C, k]``
exposes each (image, class) block without exceeding rank 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import AlignmentConfig, ModelConfig
from .numerics import Parameter, ParamStore, Tensor
from .sdm import redundancy_matrix


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def cosine_blocks(B_V, B_T) -> Tensor:
    """Cosines between every visual row and every textual row.

    ``B_V`` is ``[B, k, r]`` and ``B_T`` is ``[C, k, r]``; the result is
    ``[B*k, C*k]`` with row ``b*k + i`` and column ``c*k + j`` holding
    ``cos(B_V[b, i], B_T[c, j])``.
    """
    B_V, B_T = _t(B_V), _t(B_T)
    if B_V.shape[-1] != B_T.shape[-1]:
        raise nx.DimensionError(f"embedding widths differ: {B_V.shape} vs {B_T.shape}")
    U = nx.l2_normalize(nx.reshape(B_V, (-1, B_V.shape[-1])), axis=-1)
    W = nx.l2_normalize(nx.reshape(B_T, (-1, B_T.shape[-1])), axis=-1)
    return nx.matmul(U, nx.swapaxes(W, 0, 1))


def top_cos_masks(cos: np.ndarray, nb: int, kv: int, nc: int, kt: int,
                  p: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-p partner masks for a ``[nb*kv, nc*kt]`` cosine matrix.

    The first mask marks, for each visual row, its ``p`` best textual rows
    inside each class block; the second marks, for each textual row, its
    ``p`` best visual rows inside each image block. Ties go to the lower index.
    """
    if not (1 <= p <= kv and p <= kt):
        raise ValueError(f"p={p} out of range for set sizes ({kv}, {kt})")
    c4 = cos.reshape(nb, kv, nc, kt)
    vis = np.zeros(c4.shape, dtype=bool)
    order = np.argsort(-c4, axis=3, kind="stable")[..., :p]
    np.put_along_axis(vis, order, True, axis=3)
    txt = np.zeros(c4.shape, dtype=bool)
    order = np.argsort(-c4, axis=1, kind="stable")[:, :p]
    np.put_along_axis(txt, order, True, axis=1)
    return vis.reshape(cos.shape), txt.reshape(cos.shape)


def set_scores(B_V, B_T, variant: str = "smooth_chamfer", p: int | None = None) -> Tensor:
    """``[B, C]`` set similarity between each image's views and each class's views.

    ``p`` restricts every log-sum-exp to the top-p partners (partial score);
    ``p = None`` or ``p = k`` gives the plain smooth chamfer similarity.
    """
    B_V, B_T = _t(B_V), _t(B_T)
    if B_V.ndim == 2:
        B_V = nx.reshape(B_V, (1,) + B_V.shape)
    if B_T.ndim == 2:
        B_T = nx.reshape(B_T, (1,) + B_T.shape)
    nb, kv, _ = B_V.shape
    nc, kt, _ = B_T.shape
    if kv != kt:
        raise nx.DimensionError(f"view counts differ: {kv} vs {kt}")
    k = kv
    cos = cosine_blocks(B_V, B_T)
    return scores_from_cosine(cos, nb, nc, k, variant, p)


def scores_from_cosine(cos: Tensor, nb: int, nc: int, k: int,
                       variant: str = "smooth_chamfer", p: int | None = None) -> Tensor:
    cos_t = nx.swapaxes(cos, 0, 1)  # [C*k, B*k]
    if variant == "smooth_chamfer":
        E = nx.exp(cos)
        E_t = nx.exp(cos_t)
        if p is not None and p < k:
            vis, txt = top_cos_masks(cos.data, nb, k, nc, k, p)
            E = nx.mul(E, vis)
            E_t = nx.mul(E_t, txt.T)
        row = nx.log(nx.tsum(nx.reshape(E, (nb * k, nc, k)), axis=2))  # [B*k, C]
        col = nx.log(nx.tsum(nx.reshape(E_t, (nc * k, nb, k)), axis=2))  # [C*k, B]
    elif variant == "maximum":
        row = nx.tmax(nx.reshape(cos, (nb * k, nc, k)), axis=2)
        col = nx.tmax(nx.reshape(cos_t, (nc * k, nb, k)), axis=2)
    elif variant == "average":
        m = nx.mean(nx.reshape(cos, (nb * k, nc, k)), axis=2)
        return nx.mean(nx.reshape(m, (nb, k, nc)), axis=1)
    else:
        raise ValueError(f"unknown similarity variant {variant!r}")
    row = nx.tsum(nx.reshape(row, (nb, k, nc)), axis=1)
    col = nx.tsum(nx.reshape(col, (nc, k, nb)), axis=1)
    return nx.mul(nx.add(row, nx.swapaxes(col, 0, 1)), 1.0 / (2 * k))


# -- single-instance API ----------------------------------------------------------

def lse(b, B) -> float:
    """log sum_j exp(cos(b, B[j]))."""
    b, B = np.asarray(b, dtype=np.float64), np.atleast_2d(np.asarray(B, dtype=np.float64))
    cos = cosine_blocks(b.reshape(1, 1, -1), B.reshape(1, *B.shape))
    return float(nx.log(nx.tsum(nx.exp(cos))).data)


def smooth_chamfer(B_T, B_V) -> float:
    return float(set_scores(B_V, B_T).data[0, 0])


def chamfer_variant(B_T, B_V, variant: str) -> float:
    if variant not in ("average", "maximum"):
        raise ValueError(f"variant must be 'average' or 'maximum', got {variant!r}")
    return float(set_scores(B_V, B_T, variant).data[0, 0])


def top_cos(B_V, B_T, p: int) -> np.ndarray:
    """Selection masks ``[2, k, k]``; entry ``[., i, j]`` refers to pair (v_i, t_j)."""
    B_V, B_T = np.asarray(B_V, dtype=np.float64), np.asarray(B_T, dtype=np.float64)
    k = B_V.shape[0]
    if not 1 <= p <= k:
        raise ValueError(f"p={p} must lie in [1, {k}]")
    cos = cosine_blocks(B_V[None], B_T[None]).data
    return np.stack(top_cos_masks(cos, 1, k, 1, B_T.shape[0], p))


def partial_score(B_V, B_T, p: int) -> float:
    k = np.shape(B_V)[0]
    if not 1 <= p <= k:
        raise ValueError(f"p={p} must lie in [1, {k}]")
    return float(set_scores(B_V, B_T, p=p).data[0, 0])


def partial_score_from_cosine(sim, p: int | None = None) -> float:
    """Partial score of a single pair given its ``[k, k]`` cosine matrix directly."""
    sim = np.asarray(sim, dtype=np.float64)
    k = sim.shape[0]
    return float(scores_from_cosine(Tensor(sim), 1, 1, k, p=p).data[0, 0])


# -- cross-attention (word-to-patch) ---------------------------------------------------

@dataclass
class CrossAttentionParams:
    W_Q: Parameter
    W_K: Parameter
    W_V: Parameter
    W_o: Parameter
    ln: tuple[Parameter, Parameter]
    D: Parameter  # [r, 1]


def init_cross_attention(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
                         prefix: str = "xattn") -> CrossAttentionParams:
    r = cfg.r
    mk = lambda name, scale=1.0: nx.init_affine(store, f"{prefix}.{name}", r, r, rng,
                                                scale=scale, bias=False)[0]
    return CrossAttentionParams(
        W_Q=mk("q"), W_K=mk("k"), W_V=mk("v"), W_o=mk("o", 0.1),
        ln=nx.init_norm(store, f"{prefix}.ln", r),
        D=store.add(f"{prefix}.D", rng.standard_normal((r, 1)) / np.sqrt(r)),
    )


def cross_attention_fuse(I_l, T_l, params: CrossAttentionParams) -> Tensor:
    """Patches attend to words: ``LayerNorm(I_l + softmax(Q K^T / sqrt(r)) V W_o)``."""
    I_l, T_l = _t(I_l), _t(T_l)
    if I_l.shape[-1] != T_l.shape[-1]:
        raise nx.DimensionError(f"I_l {I_l.shape} and T_l {T_l.shape} widths differ")
    Q = nx.matmul(I_l, params.W_Q)
    K = nx.matmul(T_l, params.W_K)
    V = nx.matmul(T_l, params.W_V)
    att, _ = nx.scaled_attention(Q, K, V)
    return nx.layer_norm(nx.add(I_l, nx.matmul(att, params.W_o)), *params.ln)


def fine_grained_score(I_fused, D, pooling: str = "mean") -> Tensor:
    """Pool over patches, then the linear scoring head: ``pool(I_fused) @ D``."""
    I_fused = _t(I_fused)
    if pooling == "mean":
        pooled = nx.mean(I_fused, axis=-2)
    elif pooling == "max":
        pooled = nx.tmax(I_fused, axis=-2)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    s = nx.matmul(pooled, D)
    return nx.reshape(s, s.shape[:-1])


def local_scores(I_l, T_locals: list, params: CrossAttentionParams,
                 pooling: str = "mean") -> Tensor:
    """``[B, C]`` fine-grained scores of each image against each class document."""
    I_l = _t(I_l)
    if I_l.ndim == 2:
        I_l = nx.reshape(I_l, (1,) + I_l.shape)
    cols = [nx.reshape(fine_grained_score(cross_attention_fuse(I_l, T, params), params.D,
                                          pooling), (-1, 1))
            for T in T_locals]
    return nx.concat(cols, axis=1)


# -- losses ---------------------------------------------------------------------------

def cross_entropy(logits, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[i, targets[i]]``."""
    logits = _t(logits)
    targets = np.asarray(targets, dtype=np.int64)
    ls = nx.log_softmax(logits, axis=-1)
    return nx.mul(nx.mean(ls[np.arange(len(targets)), targets]), -1.0)


def _targets(labels, classes) -> np.ndarray:
    pos = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([pos[int(y)] for y in labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"label {e.args[0]} is not among the training classes") from None


def loss_global(scores, labels, classes, tau: float) -> Tensor:
    """Cross-entropy over ``scores / tau`` against the seen-class documents."""
    return cross_entropy(nx.mul(_t(scores), 1.0 / tau), _targets(labels, classes))


def loss_local(scores_f, labels, classes) -> Tensor:
    return cross_entropy(scores_f, _targets(labels, classes))


def variance_hinge(trace_blocks: list, gamma: float, eps: float) -> Tensor:
    """sum_t sum_j max(0, gamma - sqrt(Var_k(a_tj) + eps)); shape ``[...]``."""
    total = None
    for A in trace_blocks:
        spread = nx.sqrt(nx.add(nx.variance(A, axis=-2), eps))
        c = nx.tsum(nx.relu(nx.sub(gamma, spread)), axis=-1)
        total = c if total is None else nx.add(total, c)
    return total


def loss_var(traces_V, traces_T, gamma: float, eps: float) -> Tensor:
    """Half the sum of the visual and textual hinge costs.

    Each argument is one trace (list of per-block logits) or a list of
    traces; costs are averaged over samples within a modality.
    """
    def side(traces):
        if traces and isinstance(traces[0], Tensor):
            traces = [traces]
        costs = [nx.mean(variance_hinge(t, gamma, eps)) for t in traces]
        return costs[0] if len(costs) == 1 else nx.mean(nx.stack(costs))

    return nx.mul(nx.add(side(traces_T), side(traces_V)), 0.5)


def loss_div(E_L_V, E_L_T) -> Tensor:
    """(1 / 2k^2) (||M_T - I||_F + ||M_V - I||_F), averaged over samples."""
    def side(E):
        E = _t(E)
        k = E.shape[-2]
        M = redundancy_matrix(E)
        dev = nx.sub(M, np.eye(k))
        if dev.ndim == 2:
            return nx.norm(dev), k
        return nx.mean(nx.norm(nx.reshape(dev, (dev.shape[0], -1)), axis=-1)), k

    v, k = side(E_L_V)
    t, _ = side(E_L_T)
    return nx.mul(nx.add(t, v), 1.0 / (2 * k * k))


def total_loss(components: dict, cfg: AlignmentConfig) -> Tensor:
    """L_global + lambda_local L_local + lambda_var L_var + lambda_div L_div."""
    for name, v in components.items():
        if not np.all(np.isfinite(_t(v).data)):
            raise nx.NonFiniteError(f"loss component {name} is not finite")
    out = _t(components["global"])
    for key, w in (("local", cfg.lambda_local), ("var", cfg.lambda_var),
                   ("div", cfg.lambda_div)):
        if key in components and w:
            out = nx.add(out, nx.mul(_t(components[key]), w))
    return out
