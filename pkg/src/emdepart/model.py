"""The full two-tower model: perceivers, both SDMs and the word-to-patch head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment as al
from . import numerics as nx
from .config import Config
from .numerics import ParamStore, Tensor
from .perceivers import (image_perceive, init_image_perceiver, init_text_perceiver,
                         text_perceive)
from .sdm import AggregationTrace, circular_variance, init_sdm, sdm_forward


@dataclass
class TextEncoding:
    classes: list[int]
    B: Tensor  # [C, k, r]
    E_L: Tensor  # [C, k, r]
    locals: list[Tensor]  # per class [m_c, r]
    traces: list[AggregationTrace]


@dataclass
class ImageEncoding:
    B: Tensor  # [N, k, r]
    E_L: Tensor
    local: Tensor  # [N, n, r]
    trace: AggregationTrace


class EmDepart:
    def __init__(self, cfg: Config, r0: int, word_dim: int, seed: int | None = None):
        self.cfg = cfg.validate()
        self.r0, self.word_dim = r0, word_dim
        seed = cfg.train.seed if seed is None else seed
        self.store = ParamStore(seed, np.dtype(cfg.train.dtype))
        rng = np.random.default_rng(seed)
        m = cfg.model
        self.image = init_image_perceiver(self.store, r0, m, rng)
        self.text = init_text_perceiver(self.store, word_dim, m, rng)
        self.sdm_v = init_sdm(self.store, m, rng, "sdm_v")
        self.sdm_t = init_sdm(self.store, m, rng, "sdm_t")
        self.xattn = al.init_cross_attention(self.store, m, rng)

    @property
    def k(self) -> int:
        return self.cfg.model.k

    def _cast(self, x) -> Tensor:
        return Tensor(np.asarray(x, dtype=self.store.dtype))

    def encode_images(self, feats, training: bool = False, rng=None) -> ImageEncoding:
        m = self.cfg.model
        x = self._cast(feats)
        if x.ndim == 2:
            x = nx.reshape(x, (1,) + x.shape)
        pi = image_perceive(x, self.image, m.dropout, rng, training)
        views, trace = sdm_forward(pi.local, pi.cls, self.sdm_v, no_global=m.no_global)
        return ImageEncoding(views.B, views.E_L, pi.local, trace)

    def encode_documents(self, docs: dict[int, np.ndarray], classes: list[int],
                         training: bool = False, rng=None) -> TextEncoding:
        m = self.cfg.model
        Bs, Es, locs, traces = [], [], [], []
        for c in classes:
            pt = text_perceive(self._cast(docs[c]), self.text, m.dropout, rng, training)
            views, trace = sdm_forward(pt.local, pt.cls, self.sdm_t, no_global=m.no_global)
            Bs.append(views.B)
            Es.append(views.E_L)
            locs.append(pt.local)
            traces.append(trace)
        return TextEncoding(list(classes), nx.stack(Bs), nx.stack(Es), locs, traces)

    def loss_components(self, feats, labels, docs: dict[int, np.ndarray], classes: list[int],
                        training: bool = False, rng=None) -> tuple[dict, dict]:
        """Loss terms for one batch against the documents of ``classes``.

        Returns ``(components, stats)`` where ``stats`` carries the circular
        variance of both modalities (plain floats).
        """
        a = self.cfg.alignment
        img = self.encode_images(feats, training, rng)
        txt = self.encode_documents(docs, classes, training, rng)
        terms = {
            "global": lambda: al.loss_global(
                al.set_scores(img.B, txt.B, a.similarity_variant), labels, classes, a.tau),
            "local": lambda: al.loss_local(
                al.local_scores(img.local, txt.locals, self.xattn, a.pooling), labels, classes),
            "var": lambda: al.loss_var([img.trace.blocks], [t.blocks for t in txt.traces],
                                       a.gamma, a.eps),
            "div": lambda: al.loss_div(img.E_L, txt.E_L),
        }
        comps = {}
        for name, fn in terms.items():
            try:
                comps[name] = fn()
            except (nx.NonFiniteError, ZeroDivisionError) as e:
                raise nx.NonFiniteError(f"loss component {name!r}: {e}") from e
        stats = {
            "S_var_V": float(np.mean(circular_variance(img.B.detach()).data)),
            "S_var_T": float(np.mean(circular_variance(txt.B.detach()).data)),
        }
        return comps, stats

    def loss(self, feats, labels, docs, classes, training=False, rng=None) -> Tensor:
        comps, _ = self.loss_components(feats, labels, docs, classes, training, rng)
        return al.total_loss(comps, self.cfg.alignment)

    def class_embeddings(self, docs: dict[int, np.ndarray], classes: list[int]) -> TextEncoding:
        with nx.no_grad():
            return self.encode_documents(docs, classes)

    def score(self, feats, text: TextEncoding, p: int | None = None,
              batch_size: int = 256) -> np.ndarray:
        """``[N, C]`` inference scores; ``p`` selects the partial score."""
        variant = self.cfg.alignment.similarity_variant
        if variant != "smooth_chamfer":
            p = None
        out = []
        with nx.no_grad():
            for s in range(0, len(feats), batch_size):
                img = self.encode_images(feats[s:s + batch_size])
                out.append(al.set_scores(img.B, text.B, variant, p).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, len(text.classes)))


GRAD_SUITE_TERMS = ("global", "local", "var", "div", "total")


def gradient_suite(seed: int = 0, tol: float = 1e-4, h: float = 1e-5,
                   max_per_param: int | None = 6, k: int = 3, n: int = 5, m: int = 7,
                   r: int = 8, layers: int = 2, r0: int = 6, word_dim: int = 5,
                   batch: int = 2, classes: int = 3) -> dict[str, nx.GradCheckReport]:
    """Finite-difference check of every loss term and of the weighted total.

    Runs in 64-bit on a tiny random model and random inputs. ``max_per_param``
    subsamples the entries of each parameter to keep the runtime small.
    """
    from .config import AlignmentConfig, ModelConfig, TrainConfig

    cfg = Config(model=ModelConfig(r=r, k=k, sdm_layers=layers, enc_heads=2),
                 alignment=AlignmentConfig(tau=2.0, p=min(2, k), gamma=0.5),
                 train=TrainConfig(seed=seed, dtype="float64"))
    model = EmDepart(cfg, r0, word_dim)
    rng = np.random.default_rng(seed + 1)
    feats = rng.standard_normal((batch, n + 1, r0))
    cls = list(range(classes))
    labels = np.array([cls[i % classes] for i in range(batch)])
    docs = {c: rng.standard_normal((m, word_dim)) for c in cls}

    cache: dict[bytes, dict] = {}

    def components():
        # every term sees the same perturbations, so no-grad evaluations are shared
        if nx._grad_enabled:
            return model.loss_components(feats, labels, docs, cls)[0]
        key = b"".join(p.data.tobytes() for p in model.store)
        if key not in cache:
            cache[key] = model.loss_components(feats, labels, docs, cls)[0]
        return cache[key]

    def term(name):
        def fn():
            comps = components()
            return al.total_loss(comps, cfg.alignment) if name == "total" else comps[name]
        return fn

    reports = {}
    for name in GRAD_SUITE_TERMS:
        reports[name] = nx.finite_diff_check(term(name), model.store, h=h, tol=tol,
                                             max_per_param=max_per_param,
                                             rng=np.random.default_rng(seed))
    return reports
