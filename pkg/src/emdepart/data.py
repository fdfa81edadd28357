"""Feature banks, documents, word embeddings, splits, and a synthetic generator.

On-disk layout of a dataset directory::

    manifest.json        {"n", "r0", "num_images", "classes"}
    images.bin           little-endian float32 [num_images, n + 1, r0]
    labels.csv           image_index,class_id
    documents/class_<id>.txt
    embeddings.tsv       GloVe text format: word f1 ... fD
    splits.json          seen / unseen / val_seen / test_seen_images / test_images
    views.json           synthetic only: realized view ids per image
"""

from __future__ import annotations

import csv
import itertools
import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WORD_DIM = 300


class DataError(ValueError):
    """Base class for malformed dataset contents."""


class SizeMismatchError(DataError):
    pass


class NonFiniteFeatureError(DataError):
    pass


class UnknownClassError(DataError):
    pass


class EmptyDocumentError(DataError):
    pass


@dataclass
class FeatureBank:
    features: np.ndarray  # [num_images, n + 1, r0]; row 0 is the global token
    labels: np.ndarray  # [num_images] int

    @property
    def num_images(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1] - 1

    @property
    def r0(self) -> int:
        return self.features.shape[2]


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]
    dim: int = WORD_DIM
    oov_policy: str = "skip"  # or "zero"

    def __post_init__(self):
        if self.oov_policy not in ("skip", "zero"):
            raise ValueError(f"unknown OOV policy {self.oov_policy!r}")
        for w, v in self.vectors.items():
            if v.shape != (self.dim,):
                raise DataError(f"vector for {w!r} has shape {v.shape}, expected ({self.dim},)")

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def __getitem__(self, word: str) -> np.ndarray:
        return self.vectors[word]


@dataclass
class DocumentBank:
    tokens: dict[int, list[str]]  # class id -> token list
    embeddings: dict[int, np.ndarray]  # class id -> [m_c, dim]

    def classes(self) -> list[int]:
        return sorted(self.tokens)


@dataclass
class SplitSpec:
    seen: list[int]
    unseen: list[int]
    val_seen: list[int] = field(default_factory=list)
    test_seen_images: list[int] = field(default_factory=list)
    test_images: list[int] = field(default_factory=list)
    # images kept out of both training and evaluation (not serialized)
    excluded_images: list[int] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise DataError(f"seen and unseen classes overlap: {sorted(overlap)}")
        if not set(self.val_seen) <= set(self.seen):
            raise DataError("val_seen must be a subset of seen classes")

    def all_classes(self) -> list[int]:
        return sorted(set(self.seen) | set(self.unseen))

    def train_images(self, labels: np.ndarray) -> np.ndarray:
        held = set(self.test_seen_images) | set(self.excluded_images)
        seen = set(self.seen)
        return np.array([i for i, y in enumerate(labels) if y in seen and i not in held],
                        dtype=np.int64)

    def unseen_images(self, labels: np.ndarray) -> np.ndarray:
        unseen = set(self.unseen)
        return np.array([i for i in self.test_images if labels[i] in unseen], dtype=np.int64)

    def validation_view(self, labels: np.ndarray, holdout: float = 0.2,
                        seed: int = 0) -> "SplitSpec":
        """Split-within-the-split for model selection.

        ``val_seen`` classes play the unseen role; a seeded fraction of the
        remaining seen-class training images is held out as the seen test pool.
        """
        if not self.val_seen:
            raise DataError("split has no validation partition (val_seen is empty)")
        fit_classes = [c for c in self.seen if c not in set(self.val_seen)]
        train = self.train_images(labels)
        rng = np.random.default_rng(seed)
        fit_held: list[int] = []
        for c in fit_classes:
            idx = train[labels[train] == c]
            k = int(round(holdout * len(idx)))
            if k:
                fit_held.extend(sorted(rng.choice(idx, size=k, replace=False).tolist()))
        val_unseen_imgs = train[np.isin(labels[train], self.val_seen)].tolist()
        return SplitSpec(
            seen=fit_classes,
            unseen=list(self.val_seen),
            test_seen_images=sorted(fit_held),
            test_images=sorted(set(fit_held) | set(val_unseen_imgs)),
            excluded_images=sorted(set(self.test_images) | set(self.excluded_images)),
        )


# -- tokenization / lookup -------------------------------------------------------

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def embed_tokens(doc: list[str], table: EmbeddingTable) -> np.ndarray:
    if not doc:
        raise EmptyDocumentError("document has no tokens")
    rows = []
    for w in doc:
        if w in table:
            rows.append(table[w])
        elif table.oov_policy == "zero":
            rows.append(np.zeros(table.dim))
    if not rows:
        raise EmptyDocumentError("no in-vocabulary tokens left after OOV filtering")
    return np.stack(rows).astype(np.float64)


def build_document_bank(tokens: dict[int, list[str]], table: EmbeddingTable) -> DocumentBank:
    return DocumentBank(tokens=tokens,
                        embeddings={c: embed_tokens(t, table) for c, t in tokens.items()})


# -- file IO ------------------------------------------------------------------------

def load_feature_bank(path) -> FeatureBank:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    n, r0, num = int(manifest["n"]), int(manifest["r0"]), int(manifest["num_images"])
    if n < 1:
        raise DataError("manifest n must be >= 1")
    raw = (path / "images.bin").read_bytes()
    expected = 4 * num * (n + 1) * r0
    if len(raw) != expected:
        raise SizeMismatchError(
            f"images.bin has {len(raw)} bytes, manifest implies {expected}")
    feats = np.frombuffer(raw, dtype="<f4").reshape(num, n + 1, r0).copy()
    if not np.all(np.isfinite(feats)):
        raise NonFiniteFeatureError("images.bin contains non-finite values")

    labels = np.full(num, -1, dtype=np.int64)
    with open(path / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            labels[int(row["image_index"])] = int(row["class_id"])
    if np.any(labels < 0):
        raise DataError("labels.csv does not cover every image")
    known = set(int(c) for c in manifest["classes"])
    split_file = path / "splits.json"
    if split_file.exists():
        s = json.loads(split_file.read_text())
        known &= set(s["seen"]) | set(s["unseen"])
    bad = sorted(set(labels.tolist()) - known)
    if bad:
        raise UnknownClassError(f"labels reference unknown class ids {bad}")
    return FeatureBank(features=feats, labels=labels)


def write_feature_bank(path, bank: FeatureBank, classes: list[int]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"n": bank.n, "r0": bank.r0, "num_images": bank.num_images,
                "classes": [int(c) for c in classes]}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (path / "images.bin").write_bytes(np.ascontiguousarray(bank.features, dtype="<f4").tobytes())
    with open(path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_index", "class_id"])
        for i, y in enumerate(bank.labels):
            w.writerow([i, int(y)])


def load_embedding_table(path, oov_policy: str = "skip") -> EmbeddingTable:
    vectors = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            v = np.array([float(x) for x in parts[1:]])
            dim = dim or len(v)
            vectors[parts[0]] = v
    return EmbeddingTable(vectors, dim=dim or WORD_DIM, oov_policy=oov_policy)


def write_embedding_table(path, table: EmbeddingTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w, v in table.vectors.items():
            fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


def load_documents(path, classes: list[int]) -> dict[int, list[str]]:
    docs = {}
    for c in classes:
        f = Path(path) / "documents" / f"class_{c}.txt"
        if not f.exists():
            raise DataError(f"missing document for class {c}: {f}")
        docs[c] = tokenize(f.read_text(encoding="utf-8"))
    return docs


def write_documents(path, tokens: dict[int, list[str]]) -> None:
    d = Path(path) / "documents"
    d.mkdir(parents=True, exist_ok=True)
    for c, toks in sorted(tokens.items()):
        (d / f"class_{c}.txt").write_text(" ".join(toks) + "\n", encoding="utf-8")


def load_splits(path) -> SplitSpec:
    s = json.loads((Path(path) / "splits.json").read_text())
    return SplitSpec(seen=s["seen"], unseen=s["unseen"], val_seen=s.get("val_seen", []),
                     test_seen_images=s.get("test_seen_images", []),
                     test_images=s.get("test_images", []))


def write_splits(path, split: SplitSpec) -> None:
    payload = {"seen": split.seen, "unseen": split.unseen, "val_seen": split.val_seen,
               "test_seen_images": split.test_seen_images, "test_images": split.test_images}
    (Path(path) / "splits.json").write_text(json.dumps(payload) + "\n")


@dataclass
class Dataset:
    """Everything training and evaluation need, loaded together."""
    bank: FeatureBank
    docs: DocumentBank
    split: SplitSpec
    views: list[list[int]] | None = None


def load_dataset(path, oov_policy: str = "skip") -> Dataset:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    bank = load_feature_bank(path)
    split = load_splits(path)
    table = load_embedding_table(path / "embeddings.tsv", oov_policy)
    docs = build_document_bank(load_documents(path, split.all_classes()), table)
    views = None
    if (path / "views.json").exists():
        views = json.loads((path / "views.json").read_text())["views"]
    return Dataset(bank, docs, split, views)


def write_dataset(path, bank: FeatureBank, tokens: dict[int, list[str]], split: SplitSpec,
                  table: EmbeddingTable, views: list[list[int]] | None = None) -> None:
    path = Path(path)
    write_feature_bank(path, bank, split.all_classes())
    write_documents(path, tokens)
    write_embedding_table(path / "embeddings.tsv", table)
    write_splits(path, split)
    if views is not None:
        (path / "views.json").write_text(json.dumps({"views": views}) + "\n")


# -- synthetic data -----------------------------------------------------------------

@dataclass
class SynthConfig:
    c_seen: int = 20
    c_unseen: int = 5
    views: int = 8
    values_per_view: int = 3  # each view takes one of several values per class
    views_per_class: int = 3
    n: int = 8
    m: int = 4  # tokens per view in each document
    distractors: int = 6
    r0: int = 32
    word_dim: int = WORD_DIM
    images_per_class: int = 20
    noise_sigma: float = 0.3
    keep_prob: float = 0.8  # chance an image shows each of its class's views
    min_shown: int = 2
    test_fraction: float = 0.2
    val_classes: int = 4
    seed: int = 0


@dataclass
class SyntheticData:
    bank: FeatureBank
    docs: DocumentBank
    split: SplitSpec
    table: EmbeddingTable
    views: list[list[int]]  # realized prototype ids per image
    class_views: dict[int, list[int]]  # prototype ids per class
    prototypes: np.ndarray  # [views * values_per_view, r0] visual prototypes

    def dataset(self) -> Dataset:
        return Dataset(self.bank, self.docs, self.split, self.views)

    def write(self, path) -> None:
        write_dataset(path, self.bank, self.docs.tokens, self.split, self.table, self.views)


def _class_atoms(cfg: SynthConfig, rng: np.random.Generator) -> list[list[int]]:
    """Seen classes first, then unseen classes built only from atoms some seen class uses."""
    vals = cfg.values_per_view
    total = len(list(itertools.combinations(range(cfg.views), cfg.views_per_class))) \
        * vals ** cfg.views_per_class
    need = cfg.c_seen + cfg.c_unseen
    if total < need:
        raise ValueError(f"only {total} view combinations for {need} classes")

    def draw():
        aspects = np.sort(rng.choice(cfg.views, size=cfg.views_per_class, replace=False))
        return tuple(int(a) * vals + int(rng.integers(vals)) for a in aspects)

    for _ in range(100):
        picked: list[tuple] = []
        while len(picked) < cfg.c_seen:
            c = draw()
            if c not in picked:
                picked.append(c)
        covered = set(itertools.chain.from_iterable(picked))
        for _ in range(20000):
            if len(picked) == need:
                return [list(p) for p in picked]
            c = draw()
            if c not in picked and set(c) <= covered:
                picked.append(c)
    raise ValueError("could not build unseen classes from seen-class view prototypes")


def gen_synthetic(cfg: SynthConfig | None = None, all_views: bool = False) -> SyntheticData:
    """Desk-scale ZSL data with planted multi-view structure.

    A class picks ``views_per_class`` of the ``views`` aspects and one value
    for each; every (view, value) pair has a visual prototype and a small
    vocabulary. Documents list the words of every view of the class plus
    shared distractor words. Each image shows a random subset (at least
    ``min_shown``) of its class's views as noisy patches, with a global token
    summarizing the shown views. Unseen classes are new combinations of
    prototypes that seen classes already use.
    """
    cfg = cfg or SynthConfig()
    if cfg.views < 2:
        raise ValueError("views must be >= 2")
    if cfg.c_seen < cfg.views_per_class or cfg.c_seen < 1 or cfg.c_unseen < 1:
        raise ValueError("infeasible class counts")
    if not 1 <= cfg.views_per_class <= cfg.views:
        raise ValueError("views_per_class must lie in [1, views]")
    if cfg.n < cfg.views_per_class:
        raise ValueError("need at least one patch per view (n >= views_per_class)")
    rng = np.random.default_rng(cfg.seed)

    class_ids = list(range(cfg.c_seen + cfg.c_unseen))
    class_views = dict(zip(class_ids, _class_atoms(cfg, rng)))
    seen, unseen = class_ids[:cfg.c_seen], class_ids[cfg.c_seen:]

    n_atoms = cfg.views * cfg.values_per_view
    protos = rng.standard_normal((n_atoms, cfg.r0))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    text_protos = rng.standard_normal((n_atoms, cfg.word_dim))
    text_protos /= np.linalg.norm(text_protos, axis=1, keepdims=True)

    vectors: dict[str, np.ndarray] = {}
    atom_words = []
    for a in range(n_atoms):
        words = [f"view{a}w{j}" for j in range(cfg.m)]
        for w in words:
            jitter = rng.standard_normal(cfg.word_dim) / np.sqrt(cfg.word_dim)
            vectors[w] = text_protos[a] + 0.3 * jitter
        atom_words.append(words)
    distract = [f"common{j}" for j in range(cfg.distractors)]
    for w in distract:
        vectors[w] = rng.standard_normal(cfg.word_dim) / np.sqrt(cfg.word_dim)
    table = EmbeddingTable(vectors, dim=cfg.word_dim)

    tokens = {}
    for c in class_ids:
        toks = [w for a in class_views[c] for w in atom_words[a]] + distract
        tokens[c] = [toks[i] for i in rng.permutation(len(toks))]
    docs = build_document_bank(tokens, table)

    min_shown = min(cfg.min_shown, cfg.views_per_class)
    feats, labels, realized = [], [], []
    for c in class_ids:
        cv = class_views[c]
        for _ in range(cfg.images_per_class):
            if all_views:
                shown = list(cv)
            else:
                keep = rng.random(len(cv)) < cfg.keep_prob
                while keep.sum() < min_shown:
                    keep[rng.choice(np.flatnonzero(~keep))] = True
                shown = [a for a, k in zip(cv, keep) if k]
            tiled = np.array([shown[i] for i in rng.permutation(len(shown))])
            slots = np.resize(tiled, cfg.n)[rng.permutation(cfg.n)]
            patches = protos[slots] + cfg.noise_sigma * rng.standard_normal((cfg.n, cfg.r0))
            glob = protos[shown].mean(axis=0)
            glob = glob + cfg.noise_sigma / np.sqrt(cfg.n) * rng.standard_normal(cfg.r0)
            feats.append(np.vstack([glob[None], patches]))
            labels.append(c)
            realized.append(sorted(shown))
    features = np.asarray(feats, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)

    test_seen = []
    for c in seen:
        idx = np.flatnonzero(labels == c)
        k = int(round(cfg.test_fraction * len(idx)))
        test_seen.extend(sorted(rng.choice(idx, size=k, replace=False).tolist()))
    unseen_idx = np.flatnonzero(np.isin(labels, unseen)).tolist()
    val_seen = sorted(rng.choice(seen, size=min(cfg.val_classes, cfg.c_seen - 1),
                                 replace=False).tolist()) if cfg.val_classes else []
    split = SplitSpec(seen=seen, unseen=unseen, val_seen=val_seen,
                      test_seen_images=sorted(test_seen),
                      test_images=sorted(test_seen + unseen_idx))
    return SyntheticData(FeatureBank(features, labels), docs, split, table, realized,
                         class_views, protos)


def prototype_oracle(data: SyntheticData, images: np.ndarray, classes: list[int]) -> np.ndarray:
    """Brute-force reference classifier: cosine of each image's mean patch to
    each class's mean view prototype, argmax over ``classes``."""
    preds = []
    for i in images:
        x = data.bank.features[i, 1:].astype(np.float64).mean(axis=0)
        best, best_s = None, -np.inf
        for c in classes:
            proto = data.prototypes[data.class_views[c]].mean(axis=0)
            s = float(x @ proto / (np.linalg.norm(x) * np.linalg.norm(proto)))
            if s > best_s:
                best, best_s = c, s
        preds.append(best)
    return np.asarray(preds)


# -- batching -------------------------------------------------------------------------

def batch_iter(indices, batch_size: int, rng: np.random.Generator):
    """One epoch over ``indices`` in a seeded random order."""
    indices = np.asarray(indices)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(indices) == 0:
        raise DataError("cannot batch an empty split")
    order = indices[rng.permutation(len(indices))]
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]
