"""Adam with a warmup + cosine schedule, the epoch loop, checkpoints, grid search.

Checkpoint layout: an 8-byte little-endian header length, a UTF-8 JSON header
(config, metadata, tensor table with byte offsets, RNG state, metrics log),
then one contiguous little-endian float blob. The blob is float64 when the
model trains in 64-bit so that resuming is bit-exact.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Config, TrainConfig
from .data import Dataset, SplitSpec, batch_iter
from .inference import evaluate
from .model import EmDepart

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "L_global", "L_local", "L_var", "L_div", "S_var_V", "S_var_T",
               "val_T1", "val_H"]
CKPT_FORMAT = "emdepart-checkpoint/1"


class TrainingError(RuntimeError):
    pass


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at the last epoch."""
    E, W = cfg.epochs, cfg.warmup_epochs
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    if epoch < W:
        return cfg.base_lr * epoch / W
    span = E - W - 1
    progress = (epoch - W) / span if span > 0 else 0.0
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store: nx.ParamStore, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls({p.name: np.zeros_like(p.data) for p in store},
                   {p.name: np.zeros_like(p.data) for p in store}, 0, beta1, beta2, eps)


def adam_step(store: nx.ParamStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every parameter, then zero the gradients."""
    for p in store:
        if not np.all(np.isfinite(p.grad)):
            raise nx.NonFiniteError(f"non-finite gradient in parameter {p.name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in store:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    store.zero_grad()


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: Config
    r0: int
    word_dim: int
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int  # completed epochs
    rng_state: dict
    log: list[dict] = field(default_factory=list)
    gamma_cs: float | None = None

    def model(self) -> EmDepart:
        m = EmDepart(self.config, self.r0, self.word_dim)
        m.store.load_state_dict(self.params)
        return m


def _jsonable_rng_state(state: dict) -> dict:
    return json.loads(json.dumps(state, default=int))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    dtype = np.dtype(ckpt.config.train.dtype).newbyteorder("<")
    tensors, chunks, offset = [], [], 0
    groups = [("param", ckpt.params), ("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)]
    for group, arrays in groups:
        for name, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            tensors.append({"group": group, "name": name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(buf)})
            chunks.append(buf)
            offset += len(buf)
    header = {
        "format": CKPT_FORMAT,
        "dtype": dtype.str,
        "config": ckpt.config.to_dict(),
        "meta": {"r0": ckpt.r0, "word_dim": ckpt.word_dim, "epoch": ckpt.epoch,
                 "adam_step": ckpt.adam.step, "gamma_cs": ckpt.gamma_cs},
        "rng_state": ckpt.rng_state,
        "log": ckpt.log,
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    if header.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not an emdepart checkpoint")
    blob = memoryview(data)[8 + hlen:]
    dtype = np.dtype(header["dtype"])
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in header["tensors"]:
        arr = np.frombuffer(blob[t["offset"]:t["offset"] + t["nbytes"]], dtype=dtype)
        groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(dtype.newbyteorder("="))
    cfg = Config.from_dict(header["config"])
    meta = header["meta"]
    t = cfg.train
    adam = AdamState(groups["adam_m"], groups["adam_v"], meta["adam_step"],
                     t.beta1, t.beta2, t.adam_eps)
    return Checkpoint(cfg, meta["r0"], meta["word_dim"], groups["param"], adam, meta["epoch"],
                      header["rng_state"], header["log"], meta.get("gamma_cs"))


# -- training ------------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if not isinstance(x, int) else str(x)


def format_log(rows: list[dict]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])
    return out.getvalue()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: EmDepart
    log: list[dict]
    split: SplitSpec

    def csv(self) -> str:
        return format_log(self.log)


def training_split(cfg: Config, data: Dataset) -> SplitSpec:
    if cfg.train.validation:
        return data.split.validation_view(data.bank.labels, seed=cfg.train.seed)
    return data.split


def train(cfg: Config, data: Dataset, resume: Checkpoint | None = None,
          stop_after: int | None = None, log_path=None) -> TrainResult:
    """Fit the model; optionally resume from ``resume`` or stop after ``stop_after`` epochs.

    Every epoch shuffles the training images, takes one Adam step per batch
    on the full objective, and appends one row to the metrics log.
    """
    cfg = cfg.validate()
    split = training_split(cfg, data)
    classes = sorted(split.seen)
    train_idx = split.train_images(data.bank.labels)
    docs = data.docs.embeddings
    word_dim = next(iter(docs.values())).shape[1]

    if resume is None:
        model = EmDepart(cfg, data.bank.r0, word_dim)
        adam = AdamState.for_store(model.store, cfg.train.beta1, cfg.train.beta2,
                                   cfg.train.adam_eps)
        rng = np.random.default_rng(cfg.train.seed)
        start, rows = 0, []
    else:
        cfg = resume.config
        model = resume.model()
        adam = copy.deepcopy(resume.adam)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start, rows = resume.epoch, [dict(r) for r in resume.log]

    end = cfg.train.epochs if stop_after is None else min(cfg.train.epochs, stop_after)
    feats, labels = data.bank.features, data.bank.labels
    for epoch in range(start, end):
        lr = cosine_lr(epoch, cfg.train)
        sums = dict.fromkeys(["global", "local", "var", "div", "S_var_V", "S_var_T"], 0.0)
        nb = 0
        for batch in batch_iter(train_idx, cfg.train.batch_size, rng):
            try:
                comps, stats = model.loss_components(feats[batch], labels[batch], docs, classes,
                                                     training=True, rng=rng)
            except nx.NonFiniteError as e:
                raise TrainingError(f"epoch {epoch}: {e}") from e
            for name, v in comps.items():
                if not np.isfinite(v.data).all():
                    raise TrainingError(f"epoch {epoch}: loss component {name!r} is not finite")
            total = nx.add(comps["global"], 0.0)
            for key, w in (("local", cfg.alignment.lambda_local),
                           ("var", cfg.alignment.lambda_var), ("div", cfg.alignment.lambda_div)):
                if w:
                    total = nx.add(total, nx.mul(comps[key], w))
            total.backward()
            adam_step(model.store, adam, lr)
            for name, v in comps.items():
                sums[name] += float(v.data)
            sums["S_var_V"] += stats["S_var_V"]
            sums["S_var_T"] += stats["S_var_T"]
            nb += 1
        row = {"epoch": epoch, "lr": lr, "L_global": sums["global"] / nb,
               "L_local": sums["local"] / nb, "L_var": sums["var"] / nb,
               "L_div": sums["div"] / nb, "S_var_V": sums["S_var_V"] / nb,
               "S_var_T": sums["S_var_T"] / nb, "val_T1": None, "val_H": None}
        if cfg.train.log_eval:
            g = cfg.eval.gamma_cs if cfg.eval.gamma_cs is not None else 0.0
            rep = evaluate(model, data, split, gamma_cs=g,
                           partial=not cfg.eval.no_partial_score)
            row["val_T1"], row["val_H"] = rep.T1, rep.H
        rows.append(row)
        log.info("epoch %d lr=%.3g L_global=%.4f L_local=%.4f L_var=%.4f L_div=%.4f "
                 "S_var_V=%.3f S_var_T=%.3f val_T1=%s val_H=%s", epoch, lr, row["L_global"],
                 row["L_local"], row["L_var"], row["L_div"], row["S_var_V"], row["S_var_T"],
                 row["val_T1"], row["val_H"])
        if log_path is not None:
            Path(log_path).write_text(format_log(rows))

    gamma_cs = cfg.eval.gamma_cs
    if gamma_cs is None and cfg.train.validation and end == cfg.train.epochs:
        gamma_cs = evaluate(model, data, split, gamma_cs=None,
                            partial=not cfg.eval.no_partial_score).gamma_cs
    elif gamma_cs is None and resume is not None:
        gamma_cs = resume.gamma_cs
    ckpt = Checkpoint(cfg, data.bank.r0, word_dim, model.store.state_dict(), adam, end,
                      _jsonable_rng_state(rng.bit_generator.state), rows, gamma_cs)
    return TrainResult(ckpt, model, rows, split)


# -- grid search ---------------------------------------------------------------------

def _set_path(cfg: Config, key: str, value) -> Config:
    if "." in key:
        section, name = key.split(".", 1)
    else:
        section = next((s for s in ("alignment", "model", "train", "eval", "data")
                        if hasattr(getattr(cfg, s), key)), None)
        name = key
        if section is None:
            raise KeyError(f"unknown hyperparameter {key!r}")
    sub = getattr(cfg, section)
    if not hasattr(sub, name):
        raise KeyError(f"unknown hyperparameter {key!r}")
    return replace(cfg, **{section: replace(sub, **{name: value})})


@dataclass
class GridResult:
    best: Config
    rows: list[dict]

    def csv(self) -> str:
        keys = sorted({k for r in self.rows for k in r if k not in ("val_T1", "val_H",
                                                                    "gamma_cs")})
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(keys + ["val_T1", "val_H", "gamma_cs"])
        for r in self.rows:
            w.writerow([r.get(k) for k in keys] + [_fmt(r["val_T1"]), _fmt(r["val_H"]),
                                                   _fmt(r["gamma_cs"])])
        return out.getvalue()


def grid_search(cfg: Config, sweep: dict[str, list], data: Dataset,
                mode: str = "per_axis", csv_path=None) -> GridResult:
    """Pick hyperparameters by validation H.

    ``per_axis`` sweeps one axis at a time, keeping the best value found so
    far for the others; ``cartesian`` runs the full product.
    """
    if not sweep or any(len(v) == 0 for v in sweep.values()):
        raise ValueError("empty sweep")
    base = replace(cfg, train=replace(cfg.train, validation=True, log_eval=False))

    def run(c: Config, point: dict) -> dict:
        res = train(c, data)
        rep = evaluate(res.model, data, res.split, gamma_cs=c.eval.gamma_cs,
                       partial=not c.eval.no_partial_score)
        return {**point, "val_T1": rep.T1, "val_H": rep.H, "gamma_cs": rep.gamma_cs}

    rows = []
    if mode == "cartesian":
        import itertools
        keys = list(sweep)
        best, best_h = None, -1.0
        for combo in itertools.product(*(sweep[k] for k in keys)):
            point = dict(zip(keys, combo))
            c = base
            for k, v in point.items():
                c = _set_path(c, k, v)
            row = run(c, point)
            rows.append(row)
            if row["val_H"] > best_h:
                best, best_h = c, row["val_H"]
    elif mode == "per_axis":
        current = {k: v[0] for k, v in sweep.items()}
        best = None
        for axis, values in sweep.items():
            axis_best, axis_h = current[axis], -1.0
            for v in values:
                point = {**current, axis: v}
                c = base
                for k, val in point.items():
                    c = _set_path(c, k, val)
                row = run(c, point)
                rows.append(row)
                if row["val_H"] > axis_h:
                    axis_best, axis_h = v, row["val_H"]
            current[axis] = axis_best
        best = base
        for k, v in current.items():
            best = _set_path(best, k, v)
    else:
        raise ValueError(f"unknown sweep mode {mode!r}")
    best = replace(best, train=replace(best.train, validation=cfg.train.validation,
                                       log_eval=cfg.train.log_eval))
    result = GridResult(best, rows)
    if csv_path is not None:
        Path(csv_path).write_text(result.csv())
    return result
