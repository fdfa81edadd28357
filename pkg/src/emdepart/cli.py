"""Command-line entry point: ``emdepart {gen-synth,train,eval,score,diagnose,grad-check}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Model hyperparameters live in a JSON config file; flags only pick paths and modes.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from pathlib import Path

import numpy as np

from . import alignment as al
from . import numerics as nx
from .config import Config, ConfigError, preset
from .data import DataError, SynthConfig, gen_synthetic, load_dataset
from .inference import evaluate
from .model import GRAD_SUITE_TERMS, gradient_suite
from .sdm import circular_variance, redundancy_matrix
from .trainer import TrainingError, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("emdepart")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt_defaults():
    c = Config()
    return "\n".join(f"  [{sec}] " + ", ".join(f"{k}={v}" for k, v in body.items())
                     for sec, body in c.to_dict().items())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emdepart", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic dataset with planted views")
    d = SynthConfig()
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--classes-seen", type=int, default=d.c_seen)
    g.add_argument("--classes-unseen", type=int, default=d.c_unseen)
    g.add_argument("--views", type=int, default=d.views)
    g.add_argument("--views-per-class", type=int, default=d.views_per_class)
    g.add_argument("--images-per-class", type=int, default=d.images_per_class)
    g.add_argument("--noise", type=float, default=d.noise_sigma)
    g.add_argument("--r0", type=int, default=d.r0)
    g.add_argument("--seed", type=int, default=d.seed)

    t = sub.add_parser("train", help="fit a model and write a checkpoint plus a CSV log",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config defaults:\n" + _fmt_defaults())
    t.add_argument("--config", type=Path, help="JSON config (sections data/model/alignment/"
                   "train/eval); defaults are listed below")
    t.add_argument("--preset", choices=["awa2", "cub", "flo"],
                   help="start from a published hyperparameter set instead of the defaults")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--log", type=Path, help="metrics CSV (default: checkpoint path with .csv)")
    t.add_argument("--ablate", action="append", default=[],
                   help="no_global, no_residual, no_partial_score, average or maximum")
    t.add_argument("--resume", type=Path, help="continue from this checkpoint")

    e = sub.add_parser("eval", help="print an EvalReport as JSON")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", choices=["zsl", "gzsl"], default="gzsl")
    e.add_argument("--p", type=int, help="partial-score width (default: from the config)")
    e.add_argument("--gamma-cs", type=float,
                   help="calibration factor (default: checkpoint value, else 0)")
    e.add_argument("--no-partial", action="store_true", help="score with full smooth chamfer")

    s = sub.add_parser("score", help="dump per-pair cosines, TopCos masks and partial scores")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--images", type=int, nargs="*",
                   help="image indices (default: the first --max-images test images)")
    s.add_argument("--max-images", type=int, default=4)
    s.add_argument("--p", type=int, help="partial-score width (default: from the config)")

    q = sub.add_parser("diagnose", help="dump S_var, redundancy, attention and embeddings")
    q.add_argument("--ckpt", required=True, type=Path)
    q.add_argument("--data", required=True, type=Path)
    q.add_argument("--out", required=True, type=Path)
    q.add_argument("--max-images", type=int, default=16,
                   help="test images whose attention maps are dumped")

    c = sub.add_parser("grad-check", help="finite-difference check of every loss term")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--full", action="store_true", help="check every entry, not a subsample")
    return p


# -- commands -----------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    if args.views < 2:
        raise UsageError("--views must be >= 2")
    if args.classes_seen < 1 or args.classes_unseen < 1:
        raise UsageError("--classes-seen and --classes-unseen must be >= 1")
    vpc = min(args.views_per_class, args.views)
    cfg = SynthConfig(c_seen=args.classes_seen, c_unseen=args.classes_unseen, views=args.views,
                      views_per_class=vpc, images_per_class=args.images_per_class,
                      noise_sigma=args.noise, r0=args.r0, seed=args.seed,
                      val_classes=min(SynthConfig.val_classes, max(args.classes_seen - 1, 0)))
    try:
        data = gen_synthetic(cfg)
    except ValueError as e:
        raise UsageError(str(e)) from e
    data.write(args.out)
    print(json.dumps({"out": str(args.out), "images": data.bank.num_images,
                      "seen": len(data.split.seen), "unseen": len(data.split.unseen)}))
    return EXIT_OK


def _load_config(args) -> Config:
    cfg = preset(args.preset) if args.preset else Config()
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = Config.from_dict(json.loads(args.config.read_text()))
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON ({e})") from e
    for flag in args.ablate:
        cfg = cfg.with_ablation(flag)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(args.data, cfg.data.oov_policy)
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = args.log or args.out.with_suffix(".csv")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    res = train(cfg, data, resume=resume, log_path=log_path)
    log_path.write_text(res.csv())
    save_checkpoint(args.out, res.checkpoint)
    last = res.log[-1] if res.log else {}
    print(json.dumps({"checkpoint": str(args.out), "log": str(log_path),
                      "epochs": res.checkpoint.epoch, "val_T1": last.get("val_T1"),
                      "val_H": last.get("val_H")}))
    return EXIT_OK


def _open(args):
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data, ckpt.config.data.oov_policy)
    return ckpt, ckpt.model(), data


def cmd_eval(args) -> int:
    ckpt, model, data = _open(args)
    if args.p is not None and not 1 <= args.p <= model.k:
        raise UsageError(f"--p {args.p} must lie in [1, k={model.k}]")
    gamma = args.gamma_cs
    if gamma is None:
        gamma = ckpt.gamma_cs if ckpt.gamma_cs is not None else 0.0
    if gamma < 0:
        raise UsageError("--gamma-cs must be >= 0")
    partial = not (args.no_partial or model.cfg.eval.no_partial_score)
    rep = evaluate(model, data, p=args.p, gamma_cs=gamma, partial=partial, mode=args.split)
    print(rep.to_json())
    return EXIT_OK


def cmd_score(args) -> int:
    ckpt, model, data = _open(args)
    k = model.k
    p = args.p if args.p is not None else (model.cfg.eval.p or model.cfg.alignment.p)
    if not 1 <= p <= k:
        raise UsageError(f"--p {p} must lie in [1, k={k}]")
    idx = args.images if args.images else list(data.split.test_images[:args.max_images])
    bad = [i for i in idx if not 0 <= i < data.bank.num_images]
    if bad:
        raise UsageError(f"image indices out of range: {bad}")
    classes = data.split.all_classes()
    text = model.class_embeddings(data.docs.embeddings, classes)
    with nx.no_grad():
        img = model.encode_images(data.bank.features[np.asarray(idx, dtype=np.int64)])
    pairs = []
    for i, B_V in zip(idx, img.B.data):
        for c, B_T in zip(classes, text.B.data):
            cos = al.cosine_blocks(B_V[None], B_T[None]).data
            pairs.append({"image": int(i), "class": int(c), "cos": cos.tolist(),
                          "top_cos": al.top_cos(B_V, B_T, p).astype(int).tolist(),
                          "S_p": al.partial_score_from_cosine(cos, p)})
    print(json.dumps({"p": p, "k": k, "pairs": pairs}))
    return EXIT_OK


def _attention(trace_array: np.ndarray) -> list:
    z = trace_array - trace_array.max(axis=-1, keepdims=True)
    a = np.exp(z)
    return (a / a.sum(axis=-1, keepdims=True)).tolist()


def cmd_diagnose(args) -> int:
    ckpt, model, data = _open(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    split = data.split
    classes = sorted(split.seen) + sorted(split.unseen)
    text = model.class_embeddings(data.docs.embeddings, classes)
    test = np.asarray(split.test_images, dtype=np.int64)
    feats = data.bank.features[test]
    with nx.no_grad():
        img = model.encode_images(feats)
    sv_t = circular_variance(text.B).data
    sv_v = circular_variance(img.B).data
    svar = {"S_var_V": float(np.mean(sv_v)), "S_var_T": float(np.mean(sv_t)),
            "per_class_T": {str(c): float(v) for c, v in zip(classes, sv_t)}}
    (out / "svar.json").write_text(json.dumps(svar, indent=1, sort_keys=True) + "\n")

    M_T = redundancy_matrix(text.E_L).data
    M_V = redundancy_matrix(img.E_L).data
    red = {"text": {str(c): m.tolist() for c, m in zip(classes, M_T)},
           "image_mean": M_V.mean(axis=0).tolist()}
    (out / "redundancy.json").write_text(json.dumps(red) + "\n")

    shown = test[:args.max_images]
    with nx.no_grad():
        img_small = model.encode_images(data.bank.features[shown])
    img_att = _attention(img_small.trace.as_array())  # [N, l, k, n]
    att = {"text": {str(c): _attention(tr.as_array()) for c, tr in zip(classes, text.traces)},
           "image": {str(int(i)): a for i, a in zip(shown, img_att)}}
    (out / "attention.json").write_text(json.dumps(att) + "\n")

    labels = data.bank.labels[test]
    with open(out / "embeddings.tsv", "w") as fh:
        r = img.B.shape[-1]
        fh.write("\t".join(["modality", "item", "class", "view"] +
                           [f"d{j}" for j in range(r)]) + "\n")
        for c, B in zip(classes, text.B.data):
            for v, row in enumerate(B):
                fh.write("\t".join(["text", str(c), str(c), str(v)] +
                                   [repr(float(x)) for x in row]) + "\n")
        for i, y, B in zip(test, labels, img.B.data):
            for v, row in enumerate(B):
                fh.write("\t".join(["image", str(int(i)), str(int(y)), str(v)] +
                                   [repr(float(x)) for x in row]) + "\n")
    print(json.dumps({"out": str(out), "S_var_V": svar["S_var_V"], "S_var_T": svar["S_var_T"]}))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.tol < 0 or args.h <= 0:
        raise UsageError("need --tol >= 0 and --h > 0")
    reports = gradient_suite(seed=args.seed, tol=args.tol, h=args.h,
                             max_per_param=None if args.full else 6)
    ok = True
    for name in GRAD_SUITE_TERMS:
        rep = reports[name]
        print(f"{name:7s} {rep.summary()}")
        if not rep.passed:
            ok = False
            worst = sorted(rep.failures, key=lambda e: -e.error)[:5]
            for e in worst:
                print(f"        {e.name}{list(e.index)} analytic={e.analytic:.10g} "
                      f"numeric={e.numeric:.10g} err={e.error:.3g}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "eval": cmd_eval,
            "score": cmd_score, "diagnose": cmd_diagnose, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"emdepart: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (nx.NonFiniteError, TrainingError, FloatingPointError) as e:
        print(f"emdepart: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError, struct.error) as e:
        print(f"emdepart: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
