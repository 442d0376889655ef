"""Command-line entry point: ``feainf <command> ...``.

Exit codes: 0 ok, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import checkpoint, config as cfgmod
from .inference import model_forward, predict
from .metrics import GroundTruth, binarize, bounding_box, confusion_metrics, proportion
from .pnm import PNMError, read_image, write_image
from .saliency import (ExplainError, explain, fixed_weight_saliency, make_node, sweep_lambda,
                       upsampled_similarity_baseline)
from .synthdata import generate, load_dataset, save_dataset
from .tensor import DomainError, ShapeError
from .training import TrainingDiverged, run_training, write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METHODS = ("adaptive-dm", "dm-fixed-λ", "upsample")
ALIASES = {"dm-fixed-lambda": "dm-fixed-λ", "dm-fixed": "dm-fixed-λ"}

log = logging.getLogger("feainf")


class DataError(Exception):
    pass


def threads():
    try:
        return max(1, int(os.environ.get("FEAINF_THREADS", "1")))
    except ValueError:
        return 1


def _load_model(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    model, _ = checkpoint.load(path)
    return model


def _load_image(path, model):
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    x = read_image(path)
    if x.shape != model.encoder_config.image_shape:
        raise DataError(f"{path}: image is {x.shape}, checkpoint expects "
                        f"{model.encoder_config.image_shape}")
    return x


def _load_split(path):
    if not os.path.exists(os.path.join(path, "labels.csv")):
        raise DataError(f"no dataset at {path} (labels.csv missing)")
    return load_dataset(path)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v):
    return repr(float(v))


# ----------------------------------------------------------------------
def cmd_gen_data(args, values):
    synth = cfgmod.section(values, "synth", args.seed)
    train, test = generate(synth)
    save_dataset(train, os.path.join(args.out, "train"))
    save_dataset(test, os.path.join(args.out, "test"))
    print(f"wrote {len(train)} train and {len(test)} test images to {args.out}")


def cmd_train(args, values):
    train_cfg = cfgmod.section(values, "train", args.seed)
    train = _load_split(os.path.join(args.data, "train"))
    test_dir = os.path.join(args.data, "test")
    test = _load_split(test_dir) if os.path.exists(test_dir) else None
    if not len(train):
        raise DataError(f"no training images in {args.data}")
    enc = cfgmod.encoder_config(values, train.images.shape[1:])
    model, history = run_training(
        train.images, train.labels, train_cfg,
        test.images if test is not None else None, test.labels if test is not None else None,
        encoder_config=enc)
    checkpoint.save(args.out, model, train_cfg)
    log_path = args.log or os.path.splitext(args.out)[0] + "_log.csv"
    write_history_csv(log_path, history)
    if history:
        last = history[-1]
        print(f"train_acc {last['train_acc']:.4f} test_acc {last['test_acc']:.4f}")
    else:
        print("epochs = 0: saved the initial model")


def cmd_predict(args, values):
    model = _load_model(args.checkpoint)
    docs = []
    for path in args.images:
        doc = predict(_load_image(path, model), model).to_dict()
        doc["image"] = path
        docs.append(doc)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(docs if len(docs) > 1 else docs[0], fh, indent=1)
            fh.write("\n")
    for d in docs:
        print(json.dumps(d) if not args.out else
              f"{d['image']}: {d['label']} P(disease)={d['prob_disease']:.4f}")


def _reasoning_trace(model, x, ex):
    out = model_forward(x[None], model)
    outcome = predict(x, model)
    g_pos = out["g_pos"].data[0]
    g_neg = out["g_neg"].data[0]
    r = ex.node.region
    node = ex.node
    return {
        "label": outcome.label_name,
        "prob_disease": outcome.prob_disease,
        "prob_normal": outcome.prob_normal,
        "region_logits": outcome.region_logits.tolist(),
        "chosen_region": outcome.region,
        "node": {"kind": node.kind, "region": node.region, "prototype": node.prototype},
        "top_prototypes": {
            "disease": sorted(({"prototype": int(j), "score": float(g_pos[r, j])}
                               for j in range(g_pos.shape[1])), key=lambda d: -d["score"])[:3],
            "normal": sorted(({"prototype": int(j), "score": float(g_neg[r, j])}
                              for j in range(g_neg.shape[1])), key=lambda d: -d["score"])[:3],
        },
        "lam0": list(ex.lam0),
        "lam_nu": ex.lam_nu,
        "tau": ex.saliency.tau,
        "search_table": [[k, v] for k, v in sorted(ex.table.items())],
    }


def cmd_explain(args, values):
    model = _load_model(args.checkpoint)
    x = _load_image(args.image, model)
    ex_cfg = cfgmod.section(values, "explain")
    ex = explain(model, x, kind=args.node, config=ex_cfg, prototype=args.prototype)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    s = ex.saliency.values
    write_image(os.path.join(args.out, f"{stem}_saliency.pgm"), s)
    np.savetxt(os.path.join(args.out, f"{stem}_saliency.csv"), s, delimiter=",", fmt="%.17g")
    trace = _reasoning_trace(model, x, ex)
    with open(os.path.join(args.out, f"{stem}_trace.json"), "w") as fh:
        json.dump(trace, fh, indent=1)
    print(f"{stem}: {trace['label']} P(disease)={trace['prob_disease']:.4f} "
          f"region {ex.node.region} lam_nu {ex.lam_nu:g} tau {ex.saliency.tau:.4f}")
    if args.mask:
        mask = read_image(args.mask)[:, :, 0] > 0.5
        if mask.any():
            gt = GroundTruth(box=bounding_box(mask), shape=mask.shape)
            print(f"proportion {proportion(s, gt):.4f} box_area {gt.region().mean():.4f}")


def _saliency_for(method, model, x, ex_cfg, lam):
    if method == "adaptive-dm":
        return explain(model, x, config=ex_cfg).saliency.values
    if method == "dm-fixed-λ":
        return fixed_weight_saliency(model, x, lam_nu=lam, config=ex_cfg)[0].values
    return upsampled_similarity_baseline(model, x, make_node(model, x)).values


def _score_image(job):
    ident, method, model, x, mask, ex_cfg, lam = job
    s = _saliency_for(method, model, x, ex_cfg, lam)
    dice, ppv, sens = confusion_metrics(binarize(s, ex_cfg.percentile), mask)
    prop = proportion(s, GroundTruth(box=bounding_box(mask), shape=mask.shape))
    return ident, dice, ppv, sens, prop


def cmd_eval_saliency(args, values):
    args.method = ALIASES.get(args.method, args.method)
    model = _load_model(args.checkpoint)
    data = _load_split(args.data)
    ex_cfg = cfgmod.section(values, "explain")
    jobs, skipped = [], 0
    for im in data:
        if not im.mask.any():
            skipped += 1
            continue
        if im.pixels.shape != model.encoder_config.image_shape:
            raise DataError(f"{im.id}: image is {im.pixels.shape}, checkpoint expects "
                            f"{model.encoder_config.image_shape}")
        jobs.append((im.id, args.method, model, im.pixels, im.mask.astype(bool), ex_cfg, args.lam))
    if args.limit is not None:
        jobs = jobs[:args.limit]
    if skipped:
        print(f"warning: skipped {skipped} images without a ground-truth mask", file=sys.stderr)
    n_workers = min(threads(), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            rows = list(pool.map(_score_image, jobs))
    else:
        rows = [_score_image(j) for j in jobs]
    out_rows = [[r[0]] + [_fmt(v) for v in r[1:]] for r in rows]
    if rows:
        means = np.mean(np.array([r[1:] for r in rows], dtype=float), axis=0)
        out_rows.append(["mean"] + [_fmt(v) for v in means])
        print(f"{args.method}: n={len(rows)} dice {means[0]:.4f} ppv {means[1]:.4f} "
              f"sensitivity {means[2]:.4f} proportion {means[3]:.4f}")
    else:
        print(f"{args.method}: no images with ground truth", file=sys.stderr)
    _write_rows(args.out, ["id", "dice", "ppv", "sensitivity", "proportion"], out_rows)


def cmd_sweep_lambda(args, values):
    model = _load_model(args.checkpoint)
    x = _load_image(args.image, model)
    ex_cfg = cfgmod.section(values, "explain")
    if args.lambdas:
        try:
            lams = [float(v) for v in args.lambdas.split(",") if v.strip()]
        except ValueError:
            raise cfgmod.ConfigError(f"bad --lambdas list {args.lambdas!r}") from None
    else:
        lams = list(ex_cfg.candidates)
    rows, _ = sweep_lambda(model, x, lams, kind=args.node, config=ex_cfg)
    _write_rows(args.out, ["lam_nu", "sim", "mas", "tau", "zero_map"],
                [[_fmt(r["lam_nu"]), _fmt(r["sim"]), _fmt(r["mas"]), _fmt(r["tau"]),
                  int(r["zero_map"])] for r in rows])
    print(f"wrote {len(rows)} rows to {args.out}")


# ----------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, default=None, help="overrides every seed setting")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="feainf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory (gets train/ and test/)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("data", help="dataset directory with train/ and test/")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV (default: <out>_log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="classify images")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", help="write the JSON here instead of stdout")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", parents=[common], help="saliency map and reasoning trace")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--node", choices=("feature", "prototype"), default="feature")
    p.add_argument("--prototype", type=int, default=None, help="disease prototype for --node prototype")
    p.add_argument("--mask", help="ground-truth mask PGM; prints the box proportion")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval-saliency", parents=[common], help="localisation metrics over a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset directory (labels.csv, images/, masks/)")
    p.add_argument("--method", choices=METHODS + tuple(ALIASES), default="adaptive-dm")
    p.add_argument("--lam", type=float, default=1.0, help="weight multiplier for dm-fixed-λ")
    p.add_argument("--limit", type=int, default=None, help="score at most this many images")
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_eval_saliency)

    p = sub.add_parser("sweep-lambda", parents=[common], help="quality over a list of weights")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--lambdas", help="comma-separated weight multipliers (default: candidates)")
    p.add_argument("--node", choices=("feature", "prototype"), default="feature")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_sweep_lambda)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        values = cfgmod.load(args.config)
        args.func(args, values)
    except cfgmod.ConfigError as exc:
        print(f"feainf: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"feainf: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ExplainError, DomainError, FloatingPointError) as exc:
        print(f"feainf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PNMError, checkpoint.CheckpointError, ShapeError, OSError) as exc:
        print(f"feainf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
