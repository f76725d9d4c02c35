"""Command-line entry point.

Exit status: 0 on success, 1 on validation failures (bad flags, bad input
files, failed checks), 2 on numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys

import numpy as np

from . import io, plotting
from .bprw import BprwConfig, reweight_classes
from .errors import NumericError
from .gauss import LossParams, weighted_mix
from .inference import (ClassPromptSet, eval_hierarchy_inclusion, filter_prompts, traversal_metrics,
                        traverse, zsc_classify)
from .synth import (ABLATION_COLUMNS, TrainerConfig, TrainResult, ablation_report, generate_corpus,
                    hierarchy_corpus, train)

log = logging.getLogger("probemb")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream (default: 0)")
    p.add_argument("--out", default=None,
                   help=f"output directory (default: ${io.OUTPUT_DIR_ENV}/<command> "
                        "or probemb-out/<command>)")


def _add_loss_flags(p, alpha1=1e-7, alpha2=1e-3):
    p.add_argument("--alpha1", type=float, default=alpha1,
                   help="weight of image-in-text inclusion (default: %(default)s)")
    p.add_argument("--alpha2", type=float, default=alpha2,
                   help="weight of original-in-masked inclusion (default: %(default)s)")
    p.add_argument("--beta", type=float, default=0.0, help="VIB weight (default: %(default)s)")
    p.add_argument("--c", type=float, default=10.0,
                   help="inclusion logit scale (default: %(default)s)")
    p.add_argument("--eps-log", type=float, default=-10.0,
                   help="log of the inclusion precision multiplier (default: %(default)s)")


def _add_trainer_flags(p):
    p.add_argument("--n-images", type=int, default=32, help="(default: %(default)s)")
    p.add_argument("--n-texts", type=int, default=32, help="(default: %(default)s)")
    p.add_argument("--n-attributes", type=int, default=8, help="(default: %(default)s)")
    p.add_argument("--n-classes", type=int, default=0,
                   help="exclusive class attributes, 0 for none (default: %(default)s)")
    p.add_argument("--dim", type=int, default=16, help="embedding dimension (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-2, help="(default: %(default)s)")
    p.add_argument("--steps", type=int, default=2000, help="(default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="images/texts per step; full batch when omitted")
    p.add_argument("--mask-pair-fraction", type=float, default=0.125, help="(default: %(default)s)")
    p.add_argument("--mask-ratio", type=float, default=0.75, help="(default: %(default)s)")
    p.add_argument("--init-log-var", type=float, default=-10.0, help="(default: %(default)s)")
    p.add_argument("--init-a", type=float, default=10.0, help="(default: %(default)s)")
    p.add_argument("--init-b", type=float, default=-10.0, help="(default: %(default)s)")


def build_parser():
    parser = _Parser(prog="probemb", description="Probabilistic Gaussian embedding toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("oracle-check", help="compare analytic results with brute-force oracles")
    p.add_argument("--mc-samples", type=int, default=1_000_000,
                   help="Monte-Carlo draws per CSD pair (default: %(default)s)")
    _add_common(p)

    p = sub.add_parser("train-synthetic", help="fit Gaussian embeddings on a synthetic corpus")
    _add_trainer_flags(p)
    _add_loss_flags(p)
    _add_common(p)

    p = sub.add_parser("bprw", help="Bayesian prompt re-weighting per class")
    p.add_argument("--prompts", required=True, help="prompt (text) embedding file")
    p.add_argument("--images", required=True, help="image embedding file")
    p.add_argument("--classes", required=True, help="JSON: class id -> list of prompt ids")
    p.add_argument("--few-shot-labels", default=None,
                   help="JSON: image id -> class id; enables the few-shot mode")
    p.add_argument("--alpha", type=float, default=None,
                   help="Dirichlet concentration (default: 5 zero-shot, 2 few-shot)")
    p.add_argument("--eps-cov", type=float, default=0.02, help="(default: %(default)s)")
    p.add_argument("--m", type=int, default=5, help="nearest images per class (default: %(default)s)")
    p.add_argument("--k", type=int, default=20, help="draws per image (default: %(default)s)")
    p.add_argument("--tol", type=float, default=1e-6, help="(default: %(default)s)")
    p.add_argument("--max-iters", type=int, default=200, help="(default: %(default)s)")
    _add_common(p)

    p = sub.add_parser("zsc", help="zero-shot classification against prompt ensembles")
    p.add_argument("--input", required=True, help="image embedding file")
    p.add_argument("--prompts", required=True, help="prompt (text) embedding file")
    p.add_argument("--classes", required=True, help="JSON: class id -> list of prompt ids")
    p.add_argument("--weights", default=None, help="weights.json written by bprw")
    p.add_argument("--filter", choices=("none", "sigma_stats", "top_k"), default="none",
                   help="(default: %(default)s)")
    p.add_argument("--top-k", type=int, default=None, help="prompts kept by top_k")
    p.add_argument("--n-std", type=float, default=1.0,
                   help="sigma_stats threshold in standard deviations (default: %(default)s)")
    p.add_argument("--labels", default=None, help="JSON: image id -> class id, for accuracy")
    _add_common(p)

    p = sub.add_parser("traverse", help="root-to-caption traversal per image")
    p.add_argument("--images", default=None, help="image embedding file")
    p.add_argument("--captions", default=None, help="caption embedding file")
    p.add_argument("--null-id", default=None, help="id of the null-text record in --captions")
    p.add_argument("--ground-truth", default=None,
                   help="JSON: image id -> caption ids, general to specific")
    p.add_argument("--demo", action="store_true",
                   help="use the constructed 3-level hierarchy instead of input files")
    p.add_argument("--steps", type=int, default=50, help="(default: %(default)s)")
    p.add_argument("--eps-log", type=float, default=0.0,
                   help="log of the inclusion precision multiplier (default: %(default)s)")
    p.add_argument("--root", choices=("inclusion", "null", "both"), default="both",
                   help="(default: %(default)s)")
    _add_common(p)

    p = sub.add_parser("hier-eval", help="fraction of hierarchy pairs judged included")
    p.add_argument("--embeddings", default=None, help="embedding file holding every pair member")
    p.add_argument("--pairs", default=None, help="CSV with columns specific_id,general_id")
    p.add_argument("--demo", action="store_true", help="use the constructed 3-level hierarchy")
    p.add_argument("--eps-log", type=float, default=0.0, help="(default: %(default)s)")
    _add_common(p)

    p = sub.add_parser("report", help="loss ablation on a synthetic corpus, with figures")
    _add_trainer_flags(p)
    p.add_argument("--alpha1-on", type=float, default=1.0,
                   help="alpha1 used by the ablation rows that enable it (default: %(default)s)")
    p.add_argument("--alpha2-on", type=float, default=1.0,
                   help="alpha2 used by the ablation rows that enable it (default: %(default)s)")
    p.add_argument("--beta", type=float, default=1e-3, help="(default: %(default)s)")
    p.add_argument("--c", type=float, default=10.0, help="(default: %(default)s)")
    p.add_argument("--eps-log", type=float, default=-10.0, help="(default: %(default)s)")
    _add_common(p)
    return parser


def _config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose", "func")}


def _trainer_cfg(args, loss):
    return TrainerConfig(dim=args.dim, lr=args.lr, steps=args.steps, batch_size=args.batch_size,
                         mask_pair_fraction=args.mask_pair_fraction, mask_ratio=args.mask_ratio,
                         init_log_var=args.init_log_var, init_a=args.init_a,
                         init_b=args.init_b, loss=loss, seed=args.seed)


def _corpus(args):
    return generate_corpus(args.n_images, args.n_texts, args.n_attributes, args.seed,
                           mask_pair_fraction=args.mask_pair_fraction,
                           mask_ratio=args.mask_ratio, n_classes=args.n_classes)


def _write_trace(trace, path):
    io.write_csv(trace, TrainResult.TRACE_COLUMNS, path)


def cmd_oracle_check(args, out):
    from .checks import run_all

    results = run_all(args.seed, args.mc_samples)
    rows = [dataclasses.asdict(r) for r in results]
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  "
              f"value={r.value:.3e}  tol={r.tolerance:.1e}  {r.detail}")
    path = out / "oracle_check.csv"
    io.write_csv(rows, ("name", "passed", "value", "tolerance", "detail"), path)
    return [], [path], 0 if all(r.passed for r in results) else 1


def cmd_train_synthetic(args, out):
    loss = LossParams.from_eps_log(args.eps_log, c=args.c, alpha1=args.alpha1,
                                   alpha2=args.alpha2, beta=args.beta)
    corpus = _corpus(args)
    result = train(corpus, _trainer_cfg(args, loss))
    t = result.table
    masked_ids = {l.masked_id for l in corpus.masked_links}
    images = [t.embedding(i) for i in corpus.image_ids]
    texts = [t.embedding(i) for i in corpus.text_ids]
    masked = []
    for l in corpus.masked_links:
        z = t.embedding(l.masked_id)
        masked.append(dataclasses.replace(z, modality=l.modality))
    outputs = [out / "corpus.json", out / "images.jsonl", out / "texts.jsonl",
               out / "masked.jsonl", out / "loss_trace.csv", out / "scalars.json",
               out / "loss_trace.png"]
    io.write_json(corpus.to_dict(), outputs[0])
    io.save_embeddings(images, outputs[1])
    io.save_embeddings(texts, outputs[2])
    io.save_embeddings(masked, outputs[3])
    _write_trace(result.trace, outputs[4])
    io.write_json({"a": t.a, "b": t.b, "masked_ids": sorted(masked_ids)}, outputs[5])
    plotting.loss_breakdown(result.trace, outputs[6])
    if args.n_classes:
        classes = {f"class{k}": [corpus.text_ids[j] for j in np.flatnonzero(corpus.text_attrs[:, k])]
                   for k in range(args.n_classes)}
        labels = {i: f"class{int(c)}" for i, c in zip(corpus.image_ids, corpus.image_labels)}
        outputs += [out / "classes.json", out / "labels.json"]
        io.write_json(classes, outputs[-2])
        io.write_json(labels, outputs[-1])
    last = result.trace[-1]
    print(f"trained {args.steps} steps: final objective {last['total']:.6g}")
    return [], outputs, 0


def _load_by_id(path):
    items = io.load_embeddings(path)
    return items, {z.id: z for z in items}


def _class_prompts(classes, prompt_by_id):
    out = {}
    for cid, ids in classes.items():
        missing = [i for i in ids if i not in prompt_by_id]
        if missing:
            raise UsageError(f"class {cid!r} references unknown prompts {missing[:3]}")
        if not ids:
            raise UsageError(f"class {cid!r} has no prompts")
        out[cid] = [prompt_by_id[i] for i in ids]
    return out


def cmd_bprw(args, out):
    _, prompt_by_id = _load_by_id(args.prompts)
    images, _ = _load_by_id(args.images)
    class_prompts = _class_prompts(io.read_json(args.classes), prompt_by_id)
    labels = None
    few_shot = args.few_shot_labels is not None
    if few_shot:
        label_map = io.read_json(args.few_shot_labels)
        labels = [label_map.get(z.id) for z in images]
    alpha = args.alpha if args.alpha is not None else (2.0 if few_shot else 5.0)
    cfg = BprwConfig(alpha=alpha, eps_cov=args.eps_cov, M=args.m, K=args.k,
                     max_iters=args.max_iters, tol=args.tol)
    weights, rows, trace = {}, [], []
    results = reweight_classes(class_prompts, images, cfg, args.seed, labels)
    for cid, prompts in class_prompts.items():
        res = results[cid]
        weights[cid] = {"prompt_ids": [p.id for p in prompts], "pi": res.weights.pi.tolist(),
                        "converged": res.converged, "iterations": res.iterations}
        rows += [{"class_id": cid, "prompt_id": p.id, "weight": float(w)}
                 for p, w in zip(prompts, res.weights.pi)]
        trace += [{"class_id": cid, "iteration": i, "log_posterior": v}
                  for i, v in enumerate(res.log_posterior)]
    outputs = [out / "weights.json", out / "weights.csv", out / "bprw_trace.csv",
               out / "max_weight.png"]
    io.write_json(weights, outputs[0])
    io.write_csv(rows, ("class_id", "prompt_id", "weight"), outputs[1])
    io.write_csv(trace, ("class_id", "iteration", "log_posterior"), outputs[2])
    plotting.weight_bars({c: w["pi"] for c, w in weights.items()}, outputs[3])
    print(f"re-weighted {len(weights)} classes")
    inputs = [args.prompts, args.images, args.classes] + ([args.few_shot_labels] if few_shot else [])
    return inputs, outputs, 0


def cmd_zsc(args, out):
    images, _ = _load_by_id(args.input)
    _, prompt_by_id = _load_by_id(args.prompts)
    class_prompts = _class_prompts(io.read_json(args.classes), prompt_by_id)
    weights = io.read_json(args.weights) if args.weights else None
    sets = []
    for cid, prompts in class_prompts.items():
        if weights is not None:
            w = weights.get(cid)
            if w is None or w["prompt_ids"] != [p.id for p in prompts]:
                raise UsageError(f"weights file does not match the prompts of class {cid!r}")
            mixed = weighted_mix(prompts, w["pi"], id=cid)
            sets.append(ClassPromptSet(cid, tuple(prompts), mixed))
            continue
        if args.filter != "none":
            prompts = filter_prompts(prompts, args.filter, args.top_k, args.n_std)
        sets.append(ClassPromptSet.from_prompts(cid, prompts))
    preds, scores = [], []
    for z in images:
        cid, s = zsc_classify(z, sets)
        preds.append({"image_id": z.id, "predicted_class": cid, "csd": float(np.min(s))})
        scores += [{"image_id": z.id, "class_id": c.class_id, "csd": float(v)}
                   for c, v in zip(sets, s)]
    outputs = [out / "predictions.csv", out / "scores.csv"]
    io.write_csv(preds, ("image_id", "predicted_class", "csd"), outputs[0])
    io.write_csv(scores, ("image_id", "class_id", "csd"), outputs[1])
    inputs = [args.input, args.prompts, args.classes] + ([args.weights] if args.weights else [])
    if args.labels:
        labels = io.read_json(args.labels)
        acc = float(np.mean([labels.get(p["image_id"]) == p["predicted_class"] for p in preds]))
        outputs.append(out / "metrics.json")
        io.write_json({"accuracy": acc, "n_images": len(preds)}, outputs[-1])
        inputs.append(args.labels)
        print(f"top-1 accuracy {acc:.4f} over {len(preds)} images")
    else:
        print(f"classified {len(preds)} images")
    return inputs, outputs, 0


def _demo_hierarchy(args, out):
    hc = hierarchy_corpus(seed=args.seed)
    files = [out / "captions.jsonl", out / "images.jsonl", out / "ground_truth.json"]
    io.save_embeddings(hc.captions + [hc.null_text], files[0])
    io.save_embeddings(hc.images, files[1])
    io.write_json(hc.ground_truth, files[2])
    return hc, files


def cmd_traverse(args, out):
    inputs, outputs = [], []
    if args.demo:
        hc, files = _demo_hierarchy(args, out)
        images, pool, null, gt = hc.images, hc.captions, hc.null_text, hc.ground_truth
        levels = hc.levels
        outputs += files
    else:
        if not (args.images and args.captions and args.null_id):
            raise UsageError("traverse needs --images, --captions and --null-id (or --demo)")
        images = io.load_embeddings(args.images)
        captions = io.load_embeddings(args.captions)
        nulls = [c for c in captions if c.id == args.null_id]
        if not nulls:
            raise UsageError(f"no caption with id {args.null_id!r}")
        null = nulls[0]
        pool = [c for c in captions if c.id != args.null_id]
        gt = io.read_json(args.ground_truth) if args.ground_truth else None
        levels = {}
        if gt:
            for chain in gt.values():
                for lvl, cid in enumerate(chain):
                    levels.setdefault(cid, lvl)
        inputs += [args.images, args.captions] + ([args.ground_truth] if gt else [])
    eps = math.exp(args.eps_log)
    modes = ("inclusion", "null") if args.root == "both" else (args.root,)
    path_rows, metric_rows, all_paths = [], [], {}
    for mode in modes:
        paths = [traverse(z, pool, null, args.steps, eps, mode) for z in images]
        all_paths[mode] = [p.to_dict() for p in paths]
        for p in paths:
            path_rows += [{"root": mode, "image_id": p.image_id, "step": i, "t": t,
                           "caption_id": c} for i, (t, c) in enumerate(p.steps)]
        if gt:
            m = traversal_metrics(paths, gt)
            metric_rows.append({"root": mode, **dataclasses.asdict(m)})
            print(f"{mode:>9} root: precision {m.precision:.4f}  recall {m.recall:.4f}  "
                  f"root recall {m.root_recall:.4f}")
        if levels:
            outputs.append(out / f"traversal_levels_{mode}.png")
            plotting.traversal_levels(paths, levels, outputs[-1])
    outputs += [out / "paths.json", out / "paths.csv"]
    io.write_json(all_paths, out / "paths.json")
    io.write_csv(path_rows, ("root", "image_id", "step", "t", "caption_id"), out / "paths.csv")
    if metric_rows:
        outputs.append(out / "metrics.csv")
        io.write_csv(metric_rows, ("root", "precision", "recall", "root_recall"), outputs[-1])
    return inputs, outputs, 0


def cmd_hier_eval(args, out):
    inputs, outputs = [], []
    if args.demo:
        hc, files = _demo_hierarchy(args, out)
        by_id = {z.id: z for z in hc.captions + hc.images}
        id_pairs = []
        for img, (g, m, s) in hc.ground_truth.items():
            id_pairs += [(img, s), (s, m), (m, g)]
        id_pairs = list(dict.fromkeys(id_pairs))
        outputs += files
    else:
        if not (args.embeddings and args.pairs):
            raise UsageError("hier-eval needs --embeddings and --pairs (or --demo)")
        _, by_id = _load_by_id(args.embeddings)
        rows = io.read_csv(args.pairs)
        try:
            id_pairs = [(r["specific_id"], r["general_id"]) for r in rows]
        except KeyError:
            raise UsageError("pairs CSV needs columns specific_id,general_id") from None
        missing = [i for p in id_pairs for i in p if i not in by_id]
        if missing:
            raise UsageError(f"pairs reference unknown ids {missing[:3]}")
        inputs += [args.embeddings, args.pairs]
    res = eval_hierarchy_inclusion([(by_id[s], by_id[g]) for s, g in id_pairs],
                                   math.exp(args.eps_log))
    outputs += [out / "hier_eval.json", out / "h_values.csv", out / "h_hist.png"]
    io.write_json({"fraction": res.fraction, "n_pairs": len(id_pairs)}, outputs[-3])
    io.write_csv([{"specific_id": s, "general_id": g, "h": float(h)}
                  for (s, g), h in zip(id_pairs, res.h_values)],
                 ("specific_id", "general_id", "h"), outputs[-2])
    plotting.h_histogram(res.h_values, outputs[-1])
    print(f"included fraction {res.fraction:.4f} over {len(id_pairs)} pairs")
    return inputs, outputs, 0


def cmd_report(args, out):
    corpus = _corpus(args)
    grid = [("baseline", 0.0, 0.0), ("inc_vt", args.alpha1_on, 0.0),
            ("inc_mask", 0.0, args.alpha2_on), ("inc_both", args.alpha1_on, args.alpha2_on)]
    cfgs = [_trainer_cfg(args, LossParams.from_eps_log(args.eps_log, c=args.c, alpha1=a1,
                                                       alpha2=a2, beta=args.beta))
            for _, a1, a2 in grid]
    names = [g[0] for g in grid]
    rows, results = ablation_report(corpus, cfgs, names, return_results=True)
    outputs = [out / "ablation.csv", out / "loss_curves.png", out / "uncertainty.png"]
    io.write_csv(rows, ABLATION_COLUMNS, outputs[0])
    plotting.loss_curves([r.trace for r in results], outputs[1], names)
    plotting.uncertainty_bars(rows, outputs[2])
    for name, r in zip(names, results):
        outputs.append(out / f"loss_trace_{name}.csv")
        _write_trace(r.trace, outputs[-1])
    for r in rows:
        print(f"{r['name']:>9}: var_img {r['mean_var_image']:.3e}  var_txt {r['mean_var_text']:.3e}"
              f"  masked-incl {r['masked_inclusion_fraction']:.3f}"
              f"  retrieval {r['retrieval_accuracy']:.3f}")
    return [], outputs, 0


COMMANDS = {
    "oracle-check": cmd_oracle_check,
    "train-synthetic": cmd_train_synthetic,
    "bprw": cmd_bprw,
    "zsc": cmd_zsc,
    "traverse": cmd_traverse,
    "hier-eval": cmd_hier_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = io.output_dir(args.out, args.command)
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, status = COMMANDS[args.command](args, out)
        io.write_manifest(out, ["probemb"] + argv, _config(args), args.seed, inputs, outputs)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return status


if __name__ == "__main__":
    sys.exit(main())
