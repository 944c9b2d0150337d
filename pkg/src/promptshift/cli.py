"""Batch entry point: generate-data, pretrain, fewshot, evaluate, analyze,
report, plot.

Every subcommand resolves the config (file + dotted overrides), derives the
run directory from its hash, writes the manifest before any computation,
and exits 0 on success, 2 on configuration errors, and 1 on runtime
failures, with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .config import RunLayout, data_spec, resolve_config, train_config, write_json
from .data import generate_pair, labels_of, save_jsonl
from .errors import ConfigError, InputError
from .evaluation import RunReport, aggregate, tfidf_class_similarity
from .methods import evaluate_checkpoint, fewshot_protocol, frozen_eval
from .serialize import write_bytes_if_changed
from .training import Checkpoint, ModelBundle, method_spec, predict_probs, pretrain


def _echo(**payload) -> None:
    print(json.dumps(payload, sort_keys=True), flush=True)


def _bundle_and_pair(config, method: str | None = None):
    spec = data_spec(config)
    pair = generate_pair(spec)
    bundle = ModelBundle.build(train_config(config, method=method), spec)
    return spec, pair, bundle


def cmd_generate_data(args, config, layout: RunLayout) -> int:
    spec, pair, _ = _bundle_and_pair(config)
    out = layout.data_dir
    save_jsonl(out / "source_train.jsonl", pair.source_train, pair.labels)
    save_jsonl(out / "source_val.jsonl", pair.source_val, pair.labels)
    save_jsonl(out / "target_pool.jsonl", pair.target_pool, pair.labels)
    save_jsonl(out / "target_eval.jsonl", pair.target_eval, pair.labels)
    np.save(out / "target_pool_labels.npy", pair.target_pool_labels)
    write_json(out / "spec.json", spec.as_dict())
    _echo(event="generate-data", run=layout.hash,
          sizes={"source_train": len(pair.source_train),
                 "source_val": len(pair.source_val),
                 "target_pool": len(pair.target_pool),
                 "target_eval": len(pair.target_eval)})
    return 0


def cmd_pretrain(args, config, layout: RunLayout) -> int:
    method_spec(args.method)  # fail fast on unknown ids
    spec, pair, bundle = _bundle_and_pair(config, args.method)
    for seed in config["run"]["seeds"]:
        cfg = train_config(config, seed=seed, method=args.method)
        log: list = []
        checkpoint = pretrain(pair, args.method, cfg, bundle, log=log)
        checkpoint.save(layout.checkpoint_path(args.method, seed))
        lines = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in log)
        write_bytes_if_changed(layout.log_path(args.method, seed),
                               lines.encode("utf-8"))
        _echo(event="pretrain", method=args.method, seed=seed,
              steps=checkpoint.step, best_metric=checkpoint.best_metric,
              best_step=checkpoint.best_step, aborted=checkpoint.aborted,
              ball_violations=checkpoint.ball.get("violations", 0))
    return 0


def _load_checkpoints(args, config, layout: RunLayout) -> dict[int, Checkpoint]:
    out = {}
    for seed in config["run"]["seeds"]:
        path = layout.checkpoint_path(args.method, seed)
        if not path.exists():
            raise InputError(f"missing checkpoint {path}; run pretrain first")
        out[seed] = Checkpoint.load(path)
    return out


def cmd_evaluate(args, config, layout: RunLayout) -> int:
    spec, pair, bundle = _bundle_and_pair(
        config, args.method if args.method != "frozen" else None)
    if args.method == "frozen":
        reports = []
        for seed in config["run"]["seeds"]:
            cfg = train_config(config, seed=seed)
            preds_path = layout.report_path("zeroshot",
                                            f"frozen_seed{seed}_preds")
            preds_path = preds_path.with_suffix(".npy")
            prompt = bundle.fresh_prompt(cfg, method_spec("frozen"))
            probs = predict_probs(pair.target_eval, prompt, bundle,
                                  bundle.fresh_backbone())
            np.save(preds_path, np.argmax(probs, axis=1))
            rep = frozen_eval(pair.target_eval, cfg, bundle,
                              config_hash=layout.hash,
                              predictions_ref=str(preds_path.name))
            rep.seed = seed
            reports.append(rep)
    else:
        checkpoints = _load_checkpoints(args, config, layout)
        reports = []
        for seed, ck in sorted(checkpoints.items()):
            preds_path = layout.report_path(
                "zeroshot", f"{args.method}_seed{seed}_preds").with_suffix(".npy")
            probs = predict_probs(pair.target_eval, ck.best_prompt, bundle,
                                  ck.backbone)
            np.save(preds_path, np.argmax(probs, axis=1))
            rep = evaluate_checkpoint(ck, pair.target_eval, bundle,
                                      config_hash=layout.hash,
                                      predictions_ref=str(preds_path.name))
            reports.append(rep)
    for rep in reports:
        write_json(layout.report_path("zeroshot",
                                      f"{args.method}_seed{rep.seed}"),
                   rep.to_dict())
        _echo(event="evaluate", method=args.method, seed=rep.seed,
              accuracy=rep.metrics["accuracy"], f1=rep.metrics["f1"])
    return 0


def cmd_fewshot(args, config, layout: RunLayout) -> int:
    spec, pair, bundle = _bundle_and_pair(config, args.method)
    checkpoints = _load_checkpoints(args, config, layout)
    cfg = train_config(config, method=args.method)
    reports = fewshot_protocol(pair, checkpoints, cfg, bundle,
                               n_splits=config["run"]["n_splits"],
                               split_seed=config["run"]["split_seed"],
                               config_hash=layout.hash,
                               workers=args.workers or config["run"]["workers"])
    for rep in reports:
        name = f"{args.method}_s{rep.sample_index:02d}_seed{rep.seed}"
        write_json(layout.report_path("fewshot", name), rep.to_dict())
    _echo(event="fewshot", method=args.method, runs=len(reports),
          splits=config["run"]["n_splits"], seeds=config["run"]["seeds"])
    return 0


def _read_reports(layout: RunLayout, grouping: str) -> list[RunReport]:
    folder = layout.root / "reports" / grouping
    reports = []
    if folder.exists():
        for path in sorted(folder.glob("*.json")):
            with open(path, "r", encoding="utf-8") as fh:
                reports.append(RunReport.from_dict(json.load(fh)))
    return reports


def cmd_report(args, config, layout: RunLayout) -> int:
    run = config["run"]
    wrote_any = False
    for grouping in (("fewshot", "zeroshot") if args.grouping == "all"
                     else (args.grouping,)):
        reports = _read_reports(layout, grouping)
        if not reports:
            continue
        wrote_any = True
        agg = aggregate(reports, grouping=grouping, reference=run["reference"],
                        metric=run["metric"], paired=run["paired"],
                        ttest_variant=run["ttest"])
        write_json(layout.path("reports", f"aggregate_{grouping}.json"),
                   agg.to_dict())
        lines = ["method,mean,std,n_runs,t_vs_reference,p_vs_reference"]
        for method in sorted(agg.methods):
            entry = agg.methods[method]
            tt = agg.ttests.get(method, {})
            lines.append(",".join([
                method, f"{entry['mean']:.6f}", f"{entry['std']:.6f}",
                str(entry["n_runs"]), str(tt.get("t", "")),
                str(tt.get("p", ""))]))
        write_bytes_if_changed(layout.path("reports", f"aggregate_{grouping}.csv"),
                               ("\n".join(lines) + "\n").encode("utf-8"))
        _echo(event="report", grouping=grouping, complete=agg.complete,
              methods={m: round(v["mean"], 4) for m, v in agg.methods.items()})
    if not wrote_any:
        raise InputError("no reports found; run evaluate or fewshot first")
    return 0


def _class_corpora(examples, labels, n_classes):
    corpora = {c: [] for c in range(n_classes)}
    for ex, y in zip(examples, labels):
        corpora[int(y)].append(list(ex.tokens))
    return corpora


def cmd_analyze(args, config, layout: RunLayout) -> int:
    spec, pair, bundle = _bundle_and_pair(config)
    if spec.task != "token-stats":
        raise ConfigError("analyze needs token sequences; task is toy2d")
    src = _class_corpora(pair.source_train, labels_of(pair.source_train),
                         spec.n_classes)
    tgt = _class_corpora(pair.target_pool, pair.target_pool_labels,
                         spec.n_classes)
    rows, cols, sim = tfidf_class_similarity(src, tgt)
    payload = {
        "source_classes": [bundle.labels[c] for c in rows],
        "target_classes": [bundle.labels[c] for c in cols],
        "similarity": [[float(v) for v in row] for row in sim],
    }
    write_json(layout.path("reports", "analysis", "tfidf_similarity.json"),
               payload)
    _echo(event="analyze", similarity_diag=[round(float(sim[i, i]), 4)
                                            for i in range(len(rows))])
    return 0


def cmd_plot(args, config, layout: RunLayout) -> int:
    from . import plots
    spec, pair, bundle = _bundle_and_pair(config)
    made = []

    # confusion heatmaps from whichever reports exist
    for grouping in ("zeroshot", "fewshot"):
        by_method: dict[str, list[RunReport]] = {}
        for rep in _read_reports(layout, grouping):
            by_method.setdefault(rep.method, []).append(rep)
        for method, reps in sorted(by_method.items()):
            matrix = np.mean([np.asarray(r.confusion, dtype=float)
                              for r in reps], axis=0)
            row_sums = matrix.sum(axis=1, keepdims=True)
            matrix = 100.0 * matrix / np.maximum(row_sums, 1e-12)
            path = layout.plot_path(f"confusion_{grouping}_{method}")
            plots.heatmap_svg(matrix, bundle.labels, bundle.labels, path,
                              f"{method} {grouping} confusion (%)",
                              fig_hash=layout.hash, fmt="{:.1f}")
            made.append(path.name)

    # tf-idf class similarity heatmap
    sim_path = layout.root / "reports" / "analysis" / "tfidf_similarity.json"
    if sim_path.exists():
        with open(sim_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        path = layout.plot_path("tfidf_similarity")
        plots.heatmap_svg(np.asarray(payload["similarity"]),
                          payload["source_classes"], payload["target_classes"],
                          path, "class similarity source vs target",
                          fig_hash=layout.hash)
        made.append(path.name)

    # learning curves from training logs
    logs_dir = layout.root / "logs"
    if logs_dir.exists():
        curves: dict[str, list[dict]] = {}
        for log_file in sorted(logs_dir.glob("*_seed*.jsonl")):
            method = log_file.stem.rsplit("_seed", 1)[0]
            if method not in curves:  # first seed per method
                with open(log_file, "r", encoding="utf-8") as fh:
                    curves[method] = [json.loads(line) for line in fh]
        if curves:
            path = layout.plot_path("learning_curves")
            plots.learning_curves_svg(curves, path, fig_hash=layout.hash)
            made.append(path.name)

    # decision boundaries for the 2-D task
    if spec.task == "toy2d":
        for ck_file in sorted((layout.root / "checkpoints").glob("*.ck")) \
                if (layout.root / "checkpoints").exists() else []:
            ck = Checkpoint.load(ck_file)
            path = layout.plot_path(f"boundary_{ck_file.stem}")
            plots.decision_boundary_svg(
                ck.best_prompt, ck.backbone, bundle, pair, path,
                fig_hash=layout.hash,
                resolution=config["run"]["grid_resolution"])
            made.append(path.name)

    if not made:
        raise InputError("nothing to plot; run evaluate/fewshot/analyze first")
    _echo(event="plot", files=sorted(made))
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "fewshot": cmd_fewshot,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptshift",
        description="domain-adaptive soft-prompt experiments on synthetic "
                    "two-domain tasks")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a resolved config entry")

    for name in ("generate-data", "analyze", "report", "plot"):
        common(sub.add_parser(name))
    for name in ("pretrain", "evaluate", "fewshot"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--method", required=True,
                       help="method id (pt, ft, pft, spot, freelb, vat, "
                            "dann, optima, frozen)")
    sub.choices["fewshot"].add_argument("--workers", type=int, default=None)
    sub.choices["report"].add_argument("--grouping", default="all",
                                       choices=("all", "fewshot", "zeroshot"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.config, args.overrides)
        if getattr(args, "method", None) is not None \
                and args.method != "frozen":
            method_spec(args.method)
        layout = RunLayout(config)
        layout.ensure_manifest()
    except (ConfigError, InputError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, config, layout)
    except (ConfigError, InputError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 2 if isinstance(err, ConfigError) else 1
    except Exception as err:  # runtime failure
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
