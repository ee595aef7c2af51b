"""Command-line entry point: ``gcmcg <subcommand> [options]``.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as gdata
from .cluster import adjusted_rand_index, cluster_channels, signal_embeddings, write_cluster_report
from .config import ConfigError, load_config
from .dsp import FilterSpec, RawRecording, denoise, preprocess_trials, standardize
from .evaluation import evaluate, lgso_split, run_cv, write_confusion_csv
from .graph import (GraphError, TokenizerState, format_adjacency, format_coords,
                    format_electrode_map, init_tokenizer, load_graph, tokenizer_load,
                    tokenizer_save)
from .model import EXPERT_KINDS, GCMCG, ModelConfig
from .train import TrainConfig, train

log = logging.getLogger("gcmcg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, gdata.ContainerError, GraphError, FileNotFoundError,
                     ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _settings(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _out(args, name):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


def _filter_spec(cfg):
    return FilterSpec(cfg["band_low_hz"], cfg["band_high_hz"], cfg["notch_hz"], cfg["filter_order"])


def _sidecars(data_path):
    stem = Path(data_path).with_suffix("")
    return {k: Path(f"{stem}.{k}") for k in ("adj", "map", "coords", "truth.json")}


def _graph_for(args, n_channels):
    side = _sidecars(args.data) if getattr(args, "data", None) else {}
    adj = args.adjacency or (side.get("adj") if side and side["adj"].exists() else None)
    emap = args.electrode_map or (side.get("map") if side and side["map"].exists() else None)
    coords = args.coords or (side.get("coords") if side and side["coords"].exists() else None)
    if adj is None or emap is None:
        raise ConfigError("an electrode graph is required: pass --adjacency and --electrode-map "
                          "(or keep the .adj/.map files next to the data container)")
    mask = [int(v) for v in args.mask.split(",")] if getattr(args, "mask", None) else ()
    return load_graph(adj, emap, mask, n_channels=n_channels, coords_file=coords)


def _model_config(cfg, ds, use_graph=True, use_cluster=True, expert=None):
    return ModelConfig(
        n_channels=ds.n_channels, n_samples=ds.n_samples, n_classes=ds.n_classes,
        token_dim=cfg["token_dim"], embed_dim=cfg["embed_dim"], gat_heads=cfg["gat_heads"],
        gat_layers=cfg["gat_layers"], conv_kernel=cfg["conv_kernel"],
        conv_stride=cfg["conv_stride"], gate_hidden=cfg["gate_hidden"],
        head_hidden=cfg["head_hidden"], expert=expert or cfg["expert"], use_graph=use_graph,
        use_cluster=use_cluster)


def _train_config(cfg):
    return TrainConfig(
        epochs_stage1=cfg["epochs_stage1"], epochs_stage2=cfg["epochs_stage2"],
        epochs_stage3=cfg["epochs_stage3"], warmup_epochs=cfg["warmup_epochs"],
        batch=cfg["batch"], lr=cfg["lr"], lr_stage3=cfg["lr_stage3"],
        lambda_gate=cfg["lambda_gate"], focal_gamma=cfg["focal_gamma"],
        class_weights=cfg["class_weights"], stage3_loss=cfg["stage3_loss"], seed=cfg["seed"],
        k_min=cfg["k_min"], k_max=cfg["k_max"])


def _prepared(args, cfg, ds):
    if args.skip_denoise:
        return np.stack([standardize(x) for x in ds.samples])
    log.info("denoising %d trials", len(ds.samples))
    return preprocess_trials(ds.samples, ds.rate, _filter_spec(cfg), cfg["kurt_threshold"],
                             cfg["wavelet_levels"], cfg["wavelet_mode"], ica_seed=cfg["seed"])


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ari_vs_truth(args, assignment):
    truth_path = _sidecars(args.data)["truth.json"]
    if assignment is None or not truth_path.exists():
        return None
    with open(truth_path) as fh:
        truth = json.load(fh)
    group = truth["channel_group"]
    chans = assignment.channels or list(range(len(assignment.labels)))
    return adjusted_rand_index(assignment.labels, [group[c] for c in chans])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    spec = gdata.SynthSpec(
        n_classes=cfg["n_classes"], n_channels=cfg["n_channels"], n_samples=cfg["n_samples"],
        rate=cfg["rate"], n_subjects=cfg["n_subjects"],
        trials_per_subject=cfg["trials_per_subject"], groups=cfg["groups"],
        class_freq=cfg["class_freq"], amplitude=cfg["amplitude"], noise_sigma=cfg["noise_sigma"],
        hum=cfg["hum"], spikes=cfg["spikes"], subject_jitter=cfg["subject_jitter"],
        seed=cfg["seed"])
    ds, truth, graph = gdata.synth(spec)
    out = Path(args.out) if os.path.isabs(args.out) else _out(args, args.out)
    gdata.write_container(ds, out)
    side = _sidecars(out)
    gdata.write_truth(truth, side["truth.json"])
    side["adj"].write_text(format_adjacency(graph))
    side["map"].write_text(format_electrode_map(graph))
    side["coords"].write_text(format_coords(graph.coords))
    print(f"wrote {len(ds.labels)} trials to {out}")


def cmd_ingest(args, cfg):
    label_map = {}
    for item in args.labels.split(","):
        name, _, idx = item.partition("=")
        if not idx:
            raise ConfigError(f"--labels entries must look like name=index, got {item!r}")
        label_map[name.strip()] = int(idx)
    segments = gdata.read_segments(args.segments)
    window = args.window if args.window else int(round(args.window_s * args.rate))
    ds, _ = gdata.ingest_csv(args.csv, args.rate, label_map, segments, window)
    out = _out(args, args.out)
    gdata.write_container(ds, out)
    print(f"wrote {len(ds.labels)} trials to {out}")


def cmd_denoise(args, cfg):
    ds = gdata.read_container(args.data)
    spec = _filter_spec(cfg)
    cleaned = np.stack([
        denoise(RawRecording(x, ds.rate, subject_id=str(s)), spec, cfg["kurt_threshold"],
                cfg["wavelet_levels"], cfg["wavelet_mode"], ica_seed=cfg["seed"]).samples
        for x, s in zip(ds.samples, ds.subjects)])
    out = _out(args, args.out)
    gdata.write_container(replace(ds, samples=cleaned), out)
    _write_json({"source": Path(args.data).name, "stage": "denoised",
                 "filter": {k: cfg[k] for k in ("band_low_hz", "band_high_hz", "notch_hz",
                                                 "filter_order")},
                 "kurt_threshold": cfg["kurt_threshold"], "wavelet_levels": cfg["wavelet_levels"],
                 "wavelet_mode": cfg["wavelet_mode"], "ica_seed": cfg["seed"]},
                f"{out}.provenance.json")
    print(f"wrote denoised container to {out}")


def cmd_cluster_report(args, cfg):
    ds = gdata.read_container(args.data)
    if args.no_graph:
        X = _prepared(args, cfg, ds)
        assignment = cluster_channels(signal_embeddings(X), cfg["k_min"], cfg["k_max"],
                                      seed=cfg["seed"], channels=list(range(ds.n_channels)))
    else:
        if args.checkpoint:
            model = GCMCG.load(args.checkpoint)
        else:
            graph = _graph_for(args, ds.n_channels)
            model = GCMCG.create(_model_config(cfg, ds), graph, seed=cfg["seed"])
        theta = model.theta_prime()
        assignment = cluster_channels(theta[model.graph.unmasked_nodes], cfg["k_min"],
                                      cfg["k_max"], seed=cfg["seed"], channels=model.graph.channels)
    write_cluster_report(assignment, _out(args, "clusters.csv"), _out(args, "eigenvalues.csv"))
    ari = _ari_vs_truth(args, assignment)
    print(f"K={assignment.K}" + ("" if ari is None else f" ARI={ari:.4f}"))


def cmd_train(args, cfg):
    ds = gdata.read_container(args.data)
    X = _prepared(args, cfg, ds)
    use_graph = not args.no_graph
    graph = _graph_for(args, ds.n_channels) if use_graph else None
    mcfg = _model_config(cfg, ds, use_graph, not args.no_cluster, args.expert)
    tcfg = _train_config(cfg)
    folds = args.folds if args.folds is not None else cfg["folds"]
    if folds > 1:
        plan = lgso_split(ds.subjects, folds, args.fold)
        tr = np.isin(ds.subjects, plan.train_subjects)
        te = np.isin(ds.subjects, plan.test_subjects)
    else:
        tr = np.ones(len(ds.labels), bool)
        te = np.zeros(len(ds.labels), bool)
    model = GCMCG.create(mcfg, graph, seed=tcfg.seed)
    hist = train(model, X[tr], ds.labels[tr], tcfg,
                 X_val=X[te] if te.any() else None, y_val=ds.labels[te] if te.any() else None,
                 progress=lambda r: log.info("epoch %d stage %d loss %.4f acc %.3f", r["epoch"],
                                             r["stage"], r["loss"], r["train_acc"]))
    hist.write_csv(_out(args, "history.csv"))
    model.save(_out(args, "model.ckpt"))
    report = {"train_trials": int(tr.sum()), "test_trials": int(te.sum()), "K": model.K,
              "cluster_ari": _ari_vs_truth(args, model.clusters),
              "alpha_means": hist.alpha_means,
              "checksums": [list(c) for c in hist.checksums]}
    if te.any():
        probs, _, _ = model.infer(X[te])
        ev = evaluate(probs, ds.labels[te], ds.n_classes)
        report["test"] = ev.to_dict()
        write_confusion_csv(ev.confusion, _out(args, "confusion.csv"))
    if model.clusters is not None:
        write_cluster_report(model.clusters, _out(args, "clusters.csv"),
                             _out(args, "eigenvalues.csv"))
    _write_json(report, _out(args, "report.json"))
    print(f"trained {model.cfg.expert} model, K={model.K}"
          + (f", test top1={report['test']['top1']:.4f}" if "test" in report else ""))


def _cv(args, cfg, ds, X, use_graph, use_cluster, expert, seed, tag):
    cfg = dict(cfg, seed=seed)
    graph = _graph_for(args, ds.n_channels) if use_graph else None
    mcfg = _model_config(cfg, ds, use_graph, use_cluster, expert)
    folds = args.folds if args.folds is not None else cfg["folds"]
    result = run_cv(X, ds.labels, ds.subjects, graph, mcfg, _train_config(cfg), folds)
    for plan, rep, hist in zip(result.plans, result.reports, result.histories):
        hist.write_csv(_out(args, f"{tag}history_fold{plan.m}.csv"))
        write_confusion_csv(rep.confusion, _out(args, f"{tag}confusion_fold{plan.m}.csv"))
    return result


def cmd_eval(args, cfg):
    ds = gdata.read_container(args.data)
    X = _prepared(args, cfg, ds)
    result = _cv(args, cfg, ds, X, not args.no_graph, not args.no_cluster, args.expert,
                 cfg["seed"], "")
    aris = [_ari_vs_truth(args, c) for c in result.clusters]
    result.write(_out(args, "report.json"), _out(args, "folds.csv"), extra={"cluster_ari": aris})
    agg = result.aggregate()
    print(f"top1={agg['top1']:.4f} macro_auc={agg['macro_auc']:.4f} kappa={agg['kappa']:.4f}")


def cmd_export_tokenizer(args, cfg):
    if args.checkpoint:
        model = GCMCG.load(args.checkpoint)
        if "tokenizer" not in model.params:
            raise ConfigError("checkpoint has no tokenizer (graph branch disabled)")
        state = TokenizerState(model.params["tokenizer"])
    else:
        graph = _graph_for(args, None)
        state = init_tokenizer(graph, cfg["token_dim"], seed=cfg["seed"])
    out = _out(args, args.out)
    tokenizer_save(state, out)
    tokenizer_load(out)  # verify checksum on the way out
    print(f"wrote tokenizer {state.features.shape} to {out}")


def cmd_ablate(args, cfg):
    ds = gdata.read_container(args.data)
    X = _prepared(args, cfg, ds)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    variants = [("full", True, True, None)]
    if args.no_graph:
        variants.append(("no-graph", False, True, None))
    if args.no_cluster:
        variants.append(("no-cluster", True, False, None))
    if args.expert:
        variants.append((f"expert-{args.expert}", True, True, args.expert))
    rows = []
    for name, use_graph, use_cluster, expert in variants:
        for seed in seeds:
            res = _cv(args, cfg, ds, X, use_graph, use_cluster, expert, seed, f"{name}_s{seed}_")
            agg = res.aggregate()
            rows.append([name, seed] + [agg[k] for k in ("top1", "macro_f1", "kappa", "macro_auc")])
            log.info("%s seed %d: %s", name, seed, agg)
    with open(_out(args, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "top1", "macro_f1", "kappa", "macro_auc"])
        for row in rows:
            w.writerow(row[:2] + ["" if v is None else repr(float(v)) for v in row[2:]])
        for name, *_ in variants:
            vals = np.array([r[2:] for r in rows if r[0] == name], dtype=float)
            w.writerow([name, "mean"] + [repr(float(v)) for v in vals.mean(axis=0)])
    for name, *_ in variants:
        auc = np.mean([r[5] for r in rows if r[0] == name])
        print(f"{name}: mean macro AUC {auc:.4f}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", default=".", help="directory for output artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    graph_opts = argparse.ArgumentParser(add_help=False)
    graph_opts.add_argument("--adjacency", help="adjacency file (node: n1 n2 ...)")
    graph_opts.add_argument("--electrode-map", help="graph node -> dataset channel file")
    graph_opts.add_argument("--coords", help="optional node coordinate file (node x y)")
    graph_opts.add_argument("--mask", help="comma-separated 1-based nodes to exclude")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--data", required=True, help="GCD1 trial container")
    data_opts.add_argument("--skip-denoise", action="store_true",
                           help="input is already denoised; only standardise")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--folds", type=int, help="LGSO group count N")
    model_opts.add_argument("--no-graph", action="store_true")
    model_opts.add_argument("--no-cluster", action="store_true")
    model_opts.add_argument("--expert", choices=sorted(EXPERT_KINDS))

    p = _Parser(prog="gcmcg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="CSV recording -> container")
    s.add_argument("--csv", required=True)
    s.add_argument("--segments", required=True, help="CSV with start,end,label[,subject]")
    s.add_argument("--labels", required=True, help="label map, e.g. left=0,right=1")
    s.add_argument("--rate", type=float, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--window", type=int, help="trial length in samples")
    g.add_argument("--window-s", type=float, help="trial length in seconds")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("denoise", parents=[common], help="container -> denoised container")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_denoise)

    s = sub.add_parser("cluster-report", parents=[common, data_opts, graph_opts],
                       help="electrode clusters and eigenvalue table")
    s.add_argument("--checkpoint", help="trained model whose embeddings are clustered")
    s.add_argument("--no-graph", action="store_true", help="cluster signal correlations")
    s.set_defaults(fn=cmd_cluster_report)

    s = sub.add_parser("train", parents=[common, data_opts, graph_opts, model_opts],
                       help="three-stage training on one LGSO fold")
    s.add_argument("--fold", type=int, default=1, help="held-out group index m")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common, data_opts, graph_opts, model_opts],
                       help="full LGSO cross-validation")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export-tokenizer", parents=[common, graph_opts],
                       help="write tokenizer features (GTOK)")
    s.add_argument("--checkpoint")
    s.add_argument("--out", default="tokenizer.gtok")
    s.set_defaults(fn=cmd_export_tokenizer, data=None)

    s = sub.add_parser("ablate", parents=[common, data_opts, graph_opts, model_opts],
                       help="compare the full model against ablated variants")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _settings(args)
        args.fn(args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
