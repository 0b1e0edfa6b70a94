"""Command-line pipeline: synth, split, pretrain, co-tune, evaluate, analyze.

Every command reads files, writes files plus a JSON manifest (input hashes,
config, seed, wall clock, metrics), and is re-runnable: identical inputs and
seed produce identical outputs. Configuration precedence is flags over
config-file section over built-in defaults.

Exit codes: 0 success, 2 config error, 3 dependency error, 4 numeric error,
5 validation error.
"""

import argparse
import csv
import json
import os
import sys
import time

from .analysis import (
    alignment_report,
    cn_distribution,
    degree_bias_scan,
    link_heuristic_histogram,
    run_sweep,
)
from .cotrain import CotrainConfig, flex_tune, generate_samples
from .errors import ConfigError, CounterlinkError
from .generator import (
    GgmTrainConfig,
    NoiseSpec,
    dump_samples,
    load_ggm_checkpoint,
    load_samples,
    pretrain_ggm,
    save_ggm_checkpoint,
)
from .gnn import (
    TrainConfig,
    evaluate_hits,
    load_gnn_checkpoint,
    normalize_adjacency,
    pretrain_gnn,
    save_gnn_checkpoint,
)
from .graphs import load_graph
from .manifest import (
    manifest_path,
    read_manifest,
    require_artifact,
    staleness_warnings,
    write_manifest,
)
from .splits import SplitSpec, generate_split, load_split, save_split, verify_split
from .synth import SyntheticGraphSpec, synth_graph, write_graph_files

DEFAULTS = {
    "synth": {
        "family": "sbm", "n": 100, "blocks": 2, "p_in": 0.1, "p_out": 0.01,
        "m": 2, "p": 0.1, "feature_mode": "degree-onehot:16", "seed": 0,
        "out": "out",
    },
    "split": {
        "edges": None, "features": None, "heuristic": "CN",
        "direction": "forward", "t1": 1.0, "t2": 2.0, "neg_ratio": 1,
        "seed": 0, "out": "out",
    },
    "pretrain-gnn": {
        "edges": None, "features": None, "split": None, "epochs": 1000,
        "patience": 20, "lr": 1e-3, "dropout": 0.1, "batch_size": 0,
        "hidden": 128, "layers": 2, "eval_k": 20, "seed": 0,
        "full_adjacency_eval": False, "out": "out",
    },
    "pretrain-ggm": {
        "edges": None, "features": None, "split": None, "epochs": 2000,
        "patience": 100, "lr": 1e-3, "batch_size": 64, "noise_dim": 8,
        "num_psi": 3, "hop_k": 1, "max_nodes": 1000, "seed": 0, "out": "out",
    },
    "flex-tune": {
        "edges": None, "features": None, "split": None, "gnn_ckpt": None,
        "ggm_ckpt": None, "alpha": 1.05, "tau": None, "tau_offset": 1.0,
        "gamma": 0.9, "lr_gnn": 1e-5, "lr_ggm": 1e-5, "epochs": 5,
        "batch_size": 64, "patience": 2, "update_rule": "check_mode",
        "num_psi": 3, "mix_ratio": 0.0, "eval_k": 20, "hop_k": 1,
        "max_nodes": 1000, "seed": 0, "full_adjacency_eval": False,
        "out": "out",
    },
    "eval": {
        "edges": None, "features": None, "split": None, "ckpt": None,
        "k": 20, "full_adjacency_eval": False, "out": "out",
    },
    "analyze": {
        "edges": None, "features": None, "split": None, "samples": None,
        "out": "out",
    },
    "sweep": {
        "edges": None, "features": None, "split": None, "gnn_ckpt": None,
        "ggm_ckpt": None, "param": "gamma",
        "grid": "0.0,0.25,0.5,0.75,0.9,0.9999", "seeds": "0,1,2",
        "alpha": 1.05, "tau": None, "tau_offset": 1.0, "gamma": 0.9,
        "lr_gnn": 1e-5, "lr_ggm": 1e-5, "epochs": 5, "batch_size": 64,
        "patience": 2, "update_rule": "check_mode", "num_psi": 3,
        "mix_ratio": 0.0, "eval_k": 20, "hop_k": 1, "max_nodes": 1000,
        "seed": 0, "full_adjacency_eval": False, "out": "out",
    },
}

_FLAG_TYPES = {
    "family": str, "feature_mode": str, "heuristic": str, "direction": str,
    "update_rule": str, "param": str, "grid": str, "seeds": str,
    "edges": str, "features": str, "split": str, "gnn_ckpt": str,
    "ggm_ckpt": str, "ckpt": str, "samples": str, "out": str,
    "n": int, "blocks": int, "m": int, "neg_ratio": int, "seed": int,
    "epochs": int, "patience": int, "batch_size": int, "hidden": int,
    "layers": int, "eval_k": int, "k": int, "noise_dim": int, "num_psi": int,
    "hop_k": int, "max_nodes": int,
    "p_in": float, "p_out": float, "p": float, "t1": float, "t2": float,
    "lr": float, "dropout": float, "alpha": float, "tau": float,
    "tau_offset": float, "gamma": float, "lr_gnn": float, "lr_ggm": float,
    "mix_ratio": float,
    "full_adjacency_eval": bool,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="counterlink",
        description="Counterfactual subgraph generation for link prediction "
                    "under structural shift",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, defaults in DEFAULTS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None,
                       help="JSON config file; the section named after the "
                            "command supplies values (flags still win)")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            kind = _FLAG_TYPES[key]
            if kind is bool:
                p.add_argument(flag, action="store_const", const=True,
                               default=None, help=f"(default {default})")
            else:
                p.add_argument(flag, type=kind, default=None,
                               help=f"(default {default})")
    return parser


def merge_config(command, args) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        section = doc.get(command, {})
        unknown = set(section) - set(cfg)
        if unknown:
            raise ConfigError(
                f"unknown config keys for {command}: {sorted(unknown)}"
            )
        cfg.update(section)
    for key in DEFAULTS[command]:
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    return cfg


def _require(cfg, *keys):
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _load_graph_and_split(cfg):
    _require(cfg, "edges", "features", "split")
    require_artifact(cfg["edges"], "synth")
    require_artifact(cfg["features"], "synth")
    g = load_graph(cfg["edges"], str(cfg["features"]))
    require_artifact(cfg["split"], "split")
    split = load_split(cfg["split"], g)
    return g, split


def _write_csv(path, rows, columns):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def _warn(notes):
    for note in notes:
        print(f"warning: stale input: {note}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Handlers


def cmd_synth(cfg):
    _require(cfg, "out")
    os.makedirs(cfg["out"], exist_ok=True)
    spec = SyntheticGraphSpec(
        family=cfg["family"], n=cfg["n"], feature_mode=cfg["feature_mode"],
        seed=cfg["seed"], blocks=cfg["blocks"], p_in=cfg["p_in"],
        p_out=cfg["p_out"], m=cfg["m"], p=cfg["p"],
    )
    t0 = time.perf_counter()
    g = synth_graph(spec)
    edges_path = os.path.join(cfg["out"], "edges.tsv")
    feats_path = os.path.join(cfg["out"], "features.csv")
    write_graph_files(g, edges_path, feats_path)
    write_manifest(
        cfg["out"], "synth", cfg, cfg["seed"], {},
        {"edges": edges_path, "features": feats_path},
        time.perf_counter() - t0,
        metrics={"num_nodes": g.num_nodes, "edge_count": g.edge_count},
    )
    print(f"synth: {g.num_nodes} nodes, {g.edge_count} edges -> {cfg['out']}")


def cmd_split(cfg):
    _require(cfg, "edges", "features", "out")
    require_artifact(cfg["edges"], "synth")
    require_artifact(cfg["features"], "synth")
    os.makedirs(cfg["out"], exist_ok=True)
    g = load_graph(cfg["edges"], str(cfg["features"]))
    spec = SplitSpec(
        heuristic=cfg["heuristic"], direction=cfg["direction"],
        t1=cfg["t1"], t2=cfg["t2"], neg_ratio=cfg["neg_ratio"], seed=cfg["seed"],
    )
    t0 = time.perf_counter()
    split = generate_split(g, spec)
    report = verify_split(g, split)
    split_path = os.path.join(cfg["out"], "split.json")
    save_split(split, split_path)
    write_manifest(
        cfg["out"], "split", cfg, cfg["seed"],
        {"edges": cfg["edges"], "features": cfg["features"]},
        {"split": split_path},
        time.perf_counter() - t0,
        metrics={"bucket_counts": report.bucket_counts,
                 "interpretation": report.interpretation},
    )
    print(f"split: {report.bucket_counts} ({report.interpretation}) -> {split_path}")


def cmd_pretrain_gnn(cfg):
    g, split = _load_graph_and_split(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    train_cfg = TrainConfig(
        epochs=cfg["epochs"], patience=cfg["patience"], lr=cfg["lr"],
        dropout=cfg["dropout"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        eval_k=cfg["eval_k"],
    )
    eval_graph = g if cfg["full_adjacency_eval"] else None
    t0 = time.perf_counter()
    result = pretrain_gnn(
        split.observed_graph, split, train_cfg, hidden=cfg["hidden"],
        layers=cfg["layers"], eval_graph=eval_graph,
    )
    eval_g = g if cfg["full_adjacency_eval"] else split.observed_graph
    test_hits = evaluate_hits(
        result.params, normalize_adjacency(eval_g.adjacency), g.features,
        split.test_pos, split.test_neg, cfg["eval_k"],
    )
    ckpt = os.path.join(cfg["out"], "gnn.ckpt")
    save_gnn_checkpoint(ckpt, result.params,
                        extra_meta={"best_valid": result.best_valid,
                                    "test_hits": test_hits})
    trace_path = os.path.join(cfg["out"], "gnn_trace.csv")
    _write_csv(trace_path, result.trace,
               ["epoch", "train_loss", "valid_hits", "seconds"])
    write_manifest(
        cfg["out"], "pretrain-gnn", cfg, cfg["seed"],
        {"edges": cfg["edges"], "features": cfg["features"], "split": cfg["split"]},
        {"checkpoint": ckpt, "trace": trace_path},
        time.perf_counter() - t0,
        metrics={"best_epoch": result.best_epoch, "valid_hits": result.best_valid,
                 "test_hits": test_hits},
    )
    print(f"pretrain-gnn: best epoch {result.best_epoch}, "
          f"valid Hits@{cfg['eval_k']} {result.best_valid:.4f}, "
          f"test Hits@{cfg['eval_k']} {test_hits:.4f}")


def cmd_pretrain_ggm(cfg):
    g, split = _load_graph_and_split(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    spec = NoiseSpec(noise_dim=cfg["noise_dim"], num_psi=cfg["num_psi"])
    ggm_cfg = GgmTrainConfig(
        epochs=cfg["epochs"], patience=cfg["patience"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], seed=cfg["seed"], hop_k=cfg["hop_k"],
        max_nodes=cfg["max_nodes"],
    )
    t0 = time.perf_counter()
    result = pretrain_ggm(split.observed_graph, split, ggm_cfg, spec)
    ckpt = os.path.join(cfg["out"], "ggm.ckpt")
    save_ggm_checkpoint(ckpt, result.params,
                        extra_meta={"final_kl": result.final_kl,
                                    "best_loss": result.best_loss})
    trace_path = os.path.join(cfg["out"], "ggm_trace.csv")
    _write_csv(trace_path, result.trace, ["epoch", "loss", "kl", "seconds"])
    write_manifest(
        cfg["out"], "pretrain-ggm", cfg, cfg["seed"],
        {"edges": cfg["edges"], "features": cfg["features"], "split": cfg["split"]},
        {"checkpoint": ckpt, "trace": trace_path},
        time.perf_counter() - t0,
        metrics={"best_epoch": result.best_epoch, "best_loss": result.best_loss,
                 "final_kl": result.final_kl},
    )
    print(f"pretrain-ggm: best epoch {result.best_epoch}, "
          f"loss {result.best_loss:.4f}, kl {result.final_kl:.4f}")


def _cotrain_config(cfg, ggm_meta):
    noise_dim = int(ggm_meta.get("noise_dim", cfg.get("noise_dim", 8)))
    tau = cfg["tau"]
    if tau is None and "final_kl" in ggm_meta:
        tau = ggm_meta["final_kl"] + cfg["tau_offset"]
    return CotrainConfig(
        alpha=cfg["alpha"], tau=tau, tau_offset=cfg["tau_offset"],
        gamma=cfg["gamma"], lr_gnn=cfg["lr_gnn"], lr_ggm=cfg["lr_ggm"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        patience=cfg["patience"], update_rule=cfg["update_rule"],
        seed=cfg["seed"], eval_k=cfg["eval_k"], hop_k=cfg["hop_k"],
        max_nodes=cfg["max_nodes"], mix_ratio=cfg["mix_ratio"],
        noise=NoiseSpec(noise_dim=noise_dim, num_psi=cfg["num_psi"]),
    )


def _load_pretrained(cfg):
    require_artifact(cfg["gnn_ckpt"], "pretrain-gnn")
    require_artifact(cfg["ggm_ckpt"], "pretrain-ggm")
    gnn_params, _, _ = load_gnn_checkpoint(cfg["gnn_ckpt"])
    ggm_params, ggm_meta, _ = load_ggm_checkpoint(cfg["ggm_ckpt"])
    for ckpt_key, stage in (("gnn_ckpt", "pretrain-gnn"), ("ggm_ckpt", "pretrain-ggm")):
        mpath = manifest_path(os.path.dirname(cfg[ckpt_key]) or ".", stage)
        if os.path.exists(mpath):
            _warn(staleness_warnings(read_manifest(mpath),
                                     {"split": cfg["split"]}))
    return gnn_params, ggm_params, ggm_meta


def cmd_flex_tune(cfg):
    g, split = _load_graph_and_split(cfg)
    _require(cfg, "gnn_ckpt", "ggm_ckpt")
    os.makedirs(cfg["out"], exist_ok=True)
    gnn_params, ggm_params, ggm_meta = _load_pretrained(cfg)
    run_cfg = _cotrain_config(cfg, ggm_meta)
    eval_graph = g if cfg["full_adjacency_eval"] else None
    t0 = time.perf_counter()
    result = flex_tune(gnn_params, ggm_params, split.observed_graph, split,
                       run_cfg, eval_graph=eval_graph)
    eval_g = g if cfg["full_adjacency_eval"] else split.observed_graph
    test_hits = evaluate_hits(
        result.gnn, normalize_adjacency(eval_g.adjacency), g.features,
        split.test_pos, split.test_neg, cfg["eval_k"],
    )
    gnn_out = os.path.join(cfg["out"], "gnn_tuned.ckpt")
    ggm_out = os.path.join(cfg["out"], "ggm_tuned.ckpt")
    save_gnn_checkpoint(gnn_out, result.gnn,
                        extra_meta={"best_valid": result.best_valid,
                                    "test_hits": test_hits})
    save_ggm_checkpoint(ggm_out, result.ggm,
                        extra_meta={"noise_dim": result.ggm.noise_dim,
                                    "tau": result.tau})
    trace_path = os.path.join(cfg["out"], "cotrain_trace.csv")
    _write_csv(trace_path, result.trace,
               ["epoch", "lp_loss", "sivi_loss", "kl_estimate", "penalty",
                "mean_generated_cn", "valid_hits"])
    samples = generate_samples(result.ggm, split.observed_graph, split, run_cfg,
                               bucket="train")
    samples_path = os.path.join(cfg["out"], "samples.json")
    dump_samples(samples, samples_path)
    write_manifest(
        cfg["out"], "flex-tune", {**cfg, "tau": result.tau}, cfg["seed"],
        {"edges": cfg["edges"], "features": cfg["features"],
         "split": cfg["split"], "gnn_ckpt": cfg["gnn_ckpt"],
         "ggm_ckpt": cfg["ggm_ckpt"]},
        {"gnn_tuned": gnn_out, "ggm_tuned": ggm_out, "trace": trace_path,
         "samples": samples_path},
        time.perf_counter() - t0,
        metrics={"best_epoch": result.best_epoch,
                 "valid_hits": result.best_valid, "test_hits": test_hits,
                 "tau": result.tau},
    )
    print(f"flex-tune: best epoch {result.best_epoch}, "
          f"valid Hits@{cfg['eval_k']} {result.best_valid:.4f}, "
          f"test Hits@{cfg['eval_k']} {test_hits:.4f}")


def cmd_eval(cfg):
    g, split = _load_graph_and_split(cfg)
    _require(cfg, "ckpt")
    require_artifact(cfg["ckpt"], "pretrain-gnn or flex-tune")
    os.makedirs(cfg["out"], exist_ok=True)
    params, _, _ = load_gnn_checkpoint(cfg["ckpt"])
    eval_g = g if cfg["full_adjacency_eval"] else split.observed_graph
    a_norm = normalize_adjacency(eval_g.adjacency)
    t0 = time.perf_counter()
    valid = evaluate_hits(params, a_norm, g.features, split.valid_pos,
                          split.valid_neg, cfg["k"])
    test = evaluate_hits(params, a_norm, g.features, split.test_pos,
                         split.test_neg, cfg["k"])
    csv_path = os.path.join(cfg["out"], "eval.csv")
    _write_csv(csv_path,
               [{"bucket": "valid", "hits": valid}, {"bucket": "test", "hits": test}],
               ["bucket", "hits"])
    write_manifest(
        cfg["out"], "eval", cfg, 0,
        {"edges": cfg["edges"], "features": cfg["features"],
         "split": cfg["split"], "ckpt": cfg["ckpt"]},
        {"csv": csv_path},
        time.perf_counter() - t0,
        metrics={"valid_hits": valid, "test_hits": test},
    )
    print(f"Hits@{cfg['k']} valid: {valid:.6f}")
    print(f"Hits@{cfg['k']} test: {test:.6f}")


def cmd_analyze(cfg):
    g, split = _load_graph_and_split(cfg)
    _require(cfg, "samples")
    require_artifact(cfg["samples"], "flex-tune")
    os.makedirs(cfg["out"], exist_ok=True)
    t0 = time.perf_counter()
    records = load_samples(cfg["samples"])
    gen_hist = cn_distribution(records, source="generated")
    train_hist = link_heuristic_histogram(g, split.train_pos, "CN", "train")
    valid_hist = link_heuristic_histogram(g, split.valid_pos, "CN", "valid")
    report = alignment_report(train_hist, valid_hist, gen_hist)
    scan = degree_bias_scan(records)
    doc = {
        "histograms": [h.as_dict() for h in (train_hist, valid_hist, gen_hist)],
        "alignment": report.as_dict(),
        "degree_bias_slope": scan.slope,
    }
    json_path = os.path.join(cfg["out"], "analysis.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    hist_csv = os.path.join(cfg["out"], "cn_distribution.csv")
    rows = []
    for h in (train_hist, valid_hist, gen_hist):
        for lo, count in zip(h.bucket_edges[:-1], h.counts):
            rows.append({"source": h.source, "bucket_start": lo, "count": int(count)})
    _write_csv(hist_csv, rows, ["source", "bucket_start", "count"])
    scatter_csv = os.path.join(cfg["out"], "degree_bias.csv")
    _write_csv(scatter_csv, scan.as_rows(), ["mean_cn", "num_nodes"])
    write_manifest(
        cfg["out"], "analyze", cfg, 0,
        {"edges": cfg["edges"], "features": cfg["features"],
         "split": cfg["split"], "samples": cfg["samples"]},
        {"analysis": json_path, "cn_distribution": hist_csv,
         "degree_bias": scatter_csv},
        time.perf_counter() - t0,
        metrics={"gen_gap": report.gen_gap, "train_gap": report.train_gap,
                 "degree_bias_slope": scan.slope},
    )
    print(f"analyze: gen gap {report.gen_gap:.4f} vs train gap "
          f"{report.train_gap:.4f}; degree-bias slope {scan.slope:.4f}")


def cmd_sweep(cfg):
    g, split = _load_graph_and_split(cfg)
    _require(cfg, "gnn_ckpt", "ggm_ckpt")
    os.makedirs(cfg["out"], exist_ok=True)
    gnn_params, ggm_params, ggm_meta = _load_pretrained(cfg)
    base = _cotrain_config(cfg, ggm_meta)
    grid = [float(x) for x in str(cfg["grid"]).split(",") if x != ""]
    seeds = [int(x) for x in str(cfg["seeds"]).split(",") if x != ""]
    eval_graph = g if cfg["full_adjacency_eval"] else None
    t0 = time.perf_counter()
    result = run_sweep(cfg["param"], grid, base, seeds, gnn_params, ggm_params,
                       split.observed_graph, split, eval_graph=eval_graph)
    json_path = os.path.join(cfg["out"], "sweep.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(result.as_dict(), fh, indent=2)
    csv_path = os.path.join(cfg["out"], "sweep.csv")
    _write_csv(
        csv_path,
        [{"value": v, "mean_hits": m, "std_hits": s}
         for v, m, s in zip(result.grid, result.means, result.stds)],
        ["value", "mean_hits", "std_hits"],
    )
    write_manifest(
        cfg["out"], "sweep", cfg, cfg["seed"],
        {"edges": cfg["edges"], "features": cfg["features"],
         "split": cfg["split"], "gnn_ckpt": cfg["gnn_ckpt"],
         "ggm_ckpt": cfg["ggm_ckpt"]},
        {"sweep_json": json_path, "sweep_csv": csv_path},
        time.perf_counter() - t0,
        metrics={"param": cfg["param"], "means": result.means},
    )
    for v, m, s in zip(result.grid, result.means, result.stds):
        print(f"sweep {cfg['param']}={v}: Hits@{cfg['eval_k']} {m:.4f} +/- {s:.4f}")


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "pretrain-gnn": cmd_pretrain_gnn,
    "pretrain-ggm": cmd_pretrain_ggm,
    "flex-tune": cmd_flex_tune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = merge_config(args.command, args)
        HANDLERS[args.command](cfg)
        return 0
    except CounterlinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
