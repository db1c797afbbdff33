"""Command-line entry point.

Machine-readable results go to stdout (or ``--out``); progress goes to
stderr. Exit status is 0 on success, 1 on runtime errors and 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .config import KEYS, ConfigError, RunConfig, derive_seed, read_config
from .diffusion import (Model, SampleRequest, init_model, load_checkpoint, moving_average,
                        sample_batch, save_checkpoint, train)
from .evaluation import item_seed
from .mmag import load_graph, load_graph_dir, normalize_adjacency, save_graph, synthesize_graph
from .sampling import compute_ppr, sample_neighbors, virtual_node_condition

log = logging.getLogger("g2i")


class UsageError(Exception):
    pass


# --
# Helpers


def _run_config(args, overrides: dict) -> RunConfig:
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    overrides = dict(overrides)
    overrides["seed"] = args.seed
    overrides["workers"] = args.workers
    return RunConfig.build(file_values, overrides)


def _emit(args, text: str) -> None:
    if getattr(args, "out", None) and args.command not in ("gen-synth", "ingest", "train"):
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _echo_config(cfg: RunConfig) -> None:
    log.info("effective config: %s", " ".join(f"{k}={v}" for k, v in sorted(cfg.values.items())))


def _model_meta(cfg: RunConfig, graph_dir: str, test_ids) -> dict:
    meta = {f"cfg.{k}": v for k, v in cfg.values.items()}
    meta["graph"] = str(Path(graph_dir).resolve())
    meta["test_ids"] = ",".join(str(i) for i in test_ids)
    return meta


def _config_from_ckpt(model: Model, args, overrides: dict) -> RunConfig:
    stored = {}
    for key, value in model.meta.items():
        if key.startswith("cfg.") and key[4:] in KEYS:
            stored[key[4:]] = KEYS[key[4:]][1](value)
    if getattr(args, "config", None):
        stored.update(read_config(args.config))
    overrides = dict(overrides)
    overrides["seed"] = args.seed if args.seed is not None else stored.get("seed")
    overrides["workers"] = args.workers
    return RunConfig.build(stored, overrides)


def _test_ids(model: Model) -> list[int]:
    raw = model.meta.get("test_ids", "")
    return [int(x) for x in raw.split(",") if x]


def _graph_for(model: Model, args):
    path = getattr(args, "graph", None) or model.meta.get("graph")
    if not path:
        raise UsageError("no graph directory: pass --graph")
    return load_graph_dir(path)


def _choose_test_ids(n_nodes: int, n_test: int, seed: int) -> list[int]:
    rng = np.random.default_rng(derive_seed(seed, "mask"))
    n_test = min(n_test, max(n_nodes - 1, 0))
    return sorted(int(i) for i in rng.choice(n_nodes, size=n_test, replace=False))


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# --
# Subcommands


def cmd_gen_synth(args) -> int:
    cfg = _run_config(args, {"n_nodes": args.n_nodes, "n_clusters": args.n_clusters,
                             "p_in": args.p_in, "p_out": args.p_out, "d": args.d})
    _echo_config(cfg)
    graph = synthesize_graph(cfg.synthetic())
    save_graph(graph, args.out)
    log.info("wrote %d nodes, %d edges to %s", graph.n_nodes, graph.adjacency.nnz // 2, args.out)
    sys.stdout.write(_json({"n_nodes": graph.n_nodes, "n_edges": int(graph.adjacency.nnz // 2),
                            "out": str(args.out), "config": cfg.values}))
    return 0


def cmd_ingest(args) -> int:
    cfg = _run_config(args, {})
    graph = load_graph(args.nodes, args.edges)
    save_graph(graph, args.out)
    log.info("ingested %d nodes into %s", graph.n_nodes, args.out)
    sys.stdout.write(_json({"n_nodes": graph.n_nodes, "n_edges": int(graph.adjacency.nnz // 2),
                            "d": graph.d, "m": graph.m, "out": str(args.out), "config": cfg.values}))
    return 0


def cmd_ppr(args) -> int:
    cfg = _run_config(args, {"beta": args.beta, "max_iters": args.max_iters, "tolerance": args.tolerance})
    _echo_config(cfg)
    graph = load_graph_dir(args.graph)
    ppr = compute_ppr(normalize_adjacency(graph), args.target, cfg.sampler().ppr)
    if not ppr.converged:
        log.warning("PPR did not converge within %d iterations", ppr.iterations)
    ids = np.flatnonzero(ppr.scores > 0)
    order = np.lexsort((ids, -ppr.scores[ids]))[:args.topk]
    _emit(args, "".join(f"{ids[j]} {ppr.scores[ids[j]]:.6f}\n" for j in order))
    return 0


def cmd_sample_neighbors(args) -> int:
    cfg = _run_config(args, {"beta": args.beta, "k_ppr": args.k_ppr, "k": args.k, "sim": args.sim})
    graph = load_graph_dir(args.graph)
    exclude = [int(x) for x in args.exclude.split(",") if x] if args.exclude else []
    cond = sample_neighbors(graph, args.target, cfg.sampler(exclude))
    neighbors = [{"id": i, "ppr": p, "sim": s}
                 for i, p, s in zip(cond.neighbor_ids, cond.ppr_scores, cond.sim_scores)]
    _emit(args, _json({"target": args.target, "neighbors": neighbors, "config": cfg.values}))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args, {"steps": args.steps, "encoder": args.encoder, "n_test": args.n_test})
    _echo_config(cfg)
    graph = load_graph_dir(args.graph)
    test_ids = _choose_test_ids(graph.n_nodes, cfg.get("n_test"), cfg.seed)
    model = init_model(cfg.model(graph.d))
    result = train(graph, cfg.sampler(), model, cfg.train(), test_ids=test_ids,
                   workers=cfg.get("workers"))
    result.model.meta = _model_meta(cfg, args.graph, test_ids)
    save_checkpoint(result.model, args.out)
    ma = moving_average(result.losses)
    sys.stdout.write(_json({
        "checkpoint": str(args.out),
        "steps": len(result.losses),
        "initial_loss": result.losses[0] if result.losses else None,
        "final_loss_ma": float(ma[-1]) if ma.size else None,
        "n_test": len(test_ids),
        "config": cfg.values,
    }))
    return 0


def _parse_graph_cond(spec: str):
    """``cluster=3:1.5``, ``nodes=1,2:0.5``, ``3:1.5`` or ``1,2:0.5``."""
    body, sep, scale = spec.rpartition(":")
    if not sep:
        raise UsageError(f"--graph-cond {spec!r}: expected <cluster-or-nodeset>:<scale>")
    try:
        scale = float(scale)
        if body.startswith("cluster="):
            return ("cluster", int(body[8:])), scale
        if body.startswith("nodes="):
            return ("nodes", [int(x) for x in body[6:].split(",") if x]), scale
        if "," in body:
            return ("nodes", [int(x) for x in body.split(",") if x]), scale
        return ("cluster", int(body)), scale
    except ValueError as exc:
        raise UsageError(f"--graph-cond {spec!r}: {exc}") from exc


def _virtual(graph, kind_value, text, sampler_cfg, exclude):
    kind, value = kind_value
    if kind == "cluster":
        members = evaluation.cluster_members(graph, value, exclude)
    else:
        members = value
    return virtual_node_condition(graph, members, text, sampler_cfg)


def cmd_generate(args) -> int:
    model = load_checkpoint(args.ckpt)
    cfg = _config_from_ckpt(model, args, {"s_text": args.s_text, "s_graph": args.s_graph})
    graph = _graph_for(model, args)
    if not 0 <= args.target < graph.n_nodes:
        raise UsageError(f"--target {args.target} out of range")
    test_ids = _test_ids(model)
    exclude = frozenset(test_ids) | {args.target}
    sampler_cfg = cfg.sampler(exclude)
    text = graph.nodes[args.target].text_embedding
    terms = []
    if args.graph_cond:
        for spec in args.graph_cond:
            kv, scale = _parse_graph_cond(spec)
            terms.append((_virtual(graph, kv, text, sampler_cfg, exclude), scale, spec))
    else:
        cond = sample_neighbors(graph, args.target, sampler_cfg)
        terms.append((cond, cfg.get("s_graph"), "neighbors"))
    if args.cluster2 is not None:
        s2 = args.s_graph2 if args.s_graph2 is not None else cfg.get("s_graph")
        terms.append((_virtual(graph, ("cluster", args.cluster2), text, sampler_cfg, exclude), s2,
                      f"cluster={args.cluster2}"))
    req = SampleRequest(graph.nodes[args.target].text_tokens, tuple(c.z for c, _, _ in terms),
                        item_seed(cfg.seed, args.target))
    latent = sample_batch(model, [req], cfg.get("s_text"), [s for _, s, _ in terms])[0]
    _emit(args, _json({
        "target": args.target,
        "latent": latent.tolist(),
        "graph_terms": [{"source": src, "scale": s, "neighbors": list(c.neighbor_ids)}
                        for c, s, src in terms],
        "config": cfg.values,
    }))
    return 0


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.ckpt)
    cfg = _config_from_ckpt(model, args, {})
    graph = _graph_for(model, args)
    grid = [(a, b) for a in _floats(args.s_text_grid) for b in _floats(args.s_graph_grid)]
    seeds = [derive_seed(cfg.seed, f"sweep.{i}") for i in range(args.seeds)]
    rows = evaluation.guidance_sweep(graph, model, args.target, grid, seeds,
                                     cfg.sampler(), exclude=_test_ids(model))
    _echo_config(cfg)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["s_text", "s_graph", "seed", "style_cosine", "content_cosine"])
    for r in rows:
        writer.writerow([r["s_text"], r["s_graph"], r["seed"], repr(r["style_cosine"]),
                         repr(r["content_cosine"])])
    _emit(args, buf.getvalue())
    return 0


def _eval_seeds(cfg: RunConfig, n: int) -> list[int]:
    return [derive_seed(cfg.seed, f"eval.{i}") for i in range(n)]


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    cfg = _config_from_ckpt(model, args, {"s_text": args.s_text, "s_graph": args.s_graph})
    graph = _graph_for(model, args)
    report = evaluation.run_experiment(graph, model, _test_ids(model), args.mode,
                                       _eval_seeds(cfg, args.seeds), cfg.sampler(),
                                       cfg.get("s_text"), cfg.get("s_graph"), cfg.get("workers"))
    payload = report.to_dict()
    payload["config"] = cfg.values
    _emit(args, _json(payload))
    return 0


def cmd_ablate(args) -> int:
    model = load_checkpoint(args.ckpt)
    if model.config.encoder != "qformer":
        raise UsageError("ablate expects a Graph-QFormer checkpoint in --ckpt")
    cfg = _config_from_ckpt(model, args, {"s_text": args.s_text, "s_graph": args.s_graph})
    graph = _graph_for(model, args)
    test_ids = _test_ids(model)
    if args.baseline_ckpt:
        baseline = load_checkpoint(args.baseline_ckpt)
    else:
        log.info("training pass-through encoder variant for the ablation")
        bcfg = RunConfig.build(cfg.values, {"encoder": "baseline"})
        baseline = train(graph, bcfg.sampler(), init_model(bcfg.model(graph.d)), bcfg.train(),
                         test_ids=test_ids, workers=cfg.get("workers")).model
    seeds = _eval_seeds(cfg, args.seeds)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mode", "n", "mean_cosine_x100", "fid"])
    for mode in evaluation.MODES:
        m = baseline if mode == "baseline_encoder" else model
        r = evaluation.run_experiment(graph, m, test_ids, mode, seeds, cfg.sampler(),
                                      cfg.get("s_text"), cfg.get("s_graph"), cfg.get("workers"))
        log.info("%s: mean cosine %.6f, fid %.6f", mode, r.mean_cosine_x100, r.fid)
        writer.writerow([mode, r.n, repr(r.mean_cosine_x100), repr(r.fid)])
    _echo_config(cfg)
    _emit(args, buf.getvalue())
    return 0


# --
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2i", description="Graph-conditioned latent diffusion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=None, help="global seed")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--workers", type=int, default=None, help="parallel workers (1 = reference)")
        return p

    p = add("gen-synth", cmd_gen_synth, "generate a synthetic multimodal graph")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--p-in", type=float)
    p.add_argument("--p-out", type=float)
    p.add_argument("--d", type=int)

    p = add("ingest", cmd_ingest, "validate nodes/edges files into a graph directory")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--out", required=True)

    p = add("ppr", cmd_ppr, "print the top personalized PageRank scores of a node")
    p.add_argument("--graph", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--topk", type=int, default=20)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--out")

    p = add("sample-neighbors", cmd_sample_neighbors, "semantic PPR neighbour sampling")
    p.add_argument("--graph", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--k-ppr", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--sim", choices=["cosine", "dot", "negative_euclidean"])
    p.add_argument("--exclude", help="comma-separated masked node ids")
    p.add_argument("--out")

    p = add("train", cmd_train, "train encoder and denoiser")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int)
    p.add_argument("--encoder", choices=["qformer", "baseline"])
    p.add_argument("--n-test", type=int)

    def guided(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--graph", help="graph directory (default: the one used for training)")
        p.add_argument("--out")

    p = add("generate", cmd_generate, "sample a latent for a node")
    guided(p)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--s-text", type=float)
    p.add_argument("--s-graph", type=float)
    p.add_argument("--s-graph2", type=float)
    p.add_argument("--cluster2", type=int)
    p.add_argument("--graph-cond", action="append",
                   help="<cluster-or-nodeset>:<scale>, repeatable (e.g. 3:1.5 or nodes=1,2:0.5)")

    p = add("sweep", cmd_sweep, "text/graph guidance-scale sweep (CSV)")
    guided(p)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--s-text-grid", default="1")
    p.add_argument("--s-graph-grid", default="0,0.5,1,2,4")
    p.add_argument("--seeds", type=int, default=20)

    p = add("eval", cmd_eval, "score generations on the masked test nodes (JSON)")
    guided(p)
    p.add_argument("--mode", choices=evaluation.MODES, default="graph")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--s-text", type=float)
    p.add_argument("--s-graph", type=float)

    p = add("ablate", cmd_ablate, "compare all conditioning modes (CSV)")
    guided(p)
    p.add_argument("--baseline-ckpt", help="checkpoint trained with encoder=baseline")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--s-text", type=float)
    p.add_argument("--s-graph", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"g2i: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"g2i: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, IndexError, KeyError) as exc:
        print(f"g2i: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
