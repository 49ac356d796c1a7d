"""Command-line entry point: ``start-trl <command> [--config F] [--seed N] [--out DIR] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, write_embeddings
from .config import ExperimentConfig, load_config, sub_seed, write_config
from .downstream import (MetricsReport, TripQuery, classification_metrics, classify, embed,
                         finetune_classify, finetune_eta, predict_eta, regression_metrics)
from .errors import ValidationError
from .model import ModelConfig, StartModel
from .pretrain import masked_accuracy, run_pretraining
from .roadnet import RoadNetwork, compute_transfer_probabilities, load_road_network
from .simsearch import build_query_sets, knn_eval, most_similar_eval
from .tat_enc import Ablation
from .tpe_gat import RoadGraph
from .trajdata import (TrajectoryDataset, chronological_split, generate_synthetic_network,
                       generate_synthetic_trajectories, historical_travel_times, preprocess,
                       read_corpus, write_corpus)

log = logging.getLogger("start_trl")

NODES, EDGES, CORPUS = "nodes.csv", "edges.csv", "corpus.jsonl"


def deterministic() -> None:
    torch.use_deterministic_algorithms(True)
    # a single intra-op thread keeps float reductions in a fixed order
    torch.set_num_threads(1)


@dataclass
class Workspace:
    network: RoadNetwork
    train: list
    val: list
    test: list
    graph: RoadGraph
    hist: object


def synthesize(cfg: ExperimentConfig):
    seed = sub_seed(cfg.seed, "data")
    d = cfg.data
    network = generate_synthetic_network(d.grid_n, seed)
    ds = generate_synthetic_trajectories(network, d.num_trajectories, seed, d.num_drivers,
                                         d.days, d.detour_prob)
    return network, list(ds)


def prepare(cfg: ExperimentConfig, data_dir=None) -> Workspace:
    """Load (or synthesise) the corpus, preprocess, split and derive road statistics."""
    if data_dir is None:
        network, trajs = synthesize(cfg)
    else:
        data_dir = Path(data_dir)
        network = load_road_network(data_dir / NODES, data_dir / EDGES)
        trajs = read_corpus(data_dir / CORPUS)
    ds = preprocess(TrajectoryDataset(trajs, network), cfg.data.min_user_trajectories)
    tr, va, te = chronological_split(ds, tuple(cfg.data.split))
    tr, va, te = list(tr), list(va), list(te)
    graph = RoadGraph.build(network, compute_transfer_probabilities(network, tr))
    return Workspace(network, tr, va, te, graph, historical_travel_times(tr, network.num_roads))


def build_encoder(cfg: ExperimentConfig, ckpt: Checkpoint | None) -> StartModel:
    """Fresh encoder from the config, or the pretrained one (architecture taken from the checkpoint)."""
    ablation = Ablation(**asdict(cfg.ablation))
    if ckpt is None:
        torch.manual_seed(sub_seed(cfg.seed, "init"))
        return StartModel(copy.deepcopy(cfg.model), ablation)
    saved = ckpt.config["config"]["model"]
    model = StartModel(ModelConfig(**saved), ablation)
    prefix = ckpt.meta.get("encoder_prefix", "model.")
    state = ckpt.state_dict(prefix)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ValidationError(f"checkpoint does not match the encoder: missing {missing}, "
                              f"unexpected {unexpected}")
    return model


def load_checkpoint(path) -> Checkpoint | None:
    if path is None:
        return None
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint {path} does not exist")
    return Checkpoint.load(path)


def config_blob(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.to_dict(), "echo": cfg.echo()}


def write_report(out: Path, stem: str, report: MetricsReport) -> None:
    report.write(out / stem)
    log.info("wrote %s", out / f"{stem}.txt")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig, out: Path, args) -> None:
    network, trajs = synthesize(cfg)
    network.to_csv(out / NODES, out / EDGES)
    write_corpus(out / CORPUS, trajs)
    write_config(cfg, out / "config.ini")
    (out / "config_echo.json").write_text(json.dumps(cfg.echo(), indent=2, sort_keys=True) + "\n")
    print(f"{network.num_roads} roads, {len(network.edges)} edges, {len(trajs)} trajectories -> {out}")


def cmd_pretrain(cfg: ExperimentConfig, out: Path, args) -> None:
    ws = prepare(cfg, args.data)
    model = build_encoder(cfg, None)
    pcfg = cfg.pretrain_config(sub_seed(cfg.seed, "pretrain"))
    res = run_pretraining(ws.train, ws.graph, ws.hist, pcfg, model=model)
    aug = pcfg.augment_cfg
    acc = masked_accuracy(res.pretrainer, ws.graph, ws.val, aug, seed=sub_seed(cfg.seed, "sim"))
    ckpt = Checkpoint.capture(res.pretrainer, config_blob(cfg), res.optimizer, res.epochs_done,
                              {"kind": "pretrain", "encoder_prefix": "model.",
                               "num_roads": ws.network.num_roads})
    ckpt.save(out / "pretrain.ckpt")
    (out / "pretrain_history.json").write_text(json.dumps(res.history, indent=2) + "\n")
    last = res.history[-1] if res.history else {}
    metrics = {"masked_accuracy": acc, "loss": last.get("loss", float("nan")),
               "mask_loss": last.get("mask_loss", float("nan")),
               "con_loss": last.get("con_loss", float("nan"))}
    report = MetricsReport("pretrain", metrics, {"config": cfg.echo()})
    write_report(out, "pretrain_metrics", report)
    print(report.to_text(), end="")


def _labels(cfg: ExperimentConfig, ws: Workspace):
    if cfg.finetune.label == "peak":
        return (lambda t: int(t.label)), 2
    users = sorted({t.user_id for t in ws.train + ws.val + ws.test})
    index = {u: i for i, u in enumerate(users)}
    return (lambda t: index[t.user_id]), len(users)


def cmd_finetune(cfg: ExperimentConfig, out: Path, args) -> None:
    ws = prepare(cfg, args.data)
    ckpt = load_checkpoint(args.checkpoint)
    encoder = build_encoder(cfg, ckpt)
    fcfg = cfg.finetune_config(sub_seed(cfg.seed, "finetune"))
    if args.task == "eta":
        model, history = finetune_eta(encoder, ws.train, ws.graph, fcfg)
        y = np.array([t.duration for t in ws.test], dtype=np.float64)
        pred = predict_eta(model, [TripQuery.of(t) for t in ws.test], ws.graph)
        metrics = regression_metrics(y, pred)
        mean = float(np.mean([t.duration for t in ws.train]))
        metrics["baseline_MAE"] = regression_metrics(y, np.full_like(y, mean))["MAE"]
    else:
        label_of, num_classes = _labels(cfg, ws)
        model, history = finetune_classify(encoder, ws.train, [label_of(t) for t in ws.train],
                                           num_classes, ws.graph, fcfg)
        probs = classify(model, ws.test, ws.graph)
        metrics = classification_metrics([label_of(t) for t in ws.test], probs,
                                         ks=(cfg.finetune.recall_k,))
    Checkpoint.capture(model, config_blob(cfg), None, fcfg.epochs,
                       {"kind": f"finetune-{args.task}", "encoder_prefix": "encoder.",
                        "num_roads": ws.network.num_roads}).save(out / f"finetune_{args.task}.ckpt")
    (out / f"finetune_{args.task}_history.json").write_text(json.dumps(history, indent=2) + "\n")
    report = MetricsReport(args.task, metrics, {"config": cfg.echo(),
                                                "pretrained": ckpt is not None})
    write_report(out, f"{args.task}_metrics", report)
    print(report.to_text(), end="")


def cmd_embed(cfg: ExperimentConfig, out: Path, args) -> None:
    ws = prepare(cfg, args.data)
    encoder = build_encoder(cfg, load_checkpoint(args.checkpoint))
    trajs = ws.test if args.corpus is None else read_corpus(args.corpus)
    for t in trajs:
        ws.network.check_path(t.roads)
    vectors = embed(encoder, trajs, ws.graph)
    write_embeddings(out / "embeddings.txt", [t.traj_id for t in trajs], vectors)
    print(f"{len(trajs)} embeddings of dimension {vectors.shape[1]} -> {out / 'embeddings.txt'}")


def cmd_eval_sim(cfg: ExperimentConfig, out: Path, args) -> None:
    ws = prepare(cfg, args.data)
    encoder = build_encoder(cfg, load_checkpoint(args.checkpoint))
    s = cfg.sim
    pool = ws.test if s.pool == "test" else ws.val + ws.test
    qs = build_query_sets(pool, ws.network, ws.hist, s.n_queries, s.n_negatives, s.p_d, s.t_d,
                          sub_seed(cfg.seed, "sim"), s.k_max)
    qs.save(out / "queries")
    q = embed(encoder, qs.queries, ws.graph)
    q_detour = embed(encoder, qs.query_detours, ws.graph)
    db = embed(encoder, qs.database(), ws.graph)
    metrics = most_similar_eval(q, db, qs.truth)
    metrics.update(knn_eval(q, q_detour, db, s.knn_k))
    report = MetricsReport("similarity", metrics, {"config": cfg.echo(), "queries": qs.manifest})
    write_report(out, "sim_metrics", report)
    print(report.to_text(), end="")


def cmd_report(cfg: ExperimentConfig, out: Path, args) -> None:
    from .report import render_report
    paths = [Path(p) for p in args.files]
    for p in paths:
        if not p.is_file():
            raise ValidationError(f"{p} does not exist")
    table = render_report(paths, out)
    print(table, end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value entries")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. pretrain.lr=1e-3")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="directory with nodes.csv, edges.csv and corpus.jsonl "
                                     "(default: synthesise from the config)")

    parser = argparse.ArgumentParser(prog="start-trl",
                                     description="Trajectory representation learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic network and corpus")
    sub.add_parser("pretrain", parents=[common, data], help="self-supervised pretraining")
    p = sub.add_parser("finetune", parents=[common, data], help="fine-tune on a downstream task")
    p.add_argument("task", choices=["eta", "classify"])
    p.add_argument("--checkpoint", help="pretrained checkpoint (omit to train from scratch)")
    p = sub.add_parser("embed", parents=[common, data], help="export trajectory vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="JSONL trajectories to embed (default: the test split)")
    p = sub.add_parser("eval-sim", parents=[common, data], help="detour-based similarity search")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("report", parents=[common], help="charts and a table from metrics files")
    p.add_argument("files", nargs="+", help="*_metrics.json and *_history.json files")
    return parser


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "embed": cmd_embed, "eval-sim": cmd_eval_sim, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    deterministic()
    try:
        cfg = load_config(args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
