"""Reproducible experiment driver.

Every subcommand writes into its own run directory: a frozen config snapshot,
a CSV log, result JSON, checkpoints and plots. Config precedence is
flags > --config file > defaults; the resolved snapshot is what reruns use.
Run directories resolve against $ELASTICPOSE_RUNS (default ./runs) unless an
absolute path is given. File formats are documented in FORMATS.md.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .cost import genome_cost, video_cost
from .genome import (
    corner,
    parse_genome,
    parse_video_genome,
    resnet50_space,
    sbl_resnet50_genome,
    sbl_resnet50_space,
    toy_space,
)
from .pipeline import (
    calibration_image_batches,
    calibration_pair_batches,
    frame_budget,
    materialize_video_nets,
    spatial_budget,
)
from .posekit import DataConfig, generate, load_dataset, save_dataset
from .search import (
    SearchConfig,
    evaluate_images,
    evaluate_propagation,
    search_shared,
    search_spatial,
    search_temporal,
)
from .supernet import PoseSuperNet, StandaloneNet
from .train import (
    TrainConfig,
    init_temporal_from_spatial,
    recalibrate_statistics,
    spatial_arrays,
    train_spatial,
    train_temporal,
    video_arrays,
)

SPACES = {"toy": toy_space, "resnet50": resnet50_space, "sbl-resnet50": sbl_resnet50_space}


class CliError(RuntimeError):
    pass


def run_root() -> Path:
    return Path(os.environ.get("ELASTICPOSE_RUNS", "runs"))


def resolve_run_dir(name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else run_root() / p


def new_run_dir(name: str) -> Path:
    path = resolve_run_dir(name)
    if (path / "config.json").exists():
        raise CliError(
            f"run directory {path} already holds a config snapshot; choose a new --run"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_config_overrides(args) -> dict:
    merged = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise CliError(f"config file not found: {cfg_path}")
        merged.update(json.loads(cfg_path.read_text()))
    for key, value in vars(args).items():
        if key in ("command", "config", "func") or value is None:
            continue
        merged[key] = value
    return merged


def write_snapshot(run_dir: Path, snapshot: dict):
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))


def require(path, what):
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing {what}: expected it at {path}")
    return path


def plot_loss(history, out_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    losses = history.losses_by_step()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(losses)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_scatter(result, out_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    flops = [c.flops / 1e6 for c in result.candidates]
    scores = [c.score for c in result.candidates]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(flops, scores, s=18, alpha=0.7)
    best = result.best
    ax.scatter([best.flops / 1e6], [best.score], s=70, marker="*", color="crimson")
    ax.set_xlabel("MFLOPs")
    ax.set_ylabel("AP")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def split_eval(samples, eval_fraction=0.25):
    n_eval = max(1, int(len(samples) * eval_fraction))
    return samples[:-n_eval], samples[-n_eval:]


def save_net(path, net, metadata):
    digest = ckpt.save_checkpoint(path, ckpt.state_dict_arrays(net), metadata)
    return digest


def load_supernet(path, temporal=False):
    arrays, meta = ckpt.load_checkpoint(require(path, "checkpoint"))
    space = SPACES[meta["space"]]()
    net = PoseSuperNet(space, joints=meta["joints"], temporal=temporal)
    ckpt.load_into_module(net, arrays)
    net.eval()
    return net, space, meta


def load_standalone(path):
    arrays, meta = ckpt.load_checkpoint(require(path, "checkpoint"))
    space = SPACES[meta["space"]]()
    genome = parse_genome(meta["genome"])
    net = StandaloneNet(space, genome, meta["joints"])
    ckpt.load_into_module(net, arrays)
    net.eval()
    return net, space, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    merged = load_config_overrides(args)
    cfg = DataConfig(
        joints=merged.get("joints", 5),
        height=merged.get("height", 64),
        width=merged.get("width", 48),
        t_frames=merged.get("t_frames", 3),
        n_sequences=merged.get("sequences", 64),
        occlusion_rate=merged.get("occlusion_rate", 0.3),
        seed=merged.get("seed", 0),
    )
    out = Path(merged["out"])
    samples = generate(cfg)
    save_dataset(out, samples, cfg)
    print(f"wrote {len(samples)} sequences to {out}")
    return 0


def cmd_train_spatial(args):
    merged = load_config_overrides(args)
    run_dir = new_run_dir(merged["run"])
    samples, data_cfg = load_dataset(require(merged["data"], "dataset directory"))
    space_name = merged.get("space", "toy")
    space = SPACES[space_name]()
    seed = merged.get("seed", 0)
    cfg = TrainConfig(
        epochs=merged.get("epochs", 12),
        batch_size=merged.get("batch_size", 16),
        lr=merged.get("lr", 1e-3),
        n_random=merged.get("n_random", 2),
        t_frames=data_cfg.t_frames,
        seed=seed,
        lr_schedule="step",
    )
    torch.manual_seed(seed)
    net = PoseSuperNet(space, joints=data_cfg.joints)
    images, targets = spatial_arrays(samples, cfg.sigma)
    history = train_spatial(net, space, images, targets, cfg)
    digest = save_net(
        run_dir / "spatial_supernet.ckpt",
        net,
        {"kind": "spatial_supernet", "space": space_name, "joints": data_cfg.joints,
         "seed": seed, "train_config": asdict(cfg)},
    )
    (run_dir / "log.csv").write_text("\n".join(history.csv_lines()) + "\n")
    plot_loss(history, run_dir / "loss.png")
    snapshot = {"command": "train-spatial", "config": merged, "seed": seed,
                "checkpoint_hash": digest}
    write_snapshot(run_dir, snapshot)
    print(f"spatial super-network trained; checkpoint {run_dir / 'spatial_supernet.ckpt'}")
    return 0


def cmd_search_spatial(args):
    merged = load_config_overrides(args)
    run_dir = new_run_dir(merged["run"])
    samples, data_cfg = load_dataset(require(merged["data"], "dataset directory"))
    net, space, meta = load_supernet(merged["checkpoint"])
    input_size = (data_cfg.height, data_cfg.width)
    if "budget" in merged:
        budget = float(merged["budget"])
    else:
        budget = spatial_budget(space, input_size, data_cfg.joints,
                                merged.get("budget_frac", 0.4))
    seed = merged.get("seed", 0)
    scfg = SearchConfig(
        budget=budget,
        num_samples=merged.get("samples", 24),
        seed=seed,
        input_size=input_size,
        joints=data_cfg.joints,
        t_frames=data_cfg.t_frames,
    )
    train_samples, eval_samples = split_eval(samples)
    calib = calibration_image_batches(train_samples)
    result = search_spatial(net, space, eval_samples, calib, scfg)
    _write_search_outputs(run_dir, result, merged, seed,
                          {"supernet": ckpt.checkpoint_hash(merged["checkpoint"])})
    print(f"best genome AP={result.best.score:.4f} flops={result.best.flops}")
    return 0


def _write_search_outputs(run_dir, result, merged, seed, hashes):
    payload = {
        "provenance": dict(result.provenance, checkpoint_hashes=hashes, seed=seed),
        "candidates": [
            {"rank": i, "score": c.score, "flops": c.flops, "genome": c.genome.to_dict()}
            for i, c in enumerate(result.candidates)
        ],
        "best": {"score": result.best.score, "flops": result.best.flops,
                 "genome": result.best.genome.to_dict()},
    }
    (run_dir / "result.json").write_text(json.dumps(payload, indent=2))
    (run_dir / "result.csv").write_text("\n".join(result.csv_lines()) + "\n")
    (run_dir / "best_genome.json").write_text(json.dumps(result.best.genome.to_dict(), indent=2))
    plot_scatter(result, run_dir / "scatter.png")
    write_snapshot(run_dir, {"command": "search", "config": merged, "seed": seed,
                             "checkpoint_hashes": hashes})


def cmd_train_temporal(args):
    merged = load_config_overrides(args)
    run_dir = new_run_dir(merged["run"])
    samples, data_cfg = load_dataset(require(merged["data"], "dataset directory"))
    snet, space, smeta = load_supernet(merged["checkpoint"])
    genome_file = require(merged["genome"], "searched key genome (best_genome.json)")
    key_genome = parse_genome(json.loads(genome_file.read_text()))
    seed = merged.get("seed", 0)

    train_samples, _ = split_eval(samples)
    calib = calibration_image_batches(train_samples)
    recalibrate_statistics(snet, key_genome, calib)
    key_net = snet.materialize(key_genome)

    cfg = TrainConfig(
        epochs=merged.get("epochs", 12),
        batch_size=merged.get("batch_size", 8),
        lr=merged.get("lr", 1e-3),
        n_random=merged.get("n_random", 2),
        t_frames=min(data_cfg.t_frames, merged.get("t_frames", data_cfg.t_frames)),
        seed=seed,
        lr_schedule="cosine",
    )
    torch.manual_seed(seed + 1)
    tnet = PoseSuperNet(space, joints=data_cfg.joints, temporal=True)
    init_temporal_from_spatial(tnet, snet)
    frames, targets = video_arrays(train_samples, cfg.sigma)
    history = train_temporal(key_net, tnet, space, frames, targets, cfg)

    space_name = smeta["space"]
    t_digest = save_net(
        run_dir / "temporal_supernet.ckpt", tnet,
        {"kind": "temporal_supernet", "space": space_name, "joints": data_cfg.joints,
         "seed": seed, "train_config": asdict(cfg)},
    )
    k_digest = save_net(
        run_dir / "key_net.ckpt", key_net,
        {"kind": "standalone", "space": space_name, "joints": data_cfg.joints,
         "genome": key_genome.to_dict()},
    )
    (run_dir / "log.csv").write_text("\n".join(history.csv_lines()) + "\n")
    plot_loss(history, run_dir / "loss.png")
    write_snapshot(run_dir, {"command": "train-temporal", "config": merged, "seed": seed,
                             "checkpoint_hash": t_digest, "key_checkpoint_hash": k_digest})
    print(f"temporal super-network trained; checkpoint {run_dir / 'temporal_supernet.ckpt'}")
    return 0


def cmd_search_temporal(args):
    merged = load_config_overrides(args)
    run_dir = new_run_dir(merged["run"])
    samples, data_cfg = load_dataset(require(merged["data"], "dataset directory"))
    temporal_run = resolve_run_dir(merged["temporal_run"])
    tnet, space, tmeta = load_supernet(temporal_run / "temporal_supernet.ckpt", temporal=True)
    key_net, _, kmeta = load_standalone(temporal_run / "key_net.ckpt")
    key_genome = parse_genome(kmeta["genome"])
    seed = merged.get("seed", 0)
    t_frames = merged.get("t_frames", data_cfg.t_frames)
    input_size = (data_cfg.height, data_cfg.width)
    if "budget" in merged:
        budget = float(merged["budget"])
    else:
        budget = t_frames * frame_budget(space, input_size, data_cfg.joints,
                                         merged.get("budget_frac", 0.4))
    scfg = SearchConfig(
        budget=budget,
        num_samples=merged.get("samples", 24),
        seed=seed,
        input_size=input_size,
        joints=data_cfg.joints,
        t_frames=t_frames,
    )
    train_samples, eval_samples = split_eval(samples)
    calib = calibration_pair_batches(key_net, train_samples)
    fn = search_shared if merged.get("allocation", "per-frame") == "shared" else search_temporal
    result = fn(tnet, key_net, key_genome, space, eval_samples, calib, scfg)
    hashes = {
        "temporal_supernet": ckpt.checkpoint_hash(temporal_run / "temporal_supernet.ckpt"),
        "key_net": ckpt.checkpoint_hash(temporal_run / "key_net.ckpt"),
    }
    _write_search_outputs(run_dir, result, merged, seed, hashes)
    print(f"best video plan AP={result.best.score:.4f} non-key flops={result.best.flops}")
    return 0


def cmd_eval(args):
    merged = load_config_overrides(args)
    run_dir = new_run_dir(merged["run"])
    samples, data_cfg = load_dataset(require(merged["data"], "dataset directory"))
    _, eval_samples = split_eval(samples)
    input_size = (data_cfg.height, data_cfg.width)
    scfg = SearchConfig(budget=1.0, num_samples=1, input_size=input_size,
                        joints=data_cfg.joints, t_frames=data_cfg.t_frames)
    hashes = {}
    metrics = {}
    if merged.get("temporal_run"):
        temporal_run = resolve_run_dir(merged["temporal_run"])
        tnet, space, _ = load_supernet(temporal_run / "temporal_supernet.ckpt", temporal=True)
        key_net, _, _ = load_standalone(temporal_run / "key_net.ckpt")
        genome_file = require(merged["genome"], "video genome JSON")
        vg = parse_video_genome(json.loads(Path(genome_file).read_text()))
        train_samples, _ = split_eval(samples)
        calib = calibration_pair_batches(key_net, train_samples)
        nets = materialize_video_nets(tnet, vg, calib)
        metrics["ap"] = evaluate_propagation(key_net, nets, eval_samples, scfg)
        report = video_cost(vg, space, input_size, data_cfg.joints)
        metrics["average_flops"] = report.average_flops
        metrics["non_key_flops"] = report.non_key_flops
        hashes["temporal_supernet"] = ckpt.checkpoint_hash(
            temporal_run / "temporal_supernet.ckpt"
        )
    elif merged.get("checkpoint"):
        net, space, meta = load_standalone(merged["checkpoint"])
        metrics["ap"] = evaluate_images(lambda b: net(b), eval_samples, scfg)
        hashes["net"] = ckpt.checkpoint_hash(merged["checkpoint"])
    else:
        raise CliError("eval needs --temporal-run with --genome, or --checkpoint")
    payload = {"metrics": metrics, "seed": merged.get("seed", 0),
               "checkpoint_hashes": hashes, "config": merged}
    (run_dir / "metrics.json").write_text(json.dumps(payload, indent=2))
    write_snapshot(run_dir, payload)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_flops(args):
    merged = load_config_overrides(args)
    space_name = merged.get("space", "sbl-resnet50")
    space = SPACES[space_name]()
    which = merged.get("genome", "biggest")
    if which in ("smallest", "biggest"):
        genome = corner(space, which)
    elif which == "sbl":
        space = sbl_resnet50_space()
        genome = sbl_resnet50_genome()
    else:
        genome = parse_genome(json.loads(Path(require(which, "genome JSON")).read_text()))
    h, w = (int(v) for v in merged.get("input", "256x192").split("x"))
    joints = merged.get("joints", 17)
    report = genome_cost(genome, space, (h, w), joints)
    for line in report.csv_lines():
        print(line)
    print(f"# {report.summary()} -> {report.gmacs():.2f} GMACs")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="elasticpose",
        description="Elastic pose super-networks: data generation, training, search, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.set_defaults(func=fn)
        return p

    p = add("generate", cmd_generate, help="render a synthetic video pose dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int)
    p.add_argument("--joints", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--t-frames", dest="t_frames", type=int)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float)
    p.add_argument("--seed", type=int)

    p = add("train-spatial", cmd_train_spatial, help="train the key-frame super-network")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--space", choices=["toy", "resnet50"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-random", dest="n_random", type=int)
    p.add_argument("--seed", type=int)

    p = add("search-spatial", cmd_search_spatial, help="constrained key-frame search")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="spatial_supernet.ckpt path")
    p.add_argument("--budget", type=float, help="absolute MAC budget")
    p.add_argument("--budget-frac", dest="budget_frac", type=float,
                   help="fraction between the smallest and biggest corner costs")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)

    p = add("train-temporal", cmd_train_temporal,
            help="multi-frame propagation training of the temporal super-network")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="spatial_supernet.ckpt path")
    p.add_argument("--genome", required=True, help="searched key genome JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--t-frames", dest="t_frames", type=int)
    p.add_argument("--seed", type=int)

    p = add("search-temporal", cmd_search_temporal,
            help="joint temporal search with per-frame computation allocation")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--temporal-run", dest="temporal_run", required=True)
    p.add_argument("--budget", type=float)
    p.add_argument("--budget-frac", dest="budget_frac", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--t-frames", dest="t_frames", type=int)
    p.add_argument("--allocation", choices=["per-frame", "shared"])
    p.add_argument("--seed", type=int)

    p = add("eval", cmd_eval, help="evaluate a searched model on a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--temporal-run", dest="temporal_run")
    p.add_argument("--genome", help="video genome JSON (with --temporal-run)")
    p.add_argument("--checkpoint", help="standalone net checkpoint")
    p.add_argument("--seed", type=int)

    p = add("flops", cmd_flops, help="analytical cost report for a genome")
    p.add_argument("--space", choices=list(SPACES))
    p.add_argument("--genome", help="smallest | biggest | sbl | path to genome JSON")
    p.add_argument("--input", help="HxW, e.g. 256x192")
    p.add_argument("--joints", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
