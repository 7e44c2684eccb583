"""Training orchestration, configuration presets, checkpointing, and the CLI.

One iteration: load a mini-batch, forward the heads and the momentum head,
mine global hidden positives (task-agnostic on backbone features, task-
specific on momentum features), sample negatives, select and mix local
neighbors, take the composite loss with the ramped task-specific weight,
apply AdamW, update the EMA head, and renew the task-specific pool on its
schedule.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import struct
import sys
from dataclasses import dataclass, field

import numpy as np

from . import evaluation, heads, mining, objective, refpool, shardio
from .tensorcore import RngStream

log = logging.getLogger(__name__)

PRESETS = {
    "coco": {"tau": 0.8, "pool_size": 2048, "epochs": 3, "embed_dim": 512},
    "cityscapes": {"tau": 0.6, "pool_size": 2048, "epochs": 20, "embed_dim": 512},
    "potsdam": {"tau": 0.4, "pool_size": 1024, "epochs": 10, "embed_dim": 256},
    # pool_size <= dataset size is a hard precondition (one patch per image);
    # the canonical desk dataset has 64 images.
    "synth": {"tau": 0.5, "pool_size": 64, "iterations": 300, "embed_dim": 16},
}


@dataclass
class TrainConfig:
    data_dir: str | None = None
    batch_size: int = 8
    embed_dim: int = 16
    hidden_dim: int | None = None  # defaults to embed_dim
    pool_size: int = 256
    tau: float = 0.5
    rho: float = 2.0  # percent of remaining patches drawn as negatives
    sigma: float = 1.0
    window_radius: int = 1
    momentum: float = 0.99
    lr: float = 5e-4
    weight_decay: float = 0.1
    iterations: int = 300
    epochs: int | None = None  # when set, iterations = epochs * batches per epoch
    renewal_period: int = 100
    lambda_shape: str = "linear"
    alpha: float = 0.05
    ghp_ts: bool = True
    lhp: bool = True
    symmetric: bool = True
    regularizer: bool = True
    baseline_self_contrastive: bool = False
    loss_prop: bool = False
    seed: int = 0
    eval_every: int = 0  # 0 = final evaluation only
    log_every: int = 50
    metrics_path: str | None = None
    checkpoint_path: str | None = None
    checkpoint_every: int = 0  # cadence checkpoints land next to checkpoint_path
    cluster_steps: int = 500
    cluster_lr: float = 0.005
    linear_lr: float = 0.001
    linear_epochs: int = 100
    probe_split: float = 0.5

    @classmethod
    def from_sources(cls, preset: str | None = None, file_values: dict | None = None, overrides: dict | None = None):
        values = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
            values.update(PRESETS[preset])
        if file_values:
            values.update(file_values)
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def resolved(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    params: heads.HeadParameters
    momentum_params: heads.MomentumParameters
    iteration: int
    metric_rows: list
    history: list  # LossBreakdown per iteration
    renewal_count: int
    ag_pool: refpool.ReferencePool
    sp_pool: refpool.ReferencePool | None
    config: TrainConfig = field(repr=False, default=None)


def _included_terms(config: TrainConfig) -> tuple:
    terms = ["phi_ag"]
    if config.lhp:
        terms.append("psi_ag")
    if config.ghp_ts:
        terms.append("phi_sp")
        if config.lhp:
            terms.append("psi_sp")
    if config.regularizer:
        terms.append("reg")
    return tuple(terms)


def run_probes(shards: list, params: heads.HeadParameters, config: TrainConfig, iteration: int) -> dict:
    """Both probes over the frozen segmentation features of the whole dataset."""
    if any(s.labels is None for s in shards):
        raise ValueError("evaluation needs labels in every shard")
    feats = np.concatenate([s.view_a for s in shards], axis=0)
    labels = np.concatenate([s.labels for s in shards])
    num_classes = max(s.num_classes for s in shards)
    seg, _ = heads.seg_forward(feats, params)

    probe_rng = RngStream(config.seed).child(f"probe-{iteration}")
    cluster = evaluation.cluster_probe_result(
        seg, labels, num_classes, probe_rng.child("cluster"), lr=config.cluster_lr, steps=config.cluster_steps
    )

    # image-level train/test split, fixed by the seed so eval points are comparable
    perm = RngStream(config.seed).child("probe-split").generator().permutation(len(shards))
    cut = max(1, int(len(shards) * config.probe_split))
    if len(shards) < 2:
        raise ValueError("linear probe needs at least 2 images to split")
    train_idx, test_idx = perm[:cut], perm[cut:]
    sizes = np.asarray([s.num_patches for s in shards])
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    rows_of = lambda idxs: np.concatenate([np.arange(bounds[i], bounds[i + 1]) for i in idxs])
    tr, te = rows_of(train_idx), rows_of(test_idx)
    linear, _ = evaluation.linear_probe(
        seg[tr], labels[tr], seg[te], labels[te], num_classes,
        lr=config.linear_lr, epochs=config.linear_epochs,
    )
    return {
        "iteration": iteration,
        "unsup_acc": cluster.accuracy,
        "unsup_miou": cluster.mean_iou,
        "linear_acc": linear.accuracy,
        "linear_miou": linear.mean_iou,
    }


def save_checkpoint(path, params, momentum_params, opt, iteration, ag_pool, sp_pool, renewal_count):
    scalars = {
        "iteration": int(iteration),
        "opt_step": int(opt.step),
        "momentum_coefficient": float(momentum_params.coefficient),
        "renewal_count": int(renewal_count),
        "sp_built_at": int(sp_pool.built_at_iteration) if sp_pool is not None else -1,
    }
    arrays = dict(params.blocks())
    arrays.update({f"mom.{k}": v for k, v in momentum_params.blocks().items()})
    arrays.update({f"adam_m.{k}": v for k, v in opt.moments1.items()})
    arrays.update({f"adam_v.{k}": v for k, v in opt.moments2.items()})
    arrays["pool_ag"] = np.asarray(ag_pool.entries)
    if sp_pool is not None:
        arrays["pool_sp"] = np.asarray(sp_pool.entries)
    heads.save_hpck(path, scalars, arrays)


def load_checkpoint(path, config: TrainConfig):
    scalars, arrays = heads.load_hpck(path)
    params = heads.HeadParameters(**{k: arrays[k] for k in heads.ALL_BLOCKS})
    momentum_params = heads.MomentumParameters(
        **{k: arrays[f"mom.{k}"] for k in heads.SEG_BLOCKS},
        coefficient=scalars["momentum_coefficient"],
    )
    opt = heads.init_optimizer(params.blocks(), lr=config.lr, weight_decay=config.weight_decay)
    opt.step = int(scalars["opt_step"])
    for k in heads.ALL_BLOCKS:
        opt.moments1[k] = arrays[f"adam_m.{k}"]
        opt.moments2[k] = arrays[f"adam_v.{k}"]
    ag_pool = refpool.ReferencePool(entries=arrays["pool_ag"].copy(), flavor=refpool.TASK_AGNOSTIC)
    sp_pool = None
    if "pool_sp" in arrays:
        sp_pool = refpool.ReferencePool(
            entries=arrays["pool_sp"].copy(),
            flavor=refpool.TASK_SPECIFIC,
            built_at_iteration=int(scalars["sp_built_at"]),
        )
    return {
        "params": params,
        "momentum_params": momentum_params,
        "opt": opt,
        "iteration": int(scalars["iteration"]),
        "renewal_count": int(scalars["renewal_count"]),
        "ag_pool": ag_pool,
        "sp_pool": sp_pool,
    }


def _baseline_step(batch, params, tau):
    """Baseline mode: single-positive loss on augmented pairs, no mining."""
    s_a, seg_cache_a = heads.seg_forward(batch.feats_a, params)
    z_a, proj_cache_a = heads.proj_forward(s_a, params)
    s_b, seg_cache_b = heads.seg_forward(batch.feats_b, params)
    z_b, proj_cache_b = heads.proj_forward(s_b, params)
    loss, dz_a, dz_b = objective.self_contrastive_batch(z_a, z_b, tau)
    grads = {name: np.zeros_like(arr) for name, arr in params.blocks().items()}
    for dz, proj_cache, seg_cache in ((dz_a, proj_cache_a, seg_cache_a), (dz_b, proj_cache_b, seg_cache_b)):
        proj_grads, d_s = heads.proj_backward(dz, proj_cache, params)
        for k, v in proj_grads.items():
            grads[k] += v
        for k, v in heads.seg_backward(d_s, seg_cache, params).items():
            grads[k] += v
    n = batch.num_anchors
    breakdown = objective.LossBreakdown(
        phi_ag=0.0, psi_ag=0.0, phi_sp=0.0, psi_sp=0.0, regularizer=0.0,
        total=loss, anchors_used=n, anchors_skipped_zero_positive=0, lam=0.0, alpha=0.0,
    )
    return breakdown, grads


def train(config: TrainConfig, shards: list | None = None, resume: str | None = None) -> TrainResult:
    """Run the full training loop; deterministic given (config, dataset)."""
    if shards is None:
        if config.data_dir is None:
            raise ValueError("config needs data_dir (or pass shards directly)")
        shards = shardio.load_dataset(config.data_dir)

    root = RngStream(config.seed)
    feat_dim = shards[0].feat_dim
    num_batches = len(shardio.make_batches(shards, config.batch_size, root.child("epoch-0")))
    total_iterations = config.iterations
    if config.epochs is not None:
        total_iterations = config.epochs * num_batches

    if resume is not None:
        state = load_checkpoint(resume, config)
        params = state["params"]
        momentum_params = state["momentum_params"]
        opt = state["opt"]
        start_iteration = state["iteration"]
        renewal_count = state["renewal_count"]
        ag_pool = state["ag_pool"]
        sp_pool = state["sp_pool"]
    else:
        params = heads.init_head_parameters(
            feat_dim, config.embed_dim, root.child("init"), hidden_dim=config.hidden_dim
        )
        momentum_params = heads.MomentumParameters.from_head(params, coefficient=config.momentum)
        opt = heads.init_optimizer(params.blocks(), lr=config.lr, weight_decay=config.weight_decay)
        start_iteration = 0
        renewal_count = 0
        ag_pool = refpool.build_task_agnostic_pool(shards, config.pool_size, root.child("ag-pool"))
        sp_pool = None

    schedule = objective.LossSchedule(
        total_iterations=total_iterations, tau=config.tau, alpha=config.alpha, shape=config.lambda_shape
    )
    renewal = refpool.RenewalSchedule(period=config.renewal_period)
    include = _included_terms(config)
    mode = objective.LOSS_PROP if config.loss_prop else objective.GRAD_PROP
    selection_cache: dict = {}

    history = []
    metric_rows = []
    batches = None
    current_epoch = -1
    for t in range(start_iteration, total_iterations):
        epoch_idx, pos = divmod(t, num_batches)
        if epoch_idx != current_epoch:
            batches = shardio.make_batches(shards, config.batch_size, root.child(f"epoch-{epoch_idx}"))
            current_epoch = epoch_idx
        batch = batches[pos]
        n = batch.num_anchors

        if config.ghp_ts and renewal.due(t):
            sp_pool = refpool.renew_task_specific_pool(
                shards, momentum_params, config.pool_size, root.child(f"sp-pool-{t}"), iteration=t
            )
            renewal_count += 1

        if config.baseline_self_contrastive:
            breakdown, grads = _baseline_step(batch, params, config.tau)
        else:
            pos_ag = mining.mine_global(batch.feats_a, ag_pool, symmetric=config.symmetric)
            neg_ag = mining.sample_negatives_all(pos_ag, n, config.rho, root.child(f"neg-ag-{t}"))
            pos_sp = neg_sp = None
            if config.ghp_ts:
                s_prime, _ = heads.seg_forward(batch.feats_a, momentum_params)
                pos_sp = mining.mine_task_specific(s_prime, sp_pool, symmetric=config.symmetric)
                neg_sp = mining.sample_negatives_all(pos_sp, n, config.rho, root.child(f"neg-sp-{t}"))
            sets = mining.GlobalPositiveSets(pos_ag=pos_ag, neg_ag=neg_ag, pos_sp=pos_sp, neg_sp=neg_sp)
            selections = (
                mining.select_local_batch(batch, config.window_radius, selection_cache) if config.lhp else None
            )
            feats_b = batch.feats_b if config.regularizer else None
            breakdown, grads = objective.total_loss(
                batch.feats_a, feats_b, params, sets, selections, schedule, t,
                sigma=config.sigma, include=include, mode=mode,
            )

        heads.adamw_step(params.blocks(), grads, opt)
        heads.momentum_update(params, momentum_params)
        history.append(breakdown)

        if config.log_every and t % config.log_every == 0:
            log.info(
                "iter %d: total=%.4f phi_ag=%.4f psi_ag=%.4f phi_sp=%.4f psi_sp=%.4f reg=%.4f lam=%.3f skipped=%d",
                t, breakdown.total, breakdown.phi_ag, breakdown.psi_ag,
                breakdown.phi_sp, breakdown.psi_sp, breakdown.regularizer,
                breakdown.lam, breakdown.anchors_skipped_zero_positive,
            )
        if config.eval_every and (t + 1) % config.eval_every == 0 and (t + 1) != total_iterations:
            row = run_probes(shards, params, config, t + 1)
            metric_rows.append(row)
            log.info("%s", evaluation.format_metric_record(row))
        if (
            config.checkpoint_path
            and config.checkpoint_every
            and (t + 1) % config.checkpoint_every == 0
            and (t + 1) != total_iterations
        ):
            from pathlib import Path

            p = Path(config.checkpoint_path)
            save_checkpoint(
                p.with_name(f"{p.stem}_it{t + 1}{p.suffix}"), params, momentum_params, opt,
                t + 1, ag_pool, sp_pool, renewal_count,
            )

    row = run_probes(shards, params, config, total_iterations)
    metric_rows.append(row)
    log.info("%s", evaluation.format_metric_record(row))

    if config.metrics_path:
        evaluation.write_metrics_csv(config.metrics_path, metric_rows)
    if config.checkpoint_path:
        save_checkpoint(
            config.checkpoint_path, params, momentum_params, opt,
            total_iterations, ag_pool, sp_pool, renewal_count,
        )
    return TrainResult(
        params=params,
        momentum_params=momentum_params,
        iteration=total_iterations,
        metric_rows=metric_rows,
        history=history,
        renewal_count=renewal_count,
        ag_pool=ag_pool,
        sp_pool=sp_pool,
        config=config,
    )


def evaluate(checkpoint_path: str, shards_or_dir, config: TrainConfig) -> dict:
    """Freeze the checkpointed heads and run both probes over a labeled dataset."""
    shards = (
        shardio.load_dataset(shards_or_dir) if isinstance(shards_or_dir, (str, bytes)) else shards_or_dir
    )
    if any(s.labels is None for s in shards):
        raise ValueError("cluster probe cannot be scored: dataset has unlabeled shards")
    state = load_checkpoint(checkpoint_path, config)
    row = run_probes(shards, state["params"], config, state["iteration"])
    if config.metrics_path:
        evaluation.write_metrics_csv(config.metrics_path, [row])
    return row


# ---------------------------------------------------------------------------
# Command-line surface
# ---------------------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; flags override file values")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named hyperparameter preset")
    p.add_argument("--data", dest="data_dir", help="directory of *.hpfs shards")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--window-radius", dest="window_radius", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--renewal-period", dest="renewal_period", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--metrics", dest="metrics_path")
    p.add_argument("--checkpoint", dest="checkpoint_path")
    p.add_argument("--no-ghp-ts", dest="ghp_ts", action="store_false", default=None)
    p.add_argument("--no-lhp", dest="lhp", action="store_false", default=None)
    p.add_argument("--no-symmetric", dest="symmetric", action="store_false", default=None)
    p.add_argument("--no-regularizer", dest="regularizer", action="store_false", default=None)
    p.add_argument("--baseline-self-contrastive", dest="baseline_self_contrastive", action="store_true", default=None)
    p.add_argument("--loss-prop", dest="loss_prop", action="store_true", default=None)


def _config_from_args(args) -> TrainConfig:
    file_values = {}
    if args.config:
        with open(args.config) as f:
            file_values = json.load(f)
    skip = {"config", "preset", "command", "dump_config", "resume", "out", "path"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    preset = args.preset or file_values.pop("preset", None)
    return TrainConfig.from_sources(preset=preset, file_values=file_values, overrides=overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="hpseg", description="Hidden-positive segmentation-head training engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train heads on a shard directory")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    _add_config_flags(p_eval)
    p_eval.add_argument("--from", dest="resume", required=True, help="checkpoint file to evaluate")

    p_synth = sub.add_parser("synth", help="generate a synthetic shard dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=3)
    p_synth.add_argument("--images", type=int, default=64)
    p_synth.add_argument("--grid-h", type=int, default=8)
    p_synth.add_argument("--grid-w", type=int, default=8)
    p_synth.add_argument("--feat-dim", type=int, default=32)
    p_synth.add_argument("--separation", type=float, default=5.0)
    p_synth.add_argument("--noise", type=float, default=1.0)
    p_synth.add_argument("--jitter", type=float, default=0.1)
    p_synth.add_argument("--seed", type=int, default=0)

    p_inspect = sub.add_parser("inspect", help="print a shard file header")
    p_inspect.add_argument("path")
    return parser


def _cmd_synth(args) -> int:
    from pathlib import Path

    spec = shardio.SyntheticSpec(
        num_classes=args.classes,
        feat_dim=args.feat_dim,
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        num_images=args.images,
        separation=args.separation,
        noise=args.noise,
        jitter=args.jitter,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shards = shardio.generate_synthetic(spec)
    for i, shard in enumerate(shards):
        shardio.write_shard(shard, out / f"shard_{i:04d}.hpfs")
    print(f"wrote {len(shards)} shards to {out}")
    return 0


def _cmd_inspect(args) -> int:
    with open(args.path, "rb") as f:
        head = f.read(25)
    if len(head) < 25 or head[:4] != shardio.MAGIC:
        raise ValueError(f"{args.path} is not an HPFS shard")
    version, h, w, c, has_labels, num_classes = struct.unpack("<IIIIBI", head[4:25])
    print(
        f"HPFS v{version}: H={h} W={w} C={c} has_labels={has_labels} num_classes={num_classes}"
    )
    return 0


def cli(argv: list | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "inspect":
            return _cmd_inspect(args)
        config = _config_from_args(args)
        if args.command == "train":
            if args.dump_config:
                print(json.dumps(config.resolved(), indent=2, sort_keys=True))
                return 0
            if not config.data_dir:
                raise _UsageError("train needs --data (or data_dir in the config file)")
            train(config, resume=args.resume)
            return 0
        if args.command == "eval":
            if not config.data_dir:
                raise _UsageError("eval needs --data")
            row = evaluate(args.resume, config.data_dir, config)
            print(evaluation.format_metric_record(row))
            return 0
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, OSError, shardio.ShardError, heads.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
