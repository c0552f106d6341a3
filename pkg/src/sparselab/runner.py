"""Turns an ExperimentConfig into seeded runs, probe sweeps and report tables."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from . import masks as M
from .algorithms import AlgorithmSpec, RunRecord, TrainConfig, Trainer
from .checkpoint import load_checkpoint, read_state, restore_trainer, save_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config
from .flops import FlopsModel, density_trajectory, train_flops
from .nn import LayerSpec, Network, mlp
from .plasticity import CSV_COLUMNS, probe_sweep, train_base
from .schedules import PruneSchedule, RegenSchedule, regen_ratio_at, sparsity_at, window_remainder

log = logging.getLogger(__name__)

OUT_ENV = "SPARSELAB_OUT"
NOMINAL_TRAIN_SIZE = {"mnist": 60000, "cifar10": 50000}
SUMMARY_COLUMNS = ["name", "algorithm", "n_seeds", "test_acc_mean", "test_acc_std",
                   "final_sparsity_mean", "train_flops_mean", "test_flops_mean"]


# building blocks -------------------------------------------------------------

def build_data(cfg: ExperimentConfig) -> tuple:
    dc = cfg.dataset
    if dc.kind in ("two_moons", "blobs", "spirals"):
        ds = D.make_synthetic(dc.kind, dc.n, dc.noise, dc.split_seed, dc.classes)
        train, test = D.split_shuffle(ds, [1 - dc.test_fraction, dc.test_fraction], dc.split_seed)
    elif dc.kind == "csv":
        ds = D.read_csv(dc.path, dc.classes)
        train, test = D.split_shuffle(ds, [1 - dc.test_fraction, dc.test_fraction], dc.split_seed)
    elif dc.kind == "mnist":
        train, test = D.load_mnist(dc.path, flatten=False)
    else:
        d = Path(dc.path)
        parts = [D.read_cifar10_bin(p) for p in sorted(d.glob("data_batch_*.bin"))]
        train = D.Dataset(np.concatenate([p.inputs for p in parts]),
                          np.concatenate([p.labels for p in parts]), 10, "train")
        test = D.read_cifar10_bin(d / "test_batch.bin")
    if dc.normalize:
        mean, std = D.channel_stats(train)
        train, test = D.normalize(train, mean, std), D.normalize(test, mean, std)
    if dc.flatten and train.inputs.ndim > 2:
        train = D.Dataset(train.inputs.reshape(len(train), -1), train.labels, train.class_count, "train")
        test = D.Dataset(test.inputs.reshape(len(test), -1), test.labels, test.class_count, "test")
    return train, test


def build_layers(cfg: ExperimentConfig) -> tuple:
    nc = cfg.network
    if nc.arch == "mlp":
        return (nc.sizes[0],), mlp(nc.sizes)
    layers = []
    for l in nc.layers:
        d = l.model_dump()
        d["kernel"] = (d["kernel"], d["kernel"])
        if l.kind == "avgpool2d":
            d["stride"] = l.kernel
        layers.append(LayerSpec(**d))
    return tuple(nc.input_shape), layers


def arch_name(cfg: ExperimentConfig) -> str:
    nc = cfg.network
    return nc.name or ("mlp-" + "-".join(map(str, nc.sizes)) if nc.arch == "mlp" else "custom")


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    o = cfg.optim
    return TrainConfig(o.epochs, o.batch_size, o.lr, o.momentum, o.weight_decay,
                       o.lr_drop_factor, tuple(o.lr_drop_epochs))


def algorithm_spec(cfg: ExperimentConfig, steps_per_epoch: int) -> AlgorithmSpec:
    a, sp = cfg.algorithm, cfg.sparsity
    common = dict(scope=a.scope, structured=a.structured, dst_update_interval=a.dst_update_interval,
                  gmp_keep_values=a.gmp_keep_values, protect_first_last=a.protect_first_last)
    if a.kind == "dense":
        return AlgorithmSpec("dense", **common)
    mode = cfg.init_mode()
    if a.kind in ("granet", "gmp"):
        prune = PruneSchedule.from_epochs(sp.s_i, sp.s_f, sp.t0_epoch, sp.tf_epoch,
                                          sp.delta_t_steps, steps_per_epoch)
        regen = RegenSchedule(sp.r0, prune.tf, sp.r_schedule)
        return AlgorithmSpec(a.kind, M.SparsityPlan(mode, sp.s_i), prune, regen, **common)
    plan = M.SparsityPlan(mode, sp.s_f)
    if a.kind == "static":
        return AlgorithmSpec("static", plan, **common)
    t_end = int(round(sp.tf_epoch * steps_per_epoch))
    return AlgorithmSpec(a.kind, plan, None, RegenSchedule(sp.r0, t_end, sp.r_schedule), **common)


def output_root(cfg: ExperimentConfig) -> Path:
    root = os.environ.get(OUT_ENV)
    return Path(root) / cfg.name if root else Path(cfg.output_dir) / cfg.name


# artifacts --------------------------------------------------------------------

def write_metrics(path: Path, rec: RunRecord):
    """JSONL stream with one {step, epoch, split, metric, value} object per line."""
    spe = rec.steps_per_epoch
    with open(path, "w") as f:
        for step, loss in enumerate(rec.losses):
            f.write(json.dumps({"step": step, "epoch": step // spe, "split": "train",
                                "metric": "loss", "value": loss}) + "\n")
        for ep in rec.epochs:
            step = ep["epoch"] * spe
            for split, metric, key in (("train", "acc", "train_acc"), ("test", "acc", "test_acc"),
                                       ("train", "lr", "lr"), ("train", "density", "density"),
                                       ("train", "epoch_loss", "train_loss")):
                f.write(json.dumps({"step": step, "epoch": ep["epoch"], "split": split,
                                    "metric": metric, "value": ep[key]}) + "\n")


def write_events(path: Path, rec: RunRecord):
    cols = ["step", "layer", "pruned", "removed", "regenerated", "clamped", "nnz", "density",
            "target_sparsity", "achieved_sparsity", "regen_ratio", "dense_grad"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for ev in rec.events:
            for lid in ev.pruned:
                w.writerow([ev.step, lid, ev.pruned[lid], ev.removed[lid], ev.regenerated[lid],
                            ev.clamped[lid], ev.nnz[lid], repr(ev.densities[lid]),
                            repr(ev.target_sparsity), repr(ev.achieved_sparsity),
                            repr(ev.regen_ratio), int(ev.dense_grad)])


def write_rows(path: Path, rows: list, columns: list):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_trajectory(path: Path, rec: RunRecord):
    rows = density_trajectory(rec)
    layers = list(rec.layer_sizes)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "event", "global_density", *layers])
        for r in rows:
            w.writerow([r["step"], int(r["event"]), repr(r["global_density"]),
                        *[repr(r["layers"][l]) for l in layers]])


def load_record(path) -> RunRecord:
    """Rebuild a finished RunRecord from a final checkpoint file."""
    ck = load_checkpoint(path)
    meta = ck["meta"]
    final = read_state("net", meta["shapes"], ck["arrays"])
    init = read_state("init", meta["init_shapes"], ck["arrays"]) if meta["init_shapes"] else None
    return RunRecord.from_meta(meta["record"], init, final)


def write_cell_artifacts(cell_dir: Path, rec: RunRecord, charge_regen_dense=True):
    write_metrics(cell_dir / "metrics.jsonl", rec)
    write_events(cell_dir / "events.csv", rec)
    write_trajectory(cell_dir / "trajectory.csv", rec)
    report = train_flops(rec, charge_regen_dense=charge_regen_dense)
    (cell_dir / "flops.json").write_text(json.dumps(report.to_dict(), indent=2))
    write_rows(cell_dir / "layer_sparsity.csv", M.sparsity_table(rec.prunable_masks),
               ["layer", "shape", "params", "nnz", "density", "sparsity"])


# run ----------------------------------------------------------------------------

def _append_manifest(out: Path, entry: dict):
    with open(out / "manifest.jsonl", "a") as f:
        f.write(json.dumps(entry) + "\n")


def latest_checkpoint(cell_dir: Path) -> Optional[Path]:
    ck = sorted(cell_dir.glob("ckpt_epoch_*.npz"))
    return ck[-1] if ck else None


def run_cell(cfg: ExperimentConfig, seed: int, out: Path, stop_after_epoch: Optional[int] = None) -> dict:
    """Train one seed, resuming from the newest checkpoint in its directory."""
    cell = out / f"seed_{seed}"
    cell.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = build_data(cfg)
    tcfg = train_config(cfg)
    ckpt_path = latest_checkpoint(cell)
    if ckpt_path is not None:
        trainer = restore_trainer(load_checkpoint(ckpt_path), train_ds, test_ds)
        log.info("resuming seed %d from %s", seed, ckpt_path.name)
    else:
        input_shape, layers = build_layers(cfg)
        net = Network.build(input_shape, layers, seed=seed)
        spec = algorithm_spec(cfg, tcfg.steps_per_epoch(len(train_ds)))
        trainer = Trainer(net, train_ds, test_ds, spec, tcfg, seed)
        trainer.init_topology()
    trainer.checkpoint_dir = cell
    ck_epochs = set(cfg.checkpoint_epochs)
    if cfg.checkpoint_every:
        ck_epochs |= set(range(cfg.checkpoint_every, tcfg.epochs + 1, cfg.checkpoint_every))
    trainer.checkpoint_epochs = tuple(sorted(ck_epochs))
    rec = trainer.run(until_epoch=stop_after_epoch)
    if trainer.epoch < tcfg.epochs:
        return {"cell": cell.name, "status": "interrupted", "epoch": trainer.epoch}
    save_checkpoint(cell / "final.npz", trainer.checkpoint())
    write_cell_artifacts(cell, rec, cfg.flops.charge_regen_dense)
    return {"cell": cell.name, "status": "completed", "test_acc": rec.final_test_acc,
            "masks_digest": rec.masks_digest}


def _cell_job(args):
    cfg_dump, seed, out = args
    cfg = ExperimentConfig.model_validate(cfg_dump)
    try:
        return run_cell(cfg, seed, Path(out))
    except Exception as e:  # reported in the manifest
        log.exception("seed %d failed", seed)
        return {"cell": f"seed_{seed}", "status": "failed", "error": f"{type(e).__name__}: {e}"}


def run(cfg: ExperimentConfig, out: Optional[Path] = None) -> int:
    """Execute every seed cell; returns a process exit status."""
    out = Path(out) if out else output_root(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(dump_config(cfg))
    todo = []
    for seed in cfg.seeds:
        if (out / f"seed_{seed}" / "final.npz").exists():
            log.info("seed %d already complete", seed)
            continue
        todo.append((cfg.model_dump(mode="json"), seed, str(out)))
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_cell_job, todo))
    else:
        results = [_cell_job(t) for t in todo]
    for r in results:
        _append_manifest(out, r)
    report(out)
    return 0 if all(r["status"] == "completed" for r in results) else 1


# report ---------------------------------------------------------------------------

class NoRunsFound(FileNotFoundError):
    pass


def summarize(name: str, records: list, flops: list) -> dict:
    accs = np.array([r.final_test_acc for r in records])
    return {
        "name": name, "algorithm": records[0].algorithm, "n_seeds": len(records),
        "test_acc_mean": float(accs.mean()), "test_acc_std": float(accs.std()),
        "final_sparsity_mean": float(np.mean([r.final_sparsity for r in records])),
        "train_flops_mean": float(np.mean([f["normalized_train"] for f in flops])),
        "test_flops_mean": float(np.mean([f["normalized_forward"] for f in flops])),
    }


def report(run_dir) -> dict:
    """Rebuild summary.csv and per-layer tables from stored artifacts only."""
    run_dir = Path(run_dir)
    cells = sorted(run_dir.glob("seed_*/final.npz")) if run_dir.exists() else []
    if not cells:
        raise NoRunsFound(f"no runs found in {run_dir}")
    missing = [str(c.parent / "flops.json") for c in cells if not (c.parent / "flops.json").exists()]
    if missing:
        raise FileNotFoundError("missing artifacts: " + ", ".join(missing))
    records = [load_record(c) for c in cells]
    flops = [json.loads((c.parent / "flops.json").read_text()) for c in cells]
    name = run_dir.name
    row = summarize(name, records, flops)
    write_rows(run_dir / "summary.csv", [row], SUMMARY_COLUMNS)
    for c, rec in zip(cells, records):
        write_rows(c.parent / "layer_sparsity.csv", M.sparsity_table(rec.prunable_masks),
                   ["layer", "shape", "params", "nnz", "density", "sparsity"])
    return row


# validate --------------------------------------------------------------------------

def validate(cfg: ExperimentConfig) -> dict:
    """Dry-run schedule expansion: event grid, s_t and r(t) per event, estimated FLOPs."""
    warnings = []
    tcfg = train_config(cfg)
    if cfg.dataset.path and not Path(cfg.dataset.path).exists():
        n_train = NOMINAL_TRAIN_SIZE.get(cfg.dataset.kind)
        if n_train is None:
            raise ConfigError([("dataset.path", f"{cfg.dataset.path} does not exist")])
        warnings.append(("dataset.path", f"not found; assuming the standard {n_train} training samples"))
    else:
        n_train = len(build_data(cfg)[0])
    spe = tcfg.steps_per_epoch(n_train)
    sp = cfg.sparsity
    try:
        spec = algorithm_spec(cfg, spe)
    except ValueError as e:
        raise ConfigError([("sparsity.tf_epoch, sparsity.delta_t_steps", str(e))]) from None
    if spec.prune is not None:
        rem = window_remainder(sp.t0_epoch, sp.tf_epoch, sp.delta_t_steps, spe)
        if rem:
            warnings.append(("sparsity.tf_epoch",
                             f"off the Δt grid by {rem} steps; last prune event at step "
                             f"{spec.prune.tf} (epoch {spec.prune.tf / spe:.2f})"))
    input_shape, layers = build_layers(cfg)
    model = FlopsModel(input_shape, layers)
    dense_fwd = model.forward()

    def fwd(d):
        return model.forward({lid: d for lid in model.ids.values()})

    events = []
    if spec.prune is not None:
        for t in spec.prune.grid:
            s = sparsity_at(spec.prune, t)
            r = regen_ratio_at(spec.regen, t) if spec.kind == "granet" else 0.0
            events.append({"step": t, "epoch": t / spe, "sparsity": s, "regen_ratio": r,
                           "forward_flops": fwd(1 - s)})
    elif spec.kind in ("rigl", "set"):
        t = spec.dst_update_interval
        while t < spec.regen.t_end:
            events.append({"step": t, "epoch": t / spe, "sparsity": spec.init.sparsity,
                           "regen_ratio": regen_ratio_at(spec.regen, t),
                           "forward_flops": fwd(1 - spec.init.sparsity)})
            t += spec.dst_update_interval
    total = spe * tcfg.epochs
    # uniform-density estimate; actual per-layer allocation is decided during training
    density = 1 - (spec.init.sparsity if spec.kind != "dense" else 0.0)
    cost, last = 0.0, 0
    for ev in events:
        if spec.prune is not None:
            cost += (min(ev["step"] + 1, total) - last) * fwd(density)
            last = min(ev["step"] + 1, total)
            density = 1 - ev["sparsity"]
    cost += (total - last) * fwd(density)
    return {"steps_per_epoch": spe, "total_steps": total, "events": events, "warnings": warnings,
            "final_sparsity": 1 - density, "est_forward_flops_final": fwd(density),
            "est_normalized_train_flops": cost / (total * dense_fwd), "dense_forward_flops": dense_fwd}


# probe -------------------------------------------------------------------------------

def probe(cfg: ExperimentConfig, out: Optional[Path] = None) -> list:
    if cfg.probe is None:
        raise ValueError("config has no probe section")
    pc = cfg.probe
    out = Path(out) if out else output_root(cfg)
    out.mkdir(parents=True, exist_ok=True)
    data = build_data(cfg)
    tcfg = train_config(cfg)
    input_shape, layers = build_layers(cfg)
    rows = []
    for ps in pc.pretrain_sparsities:
        for seed in cfg.seeds:
            net = Network.build(input_shape, layers, seed=seed)
            base = train_base(net, data, ps, tcfg, seed, pc.snapshot_epochs, arch_name(cfg))
            rows += probe_sweep([base], pc.snapshot_epochs, pc.prune_rates, pc.regen, pc.k_epochs,
                                pc.scope, pc.structured, pc.final_gap)
    write_rows(out / "probes.csv", rows, CSV_COLUMNS)
    return rows

