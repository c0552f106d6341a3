"""Pruning-plasticity probes on a stored checkpoint series.

A probe one-shot prunes a snapshot, optionally regrows the same number of
connections from gradients, then continues training either for k epochs at
the snapshot's learning rate (plasticity) or to the end of the original
schedule (final-performance gap). The base run is only read.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import masks as M
from .algorithms import AlgorithmSpec, RunRecord, TrainConfig, Trainer, static_spec
from .checkpoint import restore_trainer
from .nn import Network, accuracy, backward
from .optim import constant_lr
from .rng import stream

log = logging.getLogger(__name__)


def default_k(total_epochs: int) -> int:
    """30 of 160 epochs, scaled to the run length and rounded up."""
    return max(1, math.ceil(30 * total_epochs / 160))


@dataclass(frozen=True)
class PlasticityProbe:
    snapshot_epoch: int
    prune_rate: float
    k: int = 1
    regen: bool = False
    scope: str = "global"
    structured: bool = False

    def __post_init__(self):
        if not 0.0 <= self.prune_rate < 1.0:
            raise ValueError("prune_rate must lie in [0, 1)")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.scope not in ("global", "uniform"):
            raise ValueError("scope must be global or uniform")

    @property
    def probe_id(self) -> str:
        return (f"e{self.snapshot_epoch}/p{self.prune_rate!r}/r{int(self.regen)}/"
                f"{self.scope}/s{int(self.structured)}")


@dataclass
class ProbeResult:
    probe: PlasticityProbe
    frozen_lr: float
    t_pre: float
    t_post: float
    plasticity: float
    pruned: int = 0
    regenerated: int = 0
    lr_trace: list = field(default_factory=list)
    t_final_unpruned: float = float("nan")
    t_final_pruned: float = float("nan")
    gap: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("lr_trace")
        return d


@dataclass
class BaseRun:
    """A finished run together with its in-memory checkpoint series."""

    record: RunRecord
    snapshots: dict  # epoch -> checkpoint dict
    data: tuple
    arch: str = "net"
    pretrain_sparsity: float = 0.0

    def checkpoint_at(self, epoch: int) -> dict:
        if epoch not in self.snapshots:
            raise KeyError(f"no checkpoint at epoch {epoch}; available: {sorted(self.snapshots)}")
        return self.snapshots[epoch]


def train_base(net: Network, data, pretrain_sparsity: float, cfg: TrainConfig, seed: int,
               snapshot_epochs, arch: str = "net") -> BaseRun:
    """Train with a fixed uniform mask at ``pretrain_sparsity`` and keep snapshots."""
    if pretrain_sparsity > 0:
        spec = AlgorithmSpec("static", init=M.SparsityPlan("uniform", pretrain_sparsity))
    else:
        spec = AlgorithmSpec("dense")
    train_ds, test_ds = data
    trainer = Trainer(net, train_ds, test_ds, spec, cfg, seed)
    trainer.init_topology()
    rec = trainer.run(snapshot_epochs=snapshot_epochs)
    return BaseRun(rec, trainer.snapshots, data, arch, pretrain_sparsity)


def probe_seed(base_seed: int, probe_id: str) -> int:
    return int(stream(base_seed, "probe/" + probe_id).integers(0, 2**31 - 1))


def _one_shot(trainer: Trainer, probe: PlasticityProbe) -> tuple:
    """Prune ``prune_rate`` of the active weights and optionally regrow as many."""
    net, opt = trainer.net, trainer.opt
    ps = net.prunable_params
    removed = {}
    if probe.structured:
        for p in ps:
            if p.weight.ndim == 4:
                dropped = M.filter_prune_structured(p, probe.prune_rate)
                per = p.numel // p.weight.shape[0]
                removed[p.layer_id] = (dropped, np.flatnonzero(
                    np.isin(np.arange(p.weight.shape[0]), dropped).repeat(per)))
    elif probe.scope == "global":
        nnz = sum(p.nnz for p in ps)
        keep = nnz - M.round_half_up(probe.prune_rate * nnz)
        for p, rm in zip(ps, M.prune_global_to_count(ps, keep)):
            removed[p.layer_id] = (rm, rm)
    else:
        for p in ps:
            rm = M.topk_keep_magnitude(p, 1.0 - probe.prune_rate)
            removed[p.layer_id] = (rm, rm)
    for p in ps:
        if p.layer_id in removed:
            opt.reset_velocity(p.layer_id, np.unravel_index(removed[p.layer_id][1], p.weight.shape))
    n_pruned = sum(v[1].size for v in removed.values())
    n_regen = 0
    if probe.regen and n_pruned:
        rng = stream(trainer.seed, "probe-batch")
        train_ds = trainer.train_ds
        idx = np.sort(rng.choice(len(train_ds), size=min(trainer.cfg.batch_size, len(train_ds)),
                                 replace=False))
        backward(net, train_ds.inputs[idx], train_ds.labels[idx])
        for p in ps:
            if p.layer_id not in removed:
                continue
            units, _ = removed[p.layer_id]
            if probe.structured:
                grown = M.filter_regenerate_structured(p, units.size)
                per = p.numel // p.weight.shape[0]
                n_regen += grown.size * per
            else:
                grown = M.regenerate_by_gradient(p, units.size)
                n_regen += grown.size
        net.zero_grads()
    return n_pruned, n_regen


def _prepare(base: BaseRun, probe: PlasticityProbe, lr_schedule, cfg):
    ckpt = base.checkpoint_at(probe.snapshot_epoch)
    seed = probe_seed(base.record.seed, probe.probe_id)
    train_ds, test_ds = base.data
    trainer = restore_trainer(ckpt, train_ds, test_ds, seed=seed, spec=static_spec(),
                              cfg=cfg, lr_schedule=lr_schedule, fresh_record=True)
    t_pre = accuracy(trainer.net, test_ds.inputs, test_ds.labels)
    n_pruned, n_regen = _one_shot(trainer, probe)
    return trainer, t_pre, n_pruned, n_regen


def run_probe(base: BaseRun, probe: PlasticityProbe) -> ProbeResult:
    """Plasticity = test accuracy after k frozen-LR epochs minus accuracy before pruning."""
    frozen = base.record.cfg.lr_schedule()(probe.snapshot_epoch)
    cfg = TrainConfig(**{**asdict(base.record.cfg), "epochs": probe.snapshot_epoch + probe.k})
    trainer, t_pre, n_pruned, n_regen = _prepare(base, probe, constant_lr(frozen), cfg)
    rec = trainer.run()
    test = base.data[1]
    t_post = rec.final_test_acc if rec.epochs else accuracy(trainer.net, test.inputs, test.labels)
    return ProbeResult(probe, frozen, t_pre, t_post, t_post - t_pre, n_pruned, n_regen, list(rec.lrs))


def run_final_gap(base: BaseRun, probe: PlasticityProbe) -> ProbeResult:
    """Continue on the original schedule to the last epoch; gap vs the unpruned final accuracy."""
    cfg = base.record.cfg
    frozen = cfg.lr_schedule()(probe.snapshot_epoch)
    trainer, t_pre, n_pruned, n_regen = _prepare(base, probe, cfg.lr_schedule(), cfg)
    rec = trainer.run()
    test = base.data[1]
    t_post = rec.final_test_acc if rec.epochs else accuracy(trainer.net, test.inputs, test.labels)
    t_final = base.record.final_test_acc
    return ProbeResult(probe, frozen, t_pre, t_post, t_post - t_pre, n_pruned, n_regen, list(rec.lrs),
                       t_final_unpruned=t_final, t_final_pruned=t_post, gap=t_post - t_final)


CSV_COLUMNS = ["arch", "pretrain_sparsity", "snapshot_epoch", "prune_rate", "regen", "seed",
               "t_pre", "t_post", "plasticity", "gap", "error"]


def probe_sweep(bases: list, snapshot_epochs, prune_rates, regen_flags=(False, True), k: Optional[int] = None,
                scope: str = "global", structured: bool = False, final_gap: bool = False) -> list:
    """Long-format rows over snapshot epochs x prune rates x regen flags x base runs.

    Each base run stands for one (pretrain sparsity, seed) pair. A failing
    cell yields a row with its error message; the sweep continues.
    """
    rows = []
    for base in bases:
        k_eff = default_k(base.record.cfg.epochs) if k is None else k
        for epoch in snapshot_epochs:
            for rate in prune_rates:
                for regen in regen_flags:
                    row = {"arch": base.arch, "pretrain_sparsity": base.pretrain_sparsity,
                           "snapshot_epoch": epoch, "prune_rate": rate, "regen": bool(regen),
                           "seed": base.record.seed, "t_pre": None, "t_post": None,
                           "plasticity": None, "gap": None, "error": ""}
                    try:
                        probe = PlasticityProbe(epoch, rate, k_eff, regen, scope, structured)
                        res = run_probe(base, probe)
                        row.update(t_pre=res.t_pre, t_post=res.t_post, plasticity=res.plasticity)
                        if final_gap:
                            row["gap"] = run_final_gap(base, probe).gap
                    except Exception as e:  # recorded per cell
                        log.warning("probe cell failed: %s", e)
                        row["error"] = f"{type(e).__name__}: {e}"
                    rows.append(row)
    return rows

