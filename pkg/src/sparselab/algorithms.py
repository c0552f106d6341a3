"""Training loop and the sparse-training policies that hook into it.

``granet`` = gradual magnitude pruning + drop/regrow after every prune event
``gmp``    = gradual magnitude pruning only
``rigl``   = fixed sparsity, periodic drop + gradient regrow
``set``    = fixed sparsity, periodic drop + random regrow
``static`` = fixed mask
``dense``  = no masking
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import masks as M
from .nn import LayerSpec, Network, NonFiniteLossError, accuracy, backward
from .optim import SgdState, StepLR, constant_lr, sgd_step
from .rng import stream
from .schedules import PruneSchedule, RegenSchedule, is_prune_step, regen_ratio_at, sparsity_at

log = logging.getLogger(__name__)

KINDS = ("granet", "gmp", "rigl", "set", "static", "dense")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, batch_index: int, checkpoint_path=None):
        msg = f"loss diverged at step {step} (batch index {batch_index})"
        if checkpoint_path:
            msg += f"; state saved to {checkpoint_path}"
        super().__init__(msg)
        self.step = step
        self.batch_index = batch_index
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_factor: float = 10.0
    lr_drop_epochs: tuple = (80, 120)

    def lr_schedule(self) -> StepLR:
        return StepLR(self.lr, self.lr_drop_factor, tuple(self.lr_drop_epochs))

    def steps_per_epoch(self, n_train: int) -> int:
        return math.ceil(n_train / self.batch_size)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lr_drop_epochs"] = tuple(d.get("lr_drop_epochs", ()))
        return cls(**d)


@dataclass
class AlgorithmSpec:
    kind: str = "granet"
    init: M.SparsityPlan = field(default_factory=M.SparsityPlan)
    prune: Optional[PruneSchedule] = None
    regen: Optional[RegenSchedule] = None
    scope: str = "global"  # global | uniform
    structured: bool = False
    dst_update_interval: int = 100
    gmp_keep_values: bool = False
    protect_first_last: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown algorithm {self.kind!r}; choose from {KINDS}")
        if self.scope not in ("global", "uniform"):
            raise ValueError(f"scope must be global or uniform, got {self.scope!r}")
        if self.kind == "dense" and (self.prune or self.regen or self.init.mode != "dense"):
            raise ValueError("dense runs take no schedules and a dense init")
        if self.kind in ("granet", "gmp") and self.prune is None:
            raise ValueError(f"{self.kind} needs a prune schedule")
        if self.kind in ("granet", "rigl", "set") and self.regen is None:
            raise ValueError(f"{self.kind} needs a regeneration schedule")
        if self.kind == "static" and (self.prune or self.regen):
            raise ValueError("static runs take an init plan only")
        if self.gmp_keep_values and self.kind != "gmp":
            raise ValueError("gmp_keep_values only applies to gmp")
        if self.dst_update_interval < 1:
            raise ValueError("dst_update_interval must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init"] = {"mode": self.init.mode, "sparsity": self.init.sparsity}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgorithmSpec":
        d = dict(d)
        d["init"] = M.SparsityPlan(d["init"]["mode"], d["init"]["sparsity"])
        d["prune"] = PruneSchedule(**d["prune"]) if d.get("prune") else None
        d["regen"] = RegenSchedule(**d["regen"]) if d.get("regen") else None
        return cls(**d)


def static_spec(protect_first_last=False) -> AlgorithmSpec:
    return AlgorithmSpec(kind="static", protect_first_last=protect_first_last)


def arch_to_dict(net: Network) -> dict:
    return {"input_shape": list(net.input_shape),
            "layers": [{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(s).items()}
                       for s in net.layers]}


def arch_from_dict(d: dict) -> tuple:
    layers = [LayerSpec(**{k: (tuple(v) if k == "kernel" else v) for k, v in l.items()}) for l in d["layers"]]
    return tuple(d["input_shape"]), layers


def masks_digest(state: dict) -> str:
    h = hashlib.sha256()
    for lid in sorted(state):
        h.update(lid.encode())
        h.update(np.packbits(state[lid]["mask"].reshape(-1)).tobytes())
    return h.hexdigest()


@dataclass
class RunRecord:
    algorithm: str
    seed: int
    spec: AlgorithmSpec
    cfg: TrainConfig
    arch: dict
    steps_per_epoch: int
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # per-epoch metric dicts
    events: list = field(default_factory=list)  # PruneEvent
    initial_densities: dict = field(default_factory=dict)
    layer_sizes: dict = field(default_factory=dict)
    init_state: Optional[dict] = None
    final_state: Optional[dict] = None

    @property
    def final_test_acc(self) -> float:
        return self.epochs[-1]["test_acc"] if self.epochs else float("nan")

    @property
    def final_masks(self) -> dict:
        return {lid: s["mask"] for lid, s in self.final_state.items()}

    @property
    def prunable_masks(self) -> dict:
        return {lid: self.final_state[lid]["mask"] for lid in self.layer_sizes}

    @property
    def masks_digest(self) -> str:
        return masks_digest(self.final_state)

    @property
    def final_sparsity(self) -> float:
        nnz = sum(int(m.sum()) for m in self.prunable_masks.values())
        return 1.0 - nnz / sum(self.layer_sizes.values())

    def meta(self) -> dict:
        """JSON-serializable part (everything except the weight arrays)."""
        return {
            "algorithm": self.algorithm, "seed": self.seed, "spec": self.spec.to_dict(),
            "cfg": asdict(self.cfg), "arch": self.arch, "steps_per_epoch": self.steps_per_epoch,
            "losses": self.losses, "lrs": self.lrs, "epochs": self.epochs,
            "events": [e.to_dict() for e in self.events],
            "initial_densities": self.initial_densities, "layer_sizes": self.layer_sizes,
        }

    @classmethod
    def from_meta(cls, meta: dict, init_state=None, final_state=None) -> "RunRecord":
        return cls(
            algorithm=meta["algorithm"], seed=meta["seed"], spec=AlgorithmSpec.from_dict(meta["spec"]),
            cfg=TrainConfig.from_dict(meta["cfg"]), arch=meta["arch"],
            steps_per_epoch=meta["steps_per_epoch"], losses=list(meta["losses"]),
            lrs=list(meta["lrs"]), epochs=list(meta["epochs"]),
            events=[M.PruneEvent.from_dict(e) for e in meta["events"]],
            initial_densities=dict(meta["initial_densities"]), layer_sizes=dict(meta["layer_sizes"]),
            init_state=init_state, final_state=final_state)


class Trainer:
    """Owns one network, optimizer state and record; steps through epochs."""

    def __init__(self, net: Network, train, test, spec: AlgorithmSpec, cfg: TrainConfig, seed: int,
                 lr_schedule: Optional[StepLR] = None, opt: Optional[SgdState] = None):
        self.net, self.train_ds, self.test_ds = net, train, test
        self.spec, self.cfg, self.seed = spec, cfg, seed
        self.lr_schedule = lr_schedule or cfg.lr_schedule()
        self.opt = opt or SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.epoch = 0
        self.step = 0
        self.spe = cfg.steps_per_epoch(len(train))
        self.record = RunRecord(spec.kind, seed, spec, cfg, arch_to_dict(net), self.spe)
        self.snapshots: dict = {}
        self.checkpoint_dir = None
        self.checkpoint_epochs: tuple = ()

    # setup ------------------------------------------------------------------
    def init_topology(self):
        """Mark protected layers and draw the initial sparse masks."""
        ps = self.net.masked_params
        if self.spec.protect_first_last and ps:
            ps[0].prunable = False
            ps[-1].prunable = False
        if self.spec.kind != "dense":
            M.init_sparsity(self.net, self.spec.init, stream(self.seed, "mask"))
        self._mark_start()

    def _mark_start(self):
        self.record.layer_sizes = {p.layer_id: p.numel for p in self.net.prunable_params}
        self.record.initial_densities = self.net.layer_densities()
        self.record.init_state = self.net.state()

    # loop -------------------------------------------------------------------
    def run(self, until_epoch: Optional[int] = None, snapshot_epochs=()) -> RunRecord:
        end = self.cfg.epochs if until_epoch is None else min(until_epoch, self.cfg.epochs)
        snapshot_epochs = set(snapshot_epochs)
        if self.epoch in snapshot_epochs and self.epoch not in self.snapshots:
            self.snapshots[self.epoch] = self.checkpoint()
        while self.epoch < end:
            self.train_epoch()
            if self.epoch in snapshot_epochs:
                self.snapshots[self.epoch] = self.checkpoint()
            if self.checkpoint_dir and self.epoch in self.checkpoint_epochs:
                self.save(self.checkpoint_dir / f"ckpt_epoch_{self.epoch:04d}.npz")
        self.record.final_state = self.net.state()
        return self.record

    def train_epoch(self):
        x, y = self.train_ds.inputs, self.train_ds.labels
        lr = self.lr_schedule(self.epoch)
        self.opt.lr = lr
        order = stream(self.seed, "shuffle", self.epoch).permutation(len(y))
        bs = self.cfg.batch_size
        ep_losses = []
        for b in range(self.spe):
            idx = order[b * bs:(b + 1) * bs]
            try:
                loss = backward(self.net, x[idx], y[idx])
            except NonFiniteLossError as e:
                path = None
                if self.checkpoint_dir:
                    path = self.checkpoint_dir / "diverged.npz"
                    self.save(path)
                raise DivergenceError(self.step, e.batch_index, path) from e
            self.record.losses.append(loss)
            self.record.lrs.append(lr)
            ep_losses.append(loss)
            sgd_step(self.net, self.opt)
            self.on_step(self.step)
            self.step += 1
        self.epoch += 1
        self.record.epochs.append({
            "epoch": self.epoch, "lr": lr, "train_loss": float(np.mean(ep_losses)),
            "train_acc": accuracy(self.net, x, y),
            "test_acc": accuracy(self.net, self.test_ds.inputs, self.test_ds.labels),
            "density": self.net.global_density(),
        })

    # topology policies ------------------------------------------------------
    def on_step(self, t: int):
        kind = self.spec.kind
        if kind in ("granet", "gmp") and is_prune_step(self.spec.prune, t):
            ev = self._new_event(t)
            self.schedule_prune(t, ev)
            ratio = regen_ratio_at(self.spec.regen, t) if kind == "granet" else 0.0
            self.drop_and_regrow(ratio, ev, "gradient" if kind == "granet" else None)
            self._close_event(ev)
        elif kind in ("rigl", "set") and t > 0 and t % self.spec.dst_update_interval == 0 \
                and t < self.spec.regen.t_end:
            ev = self._new_event(t)
            ev.target_sparsity = 1.0 - self.net.global_density()
            self.drop_and_regrow(regen_ratio_at(self.spec.regen, t), ev,
                                 "gradient" if kind == "rigl" else "random")
            self._close_event(ev)

    def _new_event(self, t):
        ps = self.net.prunable_params
        zero = {p.layer_id: 0 for p in ps}
        return M.PruneEvent(step=t, scope=self.spec.scope, pruned=dict(zero), removed=dict(zero),
                            regenerated=dict(zero), clamped=dict(zero))

    def _close_event(self, ev):
        ev.achieved_sparsity = 1.0 - self.net.global_density()
        ev.densities = {p.layer_id: p.density for p in self.net.prunable_params}
        ev.nnz = {p.layer_id: p.nnz for p in self.net.prunable_params}
        self.record.events.append(ev)

    def _forget(self, p, flat_idx):
        self.opt.reset_velocity(p.layer_id, np.unravel_index(flat_idx, p.weight.shape))

    def schedule_prune(self, t: int, ev: M.PruneEvent):
        s_t = sparsity_at(self.spec.prune, t)
        ev.target_sparsity = s_t
        ps = self.net.prunable_params
        keep_values = self.spec.gmp_keep_values
        if self.spec.structured:
            for p in ps:
                if p.weight.ndim == 4:
                    act = M.active_filters(p).size
                    keep = min(act, M.round_half_up((1.0 - s_t) * p.weight.shape[0]))
                    rm = _filter_positions(p, M.filter_keep_count(p, keep))
                else:
                    keep = min(p.nnz, M.round_half_up((1.0 - s_t) * p.numel))
                    rm = M.keep_top_count(p, keep)
                ev.pruned[p.layer_id] = int(rm.size)
                self._forget(p, rm)
            return
        if self.spec.scope == "global":
            total = sum(p.numel for p in ps)
            nnz = sum(p.nnz for p in ps)
            keep = M.floor_count((1.0 - s_t) * total)
            if keep > nnz and not keep_values:
                # initial-plan rounding left fewer weights than the target; nothing to prune
                keep = nnz
            removed = M.prune_global_to_count(ps, keep, keep_values)
        else:
            removed = []
            for p in ps:
                keep = M.round_half_up((1.0 - s_t) * p.numel)
                if not keep_values:
                    keep = min(keep, p.nnz)
                removed.append(M.keep_top_count(p, keep, keep_values))
        for p, rm in zip(ps, removed):
            ev.pruned[p.layer_id] = int(rm.size)
            self._forget(p, rm)

    def drop_and_regrow(self, ratio: float, ev: M.PruneEvent, regrow: Optional[str]):
        """Per layer: drop the ``ratio`` smallest-|w| active weights, regrow as many."""
        ev.regen_ratio = ratio
        if regrow is None or ratio <= 0.0:
            return
        rng = stream(self.seed, "regen", ev.step) if regrow == "random" else None
        for p in self.net.prunable_params:
            if self.spec.structured and p.weight.ndim == 4:
                act = M.active_filters(p).size
                dropped = M.filter_keep_count(p, M.round_half_up((1.0 - ratio) * act))
                grown = M.filter_regenerate_structured(p, dropped.size)
                n_drop = _filter_positions(p, dropped).size
                n_grow = _filter_positions(p, grown).size
                changed = _filter_positions(p, np.union1d(dropped, grown))
                want, got = dropped.size, grown.size
            else:
                dropped = M.topk_keep_magnitude(p, 1.0 - ratio)
                if regrow == "gradient":
                    grown = M.regenerate_by_gradient(p, dropped.size)
                else:
                    grown = M.regenerate_random(p, dropped.size, rng)
                n_drop, n_grow = dropped.size, grown.size
                changed = np.union1d(dropped, grown)
                want, got = dropped.size, grown.size
            ev.removed[p.layer_id] = int(n_drop)
            ev.regenerated[p.layer_id] = int(n_grow)
            ev.clamped[p.layer_id] = int(want - got)
            if got and regrow == "gradient":
                ev.dense_grad = True
            self._forget(p, changed)

    # persistence ------------------------------------------------------------
    def checkpoint(self) -> dict:
        from .checkpoint import trainer_state
        return trainer_state(self)

    def save(self, path):
        from .checkpoint import save_checkpoint
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt: dict, train, test, **overrides) -> "Trainer":
        from .checkpoint import restore_trainer
        return restore_trainer(ckpt, train, test, **overrides)


def _filter_positions(p, filters) -> np.ndarray:
    """Flat weight positions covered by the given output filters."""
    per = p.numel // p.weight.shape[0]
    return np.flatnonzero(np.isin(np.arange(p.weight.shape[0]), filters).repeat(per))


def _check_kind(spec, allowed):
    if spec.kind not in allowed:
        raise ValueError(f"expected a {'/'.join(allowed)} spec, got {spec.kind!r}")


def train(net: Network, data, spec: AlgorithmSpec, seed: int, cfg: Optional[TrainConfig] = None,
          **run_kw) -> RunRecord:
    """Run any algorithm from a freshly built network. ``data`` is (train, test)."""
    train_ds, test_ds = data
    trainer = Trainer(net, train_ds, test_ds, spec, cfg or TrainConfig(), seed)
    trainer.init_topology()
    return trainer.run(**run_kw)


def train_granet(net, data, spec, seed, cfg=None, **kw) -> RunRecord:
    _check_kind(spec, ("granet",))
    return train(net, data, spec, seed, cfg, **kw)


def train_gmp(net, data, spec, seed, cfg=None, **kw) -> RunRecord:
    _check_kind(spec, ("gmp",))
    return train(net, data, spec, seed, cfg, **kw)


def train_dst(net, data, spec, seed, cfg=None, **kw) -> RunRecord:
    _check_kind(spec, ("rigl", "set"))
    return train(net, data, spec, seed, cfg, **kw)


def _retrain(record: RunRecord, data, state: dict, seed: int, weights_from: Optional[dict]) -> RunRecord:
    input_shape, layers = arch_from_dict(record.arch)
    net = Network.build(input_shape, layers, seed=seed)
    protect = record.spec.protect_first_last
    for p_id, p in enumerate(net.masked_params):
        src = state[p.layer_id]
        p.mask[...] = src["mask"]
        if weights_from is not None:
            p.weight[...] = weights_from[p.layer_id]["weight"]
            net.biases[net_index(net, p.layer_id)][...] = weights_from[p.layer_id]["bias"]
        p.apply_mask()
        if protect and p_id in (0, len(net.masked_params) - 1):
            p.prunable = False
    train_ds, test_ds = data
    trainer = Trainer(net, train_ds, test_ds, static_spec(protect), record.cfg, seed)
    trainer._mark_start()
    return trainer.run()


def net_index(net: Network, layer_id: str) -> int:
    for i, p in net.params.items():
        if p.layer_id == layer_id:
            return i
    raise KeyError(layer_id)


def reinit_ablation(record: RunRecord, data, seed2: int) -> RunRecord:
    """Fresh random weights on the record's final mask, retrained with the full schedule."""
    return _retrain(record, data, record.final_state, seed2, None)


def rewind_retrain(record: RunRecord, mode: str, data) -> RunRecord:
    """``lth_weights``: step-0 weights on the final mask; ``lr_rewind``: final weights.

    Either way the mask is frozen and the learning-rate schedule is replayed
    from epoch 0 with fresh momentum.
    """
    if mode == "lth_weights":
        if not record.init_state:
            raise ValueError("record has no step-0 weight snapshot to rewind to")
        src = record.init_state
    elif mode == "lr_rewind":
        src = record.final_state
    else:
        raise ValueError(f"unknown rewind mode {mode!r}")
    return _retrain(record, data, record.final_state, record.seed, src)


def frozen_lr_trainer(net, data, seed, cfg: TrainConfig, lr: float, opt=None) -> Trainer:
    train_ds, test_ds = data
    return Trainer(net, train_ds, test_ds, static_spec(), cfg, seed, lr_schedule=constant_lr(lr), opt=opt)

