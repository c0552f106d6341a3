"""Versioned checkpoint container: one .npz holding arrays plus a JSON header.

Masks are stored as packed bitsets. Random streams are derived statelessly
from (root seed, stream name, counter), so the epoch/step counters are the
complete RNG state.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .masks import pack_mask, unpack_mask
from .optim import SgdState, StepLR

FORMAT = "sparselab-checkpoint"
VERSION = 1
META_KEY = "__meta__"


def _state_arrays(prefix: str, state: dict, arrays: dict) -> dict:
    shapes = {}
    for lid, s in state.items():
        arrays[f"{prefix}/{lid}/weight"] = s["weight"]
        arrays[f"{prefix}/{lid}/maskbits"] = pack_mask(s["mask"])
        arrays[f"{prefix}/{lid}/bias"] = s["bias"]
        shapes[lid] = list(s["weight"].shape)
    return shapes


def read_state(prefix: str, shapes: dict, arrays) -> dict:
    return {lid: {"weight": arrays[f"{prefix}/{lid}/weight"],
                  "mask": unpack_mask(arrays[f"{prefix}/{lid}/maskbits"], tuple(shp)),
                  "bias": arrays[f"{prefix}/{lid}/bias"]}
            for lid, shp in shapes.items()}


def trainer_state(trainer) -> dict:
    net, opt, rec = trainer.net, trainer.opt, trainer.record
    arrays: dict = {}
    shapes = _state_arrays("net", net.state(), arrays)
    for p in net.masked_params:
        lid = p.layer_id
        if lid in opt.velocity:
            arrays[f"opt/{lid}/velocity"] = opt.velocity[lid]
            arrays[f"opt/{lid}/bias_velocity"] = opt.bias_velocity[lid]
        if p.retained is not None:
            arrays[f"net/{lid}/retained"] = p.retained
    init_shapes = _state_arrays("init", rec.init_state, arrays) if rec.init_state else None
    meta = {
        "format": FORMAT, "version": VERSION,
        "epoch": trainer.epoch, "step": trainer.step, "seed": trainer.seed,
        "rng": {"root_seed": trainer.seed, "counters": {"shuffle": trainer.epoch, "regen": trainer.step}},
        "shapes": shapes, "init_shapes": init_shapes,
        "prunable": {p.layer_id: p.prunable for p in net.masked_params},
        "densities": net.layer_densities(),
        "optimizer": {"lr": opt.lr, "momentum": opt.momentum, "weight_decay": opt.weight_decay},
        "lr_schedule": {"base": trainer.lr_schedule.base, "drop_factor": trainer.lr_schedule.drop_factor,
                        "drop_epochs": list(trainer.lr_schedule.drop_epochs)},
        "record": rec.meta(),
    }
    return {"meta": meta, "arrays": {k: np.array(v, copy=True) for k, v in arrays.items()}}


def save_checkpoint(path, ckpt: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.frombuffer(json.dumps(ckpt["meta"]).encode("utf-8"), dtype=np.uint8)
    # hidden temp name so resume globs never pick up a half-written file
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **{META_KEY: header}, **ckpt["arrays"])
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z[META_KEY]).decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return {"meta": meta, "arrays": arrays}


def restore_trainer(ckpt: dict, train, test, seed=None, spec=None, cfg=None, lr_schedule=None,
                    fresh_record=False):
    """Rebuild a Trainer from a checkpoint; overrides support probes and retraining."""
    from .algorithms import RunRecord, Trainer, arch_from_dict
    from .nn import Network

    meta, arrays = ckpt["meta"], ckpt["arrays"]
    rec = RunRecord.from_meta(meta["record"])
    input_shape, layers = arch_from_dict(rec.arch)
    net = Network.build(input_shape, layers, seed=0)
    net.load_state(read_state("net", meta["shapes"], arrays))
    for p in net.masked_params:
        p.prunable = meta["prunable"][p.layer_id]
        key = f"net/{p.layer_id}/retained"
        if key in arrays:
            p.retained = arrays[key].copy()
    o = meta["optimizer"]
    opt = SgdState(o["lr"], o["momentum"], o["weight_decay"])
    for p in net.masked_params:
        key = f"opt/{p.layer_id}/velocity"
        if key in arrays:
            opt.velocity[p.layer_id] = arrays[key].copy()
            opt.bias_velocity[p.layer_id] = arrays[f"opt/{p.layer_id}/bias_velocity"].copy()
    if lr_schedule is None:
        ls = meta["lr_schedule"]
        lr_schedule = StepLR(ls["base"], ls["drop_factor"], tuple(ls["drop_epochs"]))
    trainer = Trainer(net, train, test, spec or rec.spec, cfg or rec.cfg,
                      meta["seed"] if seed is None else seed, lr_schedule=lr_schedule, opt=opt)
    trainer.epoch, trainer.step = meta["epoch"], meta["step"]
    if fresh_record:
        trainer._mark_start()
    else:
        init = read_state("init", meta["init_shapes"], arrays) if meta["init_shapes"] else None
        rec.init_state = {k: {kk: vv.copy() for kk, vv in v.items()} for k, v in init.items()} if init else None
        trainer.record = rec
    return trainer
