"""Experiment configuration: YAML file -> validated, defaults-filled models.

Defaults follow the CIFAR dense-to-sparse hyperparameters (160 epochs,
LR 0.1 dropped 10x at 80/120, ΔT = 1000 steps, prune until epoch 110,
regrowth ratio 0.5 with cosine decay). Unknown keys are rejected.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator


class ConfigError(ValueError):
    """Carries a list of (field path, message) problems."""

    def __init__(self, problems: list):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    kind: Literal["two_moons", "blobs", "spirals", "mnist", "cifar10", "csv"] = "two_moons"
    n: int = 1000
    noise: float = 0.1
    classes: Optional[int] = None
    test_fraction: float = 0.2
    split_seed: int = 0
    path: Optional[str] = None
    normalize: bool = True
    flatten: bool = True


class LayerConfig(_Strict):
    kind: Literal["affine", "conv2d", "relu", "flatten", "avgpool2d"]
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


class NetworkConfig(_Strict):
    arch: Literal["mlp", "layers"] = "mlp"
    name: Optional[str] = None
    sizes: List[int] = [2, 20, 20, 2]
    input_shape: Optional[List[int]] = None
    layers: List[LayerConfig] = []


class AlgorithmConfig(_Strict):
    kind: Literal["granet", "gmp", "rigl", "set", "static", "dense"] = "granet"
    scope: Literal["global", "uniform"] = "global"
    structured: bool = False
    dst_update_interval: int = 100
    gmp_keep_values: bool = False
    protect_first_last: bool = False


class SparsityConfig(_Strict):
    init: Optional[Literal["dense", "uniform", "erk"]] = None
    s_i: float = 0.0
    s_f: float = 0.9
    t0_epoch: float = 0
    tf_epoch: float = 110
    delta_t_steps: int = 1000
    r0: float = 0.5
    r_schedule: Literal["cosine", "constant"] = "cosine"


class OptimConfig(_Strict):
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 160
    lr_drop_factor: float = 10.0
    lr_drop_epochs: List[int] = [80, 120]


class ProbeConfig(_Strict):
    pretrain_sparsities: List[float] = [0.0, 0.5, 0.9, 0.98]
    snapshot_epochs: List[int] = [40, 100]
    prune_rates: List[float] = [0.2, 0.5, 0.9, 0.98]
    regen: List[bool] = [False, True]
    k_epochs: Optional[int] = None
    scope: Literal["global", "uniform"] = "global"
    structured: bool = False
    final_gap: bool = False


class FlopsConfig(_Strict):
    charge_regen_dense: bool = True


class ExperimentConfig(_Strict):
    name: str = "experiment"
    output_dir: str = "runs"
    seeds: List[int] = [0, 1, 2]
    workers: int = 1
    dataset: DatasetConfig = DatasetConfig()
    network: NetworkConfig = NetworkConfig()
    algorithm: AlgorithmConfig = AlgorithmConfig()
    sparsity: SparsityConfig = SparsityConfig()
    optim: OptimConfig = OptimConfig()
    checkpoint_epochs: List[int] = []
    checkpoint_every: int = 0
    flops: FlopsConfig = FlopsConfig()
    probe: Optional[ProbeConfig] = None

    @model_validator(mode="after")
    def _cross_checks(self):
        problems = cross_field_problems(self)
        if problems:
            raise ValueError("; ".join(f"{p}: {m}" for p, m in problems))
        return self

    def init_mode(self) -> str:
        if self.sparsity.init:
            return self.sparsity.init
        if self.algorithm.kind in ("granet", "gmp"):
            return "dense" if self.sparsity.s_i == 0 else "erk"
        return "dense" if self.algorithm.kind == "dense" else "erk"


def cross_field_problems(cfg: ExperimentConfig) -> list:
    out = []
    sp, opt = cfg.sparsity, cfg.optim
    if sp.s_i > sp.s_f:
        out.append(("sparsity.s_i, sparsity.s_f", f"s_i={sp.s_i} must not exceed s_f={sp.s_f}"))
    if not 0 <= sp.s_i < 1:
        out.append(("sparsity.s_i", "must lie in [0, 1)"))
    if not 0 <= sp.s_f < 1:
        out.append(("sparsity.s_f", "must lie in [0, 1)"))
    if not 0 <= sp.r0 <= 1:
        out.append(("sparsity.r0", "must lie in [0, 1]"))
    if sp.delta_t_steps < 1:
        out.append(("sparsity.delta_t_steps", "must be >= 1"))
    if sp.tf_epoch <= sp.t0_epoch and cfg.algorithm.kind in ("granet", "gmp"):
        out.append(("sparsity.t0_epoch, sparsity.tf_epoch", "tf_epoch must exceed t0_epoch"))
    if sp.tf_epoch > opt.epochs and cfg.algorithm.kind not in ("static", "dense"):
        out.append(("sparsity.tf_epoch", f"beyond the last epoch ({opt.epochs})"))
    if opt.epochs < 1 or opt.batch_size < 1:
        out.append(("optim", "epochs and batch_size must be >= 1"))
    if any(b <= a for a, b in zip(opt.lr_drop_epochs, opt.lr_drop_epochs[1:])):
        out.append(("optim.lr_drop_epochs", "must be strictly increasing"))
    if not 0 <= opt.momentum < 1:
        out.append(("optim.momentum", "must lie in [0, 1)"))
    if cfg.algorithm.gmp_keep_values and cfg.algorithm.kind != "gmp":
        out.append(("algorithm.gmp_keep_values", "only valid with algorithm.kind = gmp"))
    if not cfg.seeds:
        out.append(("seeds", "at least one seed is required"))
    if not 0 < cfg.dataset.test_fraction < 1:
        out.append(("dataset.test_fraction", "must lie in (0, 1)"))
    if cfg.dataset.kind in ("mnist", "cifar10", "csv") and not cfg.dataset.path:
        out.append(("dataset.path", f"required for dataset.kind = {cfg.dataset.kind}"))
    if cfg.network.arch == "layers" and (not cfg.network.layers or not cfg.network.input_shape):
        out.append(("network.layers", "arch = layers needs input_shape and a non-empty layers list"))
    if cfg.probe:
        for r in cfg.probe.prune_rates:
            if not 0 < r < 1:
                out.append(("probe.prune_rates", f"{r} not in (0, 1)"))
        for e in cfg.probe.snapshot_epochs:
            if not 0 <= e <= opt.epochs:
                out.append(("probe.snapshot_epochs", f"{e} outside [0, {opt.epochs}]"))
    return out


def missing_files(cfg: ExperimentConfig) -> list:
    if cfg.dataset.path and not Path(cfg.dataset.path).exists():
        return [("dataset.path", f"{cfg.dataset.path} does not exist")]
    return []


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    raw = dict(raw or {})
    ds = raw.get("dataset")
    if base_dir is not None and isinstance(ds, dict) and ds.get("path") and not Path(ds["path"]).is_absolute():
        raw["dataset"] = {**ds, "path": str((base_dir / ds["path"]).resolve())}
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            path = ".".join(str(x) for x in err["loc"]) or "<root>"
            msg = err["msg"]
            if err["type"] == "extra_forbidden":
                msg = "unknown key"
            if msg.startswith("Value error, "):
                for part in msg[len("Value error, "):].split("; "):
                    p, _, m = part.partition(": ")
                    problems.append((p, m))
                continue
            problems.append((path, msg))
        raise ConfigError(problems) from None


def load_config(path, check_files: bool = True) -> ExperimentConfig:
    """Parse and validate; with ``check_files`` every referenced file must exist."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([("<file>", f"{path} does not exist")])
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    cfg = parse_config(raw, path.parent)
    if check_files and missing_files(cfg):
        raise ConfigError(missing_files(cfg))
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
