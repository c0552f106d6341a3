"""FLOPs accounting (1 multiply-add = 2 FLOPs).

Training cost per step is forward + backward, with the backward pass
charged at twice the forward. Unstructured sparsity is credited linearly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import LayerSpec, check_layers


def layer_forward_flops(layer: LayerSpec, density: float = 1.0, in_shape=None) -> float:
    """Per-sample forward FLOPs. ``in_shape`` is needed for conv/relu/pool."""
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    if layer.kind == "affine":
        return 2.0 * layer.in_features * layer.out_features * density
    if layer.kind == "flatten":
        return 0.0
    if in_shape is None:
        raise ValueError(f"{layer.kind} FLOPs need the layer input shape")
    out = layer.output_shape(tuple(in_shape))
    if layer.kind == "conv2d":
        kh, kw = layer.kernel
        return 2.0 * kh * kw * layer.in_channels * layer.out_channels * out[1] * out[2] * density
    # relu / avgpool2d: one FLOP per output element
    return float(np.prod(out))


class FlopsModel:
    """Forward FLOPs of one architecture as a function of per-layer density."""

    def __init__(self, input_shape, layers):
        self.layers = list(layers)
        self.shapes = check_layers(input_shape, self.layers)
        self.ids = {i: f"{i}:{l.kind}" for i, l in enumerate(self.layers) if l.parameterized}

    @classmethod
    def from_arch(cls, arch: dict) -> "FlopsModel":
        from .algorithms import arch_from_dict
        return cls(*arch_from_dict(arch))

    def forward(self, densities: dict = None) -> float:
        densities = densities or {}
        total = 0.0
        for i, layer in enumerate(self.layers):
            d = densities.get(self.ids.get(i), 1.0)
            total += layer_forward_flops(layer, d if layer.parameterized else 1.0, self.shapes[i])
        return total


@dataclass
class FlopsReport:
    forward_flops_per_sample: float
    dense_forward_flops_per_sample: float
    train_flops_total: float
    dense_train_flops_total: float
    normalized_forward: float
    normalized_train: float

    def to_dict(self):
        return asdict(self)


def density_segments(record) -> list:
    """[(first_step, last_step_exclusive, layer densities)] over the whole run.

    A topology event at step t takes effect from step t + 1.
    """
    total = len(record.losses)
    segs, start, dens = [], 0, dict(record.initial_densities)
    for ev in record.events:
        end = min(ev.step + 1, total)
        if end > start:
            segs.append((start, end, dens))
            start = end
        dens = {**dens, **ev.densities}
    if total > start:
        segs.append((start, total, dens))
    return segs


def train_flops(record, steps_per_epoch: int = None, batch: int = None,
                charge_regen_dense: bool = True) -> FlopsReport:
    """Integrate 3x forward FLOPs over the piecewise-constant density trajectory.

    Events that regrew connections from dense gradients are charged a dense
    backward (2x dense forward) for that step; ``charge_regen_dense=False``
    amortizes it away.
    """
    model = FlopsModel.from_arch(record.arch)
    batch = batch or record.cfg.batch_size
    steps_per_epoch = steps_per_epoch or record.steps_per_epoch
    total_steps = len(record.losses) or steps_per_epoch * record.cfg.epochs
    dense_fwd = model.forward()
    cost = 0.0
    for start, end, dens in density_segments(record):
        cost += (end - start) * 3.0 * model.forward(dens) * batch
    if charge_regen_dense:
        for ev, dens_before in _events_with_prior(record):
            if ev.dense_grad and ev.step < total_steps:
                fwd = model.forward(dens_before)
                cost += (2.0 * dense_fwd - 2.0 * fwd) * batch
    dense_cost = total_steps * 3.0 * dense_fwd * batch
    final = dict(record.initial_densities)
    for ev in record.events:
        final.update(ev.densities)
    fwd = model.forward(final)
    return FlopsReport(fwd, dense_fwd, cost, dense_cost, fwd / dense_fwd, cost / dense_cost)


def _events_with_prior(record):
    dens = dict(record.initial_densities)
    for ev in record.events:
        yield ev, dens
        dens = {**dens, **ev.densities}


def density_trajectory(record) -> list:
    """Rows (step, global density, per-layer densities); the first row is the start state."""
    sizes = record.layer_sizes

    def row(step, dens, event):
        nnz = sum(round(dens[k] * sizes[k]) for k in sizes)
        return {"step": step, "event": event, "global_density": nnz / sum(sizes.values()),
                "layers": {k: dens[k] for k in sizes}}

    rows = [row(0, record.initial_densities, False)]
    dens = dict(record.initial_densities)
    for ev in record.events:
        dens = {**dens, **ev.densities}
        rows.append(row(ev.step, dens, True))
    return rows
