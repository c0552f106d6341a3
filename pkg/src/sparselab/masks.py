"""Pruning and regrowth criteria over MaskedParam, and sparse initialization.

Every operation mutates the given MaskedParam in place (weight, mask and,
for mask-only pruning, ``retained``) and returns the flat indices it touched.
Ties are always broken by ascending flat index.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import MaskedParam, Network

log = logging.getLogger(__name__)

FLOOR_EPS = 1e-9


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def floor_count(x: float) -> int:
    # absorbs float noise like (1 - 0.9) * 100 = 9.999999999999998
    return int(math.floor(x + FLOOR_EPS))


def _rank_desc(scores: np.ndarray) -> np.ndarray:
    """Order of positions by descending score, ties by ascending position."""
    return np.argsort(-scores, kind="stable")


def _scores(p: MaskedParam, keep_values: bool) -> tuple:
    """Candidate flat indices and their magnitudes."""
    w = p.weight.reshape(-1)
    m = p.mask.reshape(-1)
    if keep_values:
        vals = w.copy()
        if p.retained is not None:
            r = p.retained.reshape(-1)
            vals[~m] = r[~m]
        return np.arange(w.size), np.abs(vals)
    idx = np.flatnonzero(m)
    return idx, np.abs(w[idx])


def _set_active(p: MaskedParam, keep: np.ndarray, keep_values: bool) -> np.ndarray:
    """Make exactly the flat positions ``keep`` active; return removed positions."""
    m = p.mask.reshape(-1)
    w = p.weight.reshape(-1)
    new = np.zeros_like(m)
    new[keep] = True
    removed = np.flatnonzero(m & ~new)
    if keep_values:
        if p.retained is None:
            p.retained = np.zeros_like(p.weight)
        r = p.retained.reshape(-1)
        revived = np.flatnonzero(~m & new)
        r[removed] = w[removed]
        w[revived] = r[revived]
        r[revived] = 0.0
    w[removed] = 0.0
    m[:] = new
    return removed


def keep_top_count(p: MaskedParam, count: int, keep_values: bool = False) -> np.ndarray:
    idx, mag = _scores(p, keep_values)
    count = max(0, min(int(count), idx.size))
    keep = idx[_rank_desc(mag)[:count]]
    if count == 0 and idx.size:
        log.info("layer %s pruned to zero active weights", p.layer_id)
    return _set_active(p, keep, keep_values)


def topk_keep_magnitude(p: MaskedParam, keep_fraction: float, keep_values: bool = False) -> np.ndarray:
    """Keep the round(keep_fraction * nnz) largest-|w| active weights."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in [0, 1], got {keep_fraction}")
    return keep_top_count(p, round_half_up(keep_fraction * p.nnz), keep_values)


def prune_global_to_count(params: Sequence[MaskedParam], keep: int, keep_values: bool = False) -> list:
    cands, mags, owner = [], [], []
    for k, p in enumerate(params):
        idx, mag = _scores(p, keep_values)
        cands.append(idx)
        mags.append(mag)
        owner.append(np.full(idx.size, k))
    cands, mags, owner = np.concatenate(cands), np.concatenate(mags), np.concatenate(owner)
    chosen = _rank_desc(mags)[:keep]
    removed = []
    for k, p in enumerate(params):
        sel = chosen[owner[chosen] == k]
        removed.append(_set_active(p, np.sort(cands[sel]), keep_values))
    return removed


def global_magnitude_prune(params: Sequence[MaskedParam], target_sparsity: float,
                           keep_values: bool = False) -> list:
    """Rank all prunable weights jointly; floor((1 - target) * N) survive.

    Returns the removed flat indices per param.
    """
    params = list(params)
    total = sum(p.numel for p in params)
    nnz = sum(p.nnz for p in params)
    keep = floor_count((1.0 - target_sparsity) * total)
    if keep > nnz and not keep_values:
        raise ValueError(f"target sparsity {target_sparsity} is below current sparsity "
                         f"{1 - nnz / total:.6f}; this operation never resurrects weights")
    return prune_global_to_count(params, keep, keep_values)


def regenerate_by_gradient(p: MaskedParam, count: int, grads: Optional[np.ndarray] = None) -> np.ndarray:
    """Activate the ``count`` zero positions with the largest |grad|; new weights are 0.

    ``count`` is clamped to the number of zero positions; compare the length
    of the returned index array with ``count`` to detect a clamp.
    """
    g = p.grad if grads is None else grads
    if g is None:
        raise ValueError(f"{p.layer_id}: no gradient available for regeneration")
    m = p.mask.reshape(-1)
    zeros = np.flatnonzero(~m)
    count = max(0, min(int(count), zeros.size))
    picked = zeros[_rank_desc(np.abs(np.asarray(g).reshape(-1)[zeros]))[:count]]
    _activate(p, picked)
    return picked


def regenerate_random(p: MaskedParam, count: int, rng: np.random.Generator) -> np.ndarray:
    zeros = np.flatnonzero(~p.mask.reshape(-1))
    count = max(0, min(int(count), zeros.size))
    picked = np.sort(rng.choice(zeros, size=count, replace=False)) if count else zeros[:0]
    _activate(p, picked)
    return picked


def _activate(p: MaskedParam, idx: np.ndarray):
    p.mask.reshape(-1)[idx] = True
    p.weight.reshape(-1)[idx] = 0.0
    if p.retained is not None:
        p.retained.reshape(-1)[idx] = 0.0


# structured (whole output filters) -------------------------------------------

def _require_conv(p: MaskedParam):
    if p.weight.ndim != 4:
        raise ValueError(f"{p.layer_id}: structured filter ops need a [out, in, kh, kw] weight, "
                         f"got shape {p.weight.shape}")


def active_filters(p: MaskedParam) -> np.ndarray:
    _require_conv(p)
    return np.flatnonzero(p.mask.reshape(p.mask.shape[0], -1).any(axis=1))


def zero_filters(p: MaskedParam) -> np.ndarray:
    _require_conv(p)
    return np.flatnonzero(~p.mask.reshape(p.mask.shape[0], -1).any(axis=1))


def filter_prune_structured(p: MaskedParam, prune_fraction: float) -> np.ndarray:
    """Drop whole filters with the smallest sum |w|; returns removed filter indices."""
    if not 0.0 <= prune_fraction <= 1.0:
        raise ValueError("prune_fraction must lie in [0, 1]")
    act = active_filters(p)
    keep = round_half_up((1.0 - prune_fraction) * act.size)
    return filter_keep_count(p, keep)


def filter_keep_count(p: MaskedParam, keep: int) -> np.ndarray:
    act = active_filters(p)
    sums = np.abs(p.weight[act]).sum(axis=(1, 2, 3))
    order = _rank_desc(sums)
    dropped = np.sort(act[order[max(0, keep):]])
    p.mask[dropped] = False
    p.weight[dropped] = 0.0
    if dropped.size and dropped.size == act.size:
        log.info("layer %s has no active filters left", p.layer_id)
    return dropped


def filter_regenerate_structured(p: MaskedParam, count: int, grads: Optional[np.ndarray] = None) -> np.ndarray:
    """Reactivate the zero filters with the largest sum |grad|; weights start at 0."""
    g = p.grad if grads is None else grads
    if g is None:
        raise ValueError(f"{p.layer_id}: no gradient available for regeneration")
    zf = zero_filters(p)
    count = max(0, min(int(count), zf.size))
    sums = np.abs(np.asarray(g)[zf]).sum(axis=(1, 2, 3))
    picked = np.sort(zf[_rank_desc(sums)[:count]])
    p.mask[picked] = True
    p.weight[picked] = 0.0
    return picked


# sparse initialization ------------------------------------------------------

@dataclass
class SparsityPlan:
    mode: str = "dense"  # dense | uniform | erk
    sparsity: float = 0.0

    def __post_init__(self):
        if self.mode not in ("dense", "uniform", "erk"):
            raise ValueError(f"unknown sparse init {self.mode!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("initial sparsity must lie in [0, 1)")


def erk_raw(shape) -> float:
    if len(shape) == 2:
        out_f, in_f = shape
        return (in_f + out_f) / (in_f * out_f)
    cout, cin, kh, kw = shape
    return (cin + cout + kh + kw) / (cin * cout * kh * kw)


def erk_densities(shapes: dict, sparsity: float) -> dict:
    """Per-layer densities proportional to the ERK score, capped at 1.

    Layers whose density would exceed 1 are made dense one at a time
    (largest score first) and the scale is re-solved for the rest.
    """
    sizes = {k: int(np.prod(s)) for k, s in shapes.items()}
    raw = {k: erk_raw(s) for k, s in shapes.items()}
    total = sum(sizes.values())
    budget = (1.0 - sparsity) * total
    if budget > total + 1e-9:
        raise ValueError(f"infeasible ERK plan: sparsity {sparsity} needs more than all weights")
    dense: set = set()
    while True:
        rest = [k for k in shapes if k not in dense]
        if not rest:
            break
        eps = (budget - sum(sizes[k] for k in dense)) / sum(raw[k] * sizes[k] for k in rest)
        worst = max(rest, key=lambda k: raw[k])
        if raw[worst] * eps > 1.0:
            dense.add(worst)
            continue
        break
    out = {}
    for k in shapes:
        out[k] = 1.0 if k in dense else raw[k] * eps
    return out


def plan_densities(net: Network, plan: SparsityPlan) -> dict:
    """Target density per prunable layer id."""
    params = net.prunable_params
    if plan.mode == "dense" or plan.sparsity == 0.0:
        return {p.layer_id: 1.0 for p in params}
    if plan.mode == "uniform":
        return {p.layer_id: 1.0 - plan.sparsity for p in params}
    return erk_densities({p.layer_id: p.weight.shape for p in params}, plan.sparsity)


def init_sparsity(net: Network, plan: SparsityPlan, rng: np.random.Generator) -> dict:
    """Set masks of all prunable layers per ``plan``; returns layer id -> mask."""
    params = net.prunable_params
    dens = plan_densities(net, plan)
    masks = {}
    for p in params:
        nnz = min(p.numel, round_half_up(dens[p.layer_id] * p.numel))
        m = np.zeros(p.numel, dtype=bool)
        if nnz == p.numel:
            m[:] = True
        else:
            m[rng.permutation(p.numel)[:nnz]] = True
        p.mask[...] = m.reshape(p.weight.shape)
        p.apply_mask()
        masks[p.layer_id] = p.mask.copy()
    return masks


# bookkeeping ----------------------------------------------------------------

@dataclass
class PruneEvent:
    """One topology change at a training step.

    ``pruned`` counts the schedule-driven removals; ``removed`` and
    ``regenerated`` count the drop-and-regrow part, which must match.
    """

    step: int
    scope: str
    pruned: dict = field(default_factory=dict)
    removed: dict = field(default_factory=dict)
    regenerated: dict = field(default_factory=dict)
    clamped: dict = field(default_factory=dict)
    target_sparsity: float = float("nan")
    achieved_sparsity: float = float("nan")
    regen_ratio: float = 0.0
    dense_grad: bool = False
    densities: dict = field(default_factory=dict)
    nnz: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneEvent":
        return cls(**d)


def pack_mask(mask: np.ndarray) -> np.ndarray:
    return np.packbits(mask.reshape(-1).astype(np.uint8))


def unpack_mask(bits: np.ndarray, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return np.unpackbits(bits, count=n).astype(bool).reshape(shape)


def sparsity_table(net_or_masks) -> list:
    """Per-layer rows plus an ``overall`` row, like a sparsity budget table."""
    if isinstance(net_or_masks, Network):
        items = [(p.layer_id, p.mask) for p in net_or_masks.prunable_params]
    else:
        items = list(net_or_masks.items())
    rows, tot, tot_nnz = [], 0, 0
    for lid, m in items:
        n, k = int(m.size), int(np.count_nonzero(m))
        rows.append({"layer": lid, "shape": "x".join(map(str, m.shape)), "params": n,
                     "nnz": k, "density": k / n, "sparsity": 1 - k / n})
        tot += n
        tot_nnz += k
    rows.append({"layer": "overall", "shape": "", "params": tot, "nnz": tot_nnz,
                 "density": tot_nnz / tot if tot else 0.0,
                 "sparsity": 1 - tot_nnz / tot if tot else 0.0})
    return rows
