"""Acceptance suite: one check per criterion, each with its tolerance and time budget.

Run with ``pytest tests/test_acceptance.py -v`` (a PASS/FAIL line per criterion
is printed in the terminal summary) or ``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import random_net  # noqa: E402
from sparselab import masks as M  # noqa: E402
from sparselab import runner  # noqa: E402
from sparselab.algorithms import (AlgorithmSpec, reinit_ablation, train, train_dst, train_gmp,  # noqa: E402
                                  train_granet)
from sparselab.config import load_config  # noqa: E402
from sparselab.flops import FlopsModel, train_flops  # noqa: E402
from sparselab.nn import Network, affine, backward, forward, softmax_cross_entropy  # noqa: E402
from sparselab.optim import SgdState, sgd_step  # noqa: E402
from sparselab.plasticity import PlasticityProbe, run_probe, train_base  # noqa: E402
from sparselab.schedules import PruneSchedule, RegenSchedule, sparsity_at  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
RESULTS: dict = {}


def record(n, name, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    RESULTS[n] = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail} [{elapsed:.1f}s / {budget:.0f}s]"
    return ok


def moons_setup(cfg_name="granet_moons.yaml"):
    cfg = load_config(CONFIGS / cfg_name)
    data = runner.build_data(cfg)
    tcfg = runner.train_config(cfg)
    spe = tcfg.steps_per_epoch(len(data[0]))
    return cfg, data, tcfg, spe


def build(cfg, seed):
    return Network.build(*runner.build_layers(cfg), seed=seed)


# 1 ---------------------------------------------------------------------------------
def c1_schedule_fidelity():
    rng = np.random.default_rng(2024)
    worst = 0.0
    endpoints = True
    for _ in range(50):
        s_i = float(rng.uniform(0, 0.8))
        s_f = float(rng.uniform(s_i, 0.999))
        n, dt, t0 = int(rng.integers(1, 50)), int(rng.integers(1, 2000)), int(rng.integers(0, 5000))
        s = PruneSchedule(s_i, s_f, t0, dt, n)
        for t in range(t0, t0 + n * dt + 1, dt):
            direct = s_f + (s_i - s_f) * (1.0 - (t - t0) / (n * dt)) ** 3
            worst = max(worst, abs(sparsity_at(s, t) - direct))
        endpoints &= sparsity_at(s, t0) == s_i and sparsity_at(s, t0 + n * dt) == s_f
    return worst <= 1e-12 and endpoints, f"max |err| {worst:.2e}, exact endpoints {endpoints}"


# 2 ---------------------------------------------------------------------------------
def c2_zero_cost():
    cfg, data, tcfg, spe = moons_setup()
    spec = runner.algorithm_spec(cfg, spe)
    rec = train_granet(build(cfg, 0), data, spec, 0, tcfg)
    sizes = rec.layer_sizes
    total = sum(sizes.values())
    zero_cost = all(e.removed == e.regenerated for e in rec.events)
    worst = 0
    for e in rec.events:
        target = math.floor((1 - e.target_sparsity) * total + 1e-9)
        worst = max(worst, abs(sum(e.nnz.values()) - target))
    ok = zero_cost and worst <= len(sizes) and len(rec.events) == spec.prune.n + 1
    return ok, (f"{len(rec.events)} events, removed==regenerated {zero_cost}, "
                f"max |nnz - target| {worst} (allowed {len(sizes)}), final sparsity {rec.final_sparsity:.4f}")


# 3 ---------------------------------------------------------------------------------
def c3_granet_gmp():
    cfg, data, tcfg, spe = moons_setup()
    g_spec = runner.algorithm_spec(cfg, spe)
    g_spec.regen = RegenSchedule(0.0, g_spec.regen.t_end)
    m_spec = AlgorithmSpec("gmp", g_spec.init, g_spec.prune, g_spec.regen)
    g = train_granet(build(cfg, 1), data, g_spec, 1, tcfg)
    m = train_gmp(build(cfg, 1), data, m_spec, 1, tcfg)
    same_loss = g.losses == m.losses
    same_state = all(np.array_equal(g.final_state[k][f], m.final_state[k][f])
                     for k in g.final_state for f in ("weight", "mask", "bias"))
    return same_loss and same_state, f"loss stream identical {same_loss}, masks+weights identical {same_state}"


# 4 ---------------------------------------------------------------------------------
def c4_gradients():
    rng = np.random.default_rng(7)
    worst, coords, convs = 0.0, 0, 0
    h = 1e-5
    for i in range(10):
        conv = i % 2 == 0
        convs += conv
        net = random_net(rng, conv)
        for p in net.masked_params:
            p.mask[...] = rng.random(p.weight.shape) < 0.8
            p.apply_mask()
        for b in net.biases.values():
            b[...] = rng.normal(size=b.shape)
        x = rng.normal(size=(4, *net.input_shape))
        y = rng.integers(0, net.num_classes, size=4)
        backward(net, x, y)
        for _ in range(10):
            p = net.masked_params[int(rng.integers(len(net.masked_params)))]
            k = int(rng.integers(p.numel))
            w = p.weight.reshape(-1)
            orig = w[k]
            w[k] = orig + h
            lp = softmax_cross_entropy(forward(net, x), y)[0].mean()
            w[k] = orig - h
            lm = softmax_cross_entropy(forward(net, x), y)[0].mean()
            w[k] = orig
            fd = (lp - lm) / (2 * h)
            an = p.grad.reshape(-1)[k]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
            coords += 1
    return worst < 1e-4 and coords >= 100, f"{coords} coords over 10 nets ({convs} with conv), max rel err {worst:.2e}"


# 5 ---------------------------------------------------------------------------------
def c5_zero_consistency():
    rng = np.random.default_rng(5)
    net = Network.build((6,), [affine(6, 8), affine(8, 4)], seed=0)
    opt = SgdState(0.05, 0.9, 5e-4)
    ops = ("topk", "global", "regen_grad", "regen_rand", "sgd", "keep_values")
    violations = 0
    for i in range(1000):
        ps = net.masked_params
        for p in ps:
            p.grad = rng.normal(size=p.weight.shape)
        for k in net.biases:
            net.bias_grads[k] = rng.normal(size=net.biases[k].shape)
        op = ops[int(rng.integers(len(ops)))]
        p = ps[int(rng.integers(len(ps)))]
        if op == "topk":
            M.topk_keep_magnitude(p, float(rng.uniform(0.3, 1.0)))
        elif op == "global":
            nnz = sum(q.nnz for q in ps)
            M.prune_global_to_count(ps, int(rng.integers(nnz // 2, nnz + 1)))
        elif op == "regen_grad":
            M.regenerate_by_gradient(p, int(rng.integers(0, 10)))
        elif op == "regen_rand":
            M.regenerate_random(p, int(rng.integers(0, 10)), rng)
        elif op == "keep_values":
            M.keep_top_count(p, int(rng.integers(0, p.numel + 1)), keep_values=True)
        else:
            sgd_step(net, opt)
        for q in ps:
            violations += int(np.count_nonzero(q.weight[~q.mask]))
    return violations == 0, f"1000 random operations, {violations} nonzero masked weights observed"


# 6 ---------------------------------------------------------------------------------
def c6_dst_conservation():
    cfg, data, tcfg, spe = moons_setup()
    details, ok = [], True
    for kind in ("rigl", "set"):
        spec = AlgorithmSpec(kind, M.SparsityPlan("erk", 0.9), regen=RegenSchedule(0.3, 30 * spe),
                             dst_update_interval=10)
        net = build(cfg, 0)
        rec = train_dst(net, data, spec, 0, tcfg)
        start = {k: round(rec.initial_densities[k] * rec.layer_sizes[k]) for k in rec.layer_sizes}
        const = all(e.nnz == start for e in rec.events) and \
            {p.layer_id: p.nnz for p in net.prunable_params} == start
        moved = sum(sum(e.regenerated.values()) for e in rec.events)
        ok &= const and len(rec.events) >= 50 and moved > 0
        details.append(f"{kind}: {len(rec.events)} events, {moved} regrown, nnz constant {const}")
    return ok, "; ".join(details)


# 7 ---------------------------------------------------------------------------------
def c7_flops():
    cfg, data, tcfg, spe = moons_setup()
    dense = train(build(cfg, 0), data, AlgorithmSpec("dense"), 0, tcfg)
    rd = train_flops(dense)
    net = Network.build((2,), [affine(2, 20), affine(20, 20), affine(20, 2)], seed=0)
    static = train(net, data, AlgorithmSpec("static", M.SparsityPlan("uniform", 0.75)), 0, tcfg)
    d = net.global_density()
    rs = train_flops(static)
    gmp_spec = runner.algorithm_spec(cfg, spe)
    gmp_spec = AlgorithmSpec("gmp", gmp_spec.init, gmp_spec.prune)
    gmp = train_gmp(build(cfg, 0), data, gmp_spec, 0, tcfg)
    got = train_flops(gmp).train_flops_total
    # closed form: constant density between events, event at t live from t + 1
    model = FlopsModel.from_arch(gmp.arch)
    T, b = len(gmp.losses), tcfg.batch_size
    oracle, prev_t, dens = 0.0, 0, dict(gmp.initial_densities)
    for e in gmp.events:
        oracle += (e.step + 1 - prev_t) * 3 * model.forward(dens) * b
        prev_t, dens = e.step + 1, {**dens, **e.densities}
    oracle += (T - prev_t) * 3 * model.forward(dens) * b
    rel = abs(got - oracle) / oracle
    ok = (rd.normalized_train, rd.normalized_forward) == (1.0, 1.0) and \
        abs(rs.normalized_train - d) <= 1e-9 and rel <= 1e-9
    return ok, (f"dense ({rd.normalized_train}, {rd.normalized_forward}); static d={d} -> "
                f"{rs.normalized_train:.12f}; GMP vs closed form rel err {rel:.1e}")


# 8 ---------------------------------------------------------------------------------
def c8_mnist_gate():
    cfg = load_config(CONFIGS / "granet_mnist.yaml")
    data = runner.build_data(cfg)
    tcfg = runner.train_config(cfg)
    spec = runner.algorithm_spec(cfg, tcfg.steps_per_epoch(len(data[0])))
    dense, gra, sp = [], [], []
    for seed in (0, 1, 2):
        dense.append(train(build(cfg, seed), data, AlgorithmSpec("dense"), seed, tcfg).final_test_acc)
        rec = train_granet(build(cfg, seed), data, spec, seed, tcfg)
        gra.append(rec.final_test_acc)
        sp.append(rec.final_sparsity)
    gap = np.mean(dense) - np.mean(gra)
    ok = gap <= 0.02 and min(sp) >= 0.9 - 1e-9
    return ok, (f"dense {np.mean(dense):.4f}±{np.std(dense):.4f}, GraNet@{np.mean(sp):.3f} "
                f"{np.mean(gra):.4f}±{np.std(gra):.4f}, gap {100 * gap:.2f} pp (limit 2)")


# 9 ---------------------------------------------------------------------------------
def c9_plasticity():
    cfg = load_config(CONFIGS / "probe_moons.yaml")
    data = runner.build_data(cfg)
    tcfg = runner.train_config(cfg)
    pc = cfg.probe
    pre_e, post_e = pc.snapshot_epochs  # first LR drop sits between them
    cells: dict = {}
    for seed in cfg.seeds:
        base = train_base(build(cfg, seed), data, 0.0, tcfg, seed, pc.snapshot_epochs)
        for epoch, rate, regen in [(post_e, 0.2, False), (post_e, 0.98, False), (post_e, 0.9, False),
                                   (post_e, 0.9, True), (pre_e, 0.9, False)]:
            res = run_probe(base, PlasticityProbe(epoch, rate, pc.k_epochs, regen))
            cells.setdefault((epoch, rate, regen), []).append(res.plasticity)
    m = {k: float(np.mean(v)) for k, v in cells.items()}
    a = m[(post_e, 0.2, False)] > m[(post_e, 0.98, False)]
    b = m[(post_e, 0.9, True)] >= m[(post_e, 0.9, False)]
    c = m[(pre_e, 0.9, False)] >= m[(post_e, 0.9, False)]
    return a and b and c, (f"(a) p0.2 {m[(post_e, 0.2, False)]:+.3f} > p0.98 {m[(post_e, 0.98, False)]:+.3f}: {a}; "
                           f"(b) regen {m[(post_e, 0.9, True)]:+.3f} >= none {m[(post_e, 0.9, False)]:+.3f}: {b}; "
                           f"(c) pre-drop {m[(pre_e, 0.9, False)]:+.3f} >= post-drop {m[(post_e, 0.9, False)]:+.3f}: {c}")


# 10 --------------------------------------------------------------------------------
def c10_reinit():
    cfg, data, tcfg, spe = moons_setup()
    spec = runner.algorithm_spec(cfg, spe)
    gra, re, sp = [], [], []
    for seed in (0, 1, 2):
        rec = train_granet(build(cfg, seed), data, spec, seed, tcfg)
        gra.append(rec.final_test_acc)
        sp.append(rec.final_sparsity)
        re.append(reinit_ablation(rec, data, seed2=1000 + seed).final_test_acc)
    ok = np.mean(re) <= np.mean(gra) and abs(np.mean(sp) - 0.9) < 1e-9
    return ok, (f"two_moons 2-20-20-2 @ sparsity {np.mean(sp):.3f}: GraNet {np.mean(gra):.4f}, "
                f"reinit {np.mean(re):.4f}")


# 11 --------------------------------------------------------------------------------
def _cli(*args, **kw):
    env = {**os.environ, "PYTHONPATH": str(ROOT / "src") + os.pathsep + os.environ.get("PYTHONPATH", "")}
    return subprocess.Popen([sys.executable, "-m", "sparselab", *args], env=env,
                            stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, **kw)


def c11_repro_resume(tmp: Path):
    src = (CONFIGS / "granet_mnist.yaml").read_text()
    src = src.replace("seeds: [0, 1, 2]", "seeds: [0]").replace(
        "path: ../tests/data/mnist5k", f"path: {ROOT / 'tests/data/mnist5k'}")
    cfg_path = tmp / "c11.yaml"
    cfg_path.write_text(src + "checkpoint_every: 1\n")
    outs = {name: tmp / name for name in ("a", "b", "killed")}
    for name in ("a", "b"):
        assert _cli("run", str(cfg_path), "--out", str(outs[name])).wait() == 0
    cell = outs["killed"] / "seed_0"
    proc = _cli("run", str(cfg_path), "--out", str(outs["killed"]))
    while not (cell / "ckpt_epoch_0005.npz").exists() and proc.poll() is None:
        time.sleep(0.05)
    killed_mid = proc.poll() is None
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    killed_mid &= not (cell / "final.npz").exists()
    assert _cli("run", str(cfg_path), "--out", str(outs["killed"])).wait() == 0
    files = ("metrics.jsonl", "events.csv", "trajectory.csv", "flops.json")
    same = lambda x, y: all((x / "seed_0" / f).read_bytes() == (y / "seed_0" / f).read_bytes()  # noqa: E731
                            for f in files)
    digest = lambda x: runner.load_record(x / "seed_0" / "final.npz")  # noqa: E731
    ra, rb, rk = digest(outs["a"]), digest(outs["b"]), digest(outs["killed"])
    weights_equal = all(np.array_equal(ra.final_state[k]["weight"], rk.final_state[k]["weight"])
                        for k in ra.final_state)
    repeat = same(outs["a"], outs["b"]) and ra.masks_digest == rb.masks_digest
    resume = same(outs["a"], outs["killed"]) and ra.masks_digest == rk.masks_digest and weights_equal
    return repeat and resume and killed_mid, (f"repeat bitwise {repeat}; SIGKILL mid-run {killed_mid}, "
                                              f"resumed == uninterrupted bitwise {resume}")


CRITERIA = [
    (1, "schedule fidelity", c1_schedule_fidelity, 1),
    (2, "zero-cost regeneration", c2_zero_cost, 60),
    (3, "GraNet with r0=0 equals GMP", c3_granet_gmp, 60),
    (4, "gradient oracle", c4_gradients, 60),
    (5, "zero-consistency", c5_zero_consistency, 60),
    (6, "DST conservation", c6_dst_conservation, 60),
    (7, "FLOPs accounting", c7_flops, 10),
    (8, "MNIST accuracy gate", c8_mnist_gate, 20 * 60),
    (9, "plasticity directions", c9_plasticity, 30 * 60),
    (10, "reinit ablation direction", c10_reinit, 20 * 60),
    (11, "reproducibility and resume", c11_repro_resume, 5 * 60),
]


def run_criterion(n, name, fn, budget, tmp=None):
    t = time.perf_counter()
    ok, detail = fn(tmp) if n == 11 else fn()
    return record(n, name, ok, detail, time.perf_counter() - t, budget)


@pytest.mark.parametrize("n,name,fn,budget", CRITERIA, ids=[f"criterion_{c[0]}" for c in CRITERIA])
def test_criterion(n, name, fn, budget, tmp_path):
    assert run_criterion(n, name, fn, budget, tmp_path), RESULTS[n]


if __name__ == "__main__":
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        for n, name, fn, budget in CRITERIA:
            run_criterion(n, name, fn, budget, Path(d))
            print(RESULTS[n], flush=True)
    sys.exit(0 if all(" PASS " in r for r in RESULTS.values()) else 1)
