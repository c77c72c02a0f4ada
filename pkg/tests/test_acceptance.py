"""Acceptance criteria 1-11.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line per
criterion at the end of the run. Criteria 9 and 10 train for 2000 iterations per
run and dominate the wall time (about an hour on one core).
"""
import math
import re
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from perturbgan import checkpoint as ckpt
from perturbgan import ops
from perturbgan.cli import main
from perturbgan.data import load_dataset
from perturbgan.layers import ConvLayerSpec, MaskBank, PerturbLayerSpec, perturb_forward
from perturbgan.metrics import (ClassifierConfig, ProxyClassifier, SweepResult, SweepRow,
                                inception_score_from_probs, mask_seed_sweep, run_with_metrics)
from perturbgan.noisegen import (DEFAULT_LC, RANDU, LcState, draw_raw, lattice_diagnostic,
                                 make_mask, mt_draw, mt_seed)
from perturbgan.presets import SMOKE_CONFIG, TINY_CONFIG
from perturbgan.tape import Tape, evaluate, gradient_of_gradient_norm, gradient_penalty
from perturbgan.trainer import train

from gradcheck_cases import CASES, worst_error

DATA = Path(__file__).parent / "data"

# frozen after the calibration runs: the moment distance fell 94% on mask seed 0, and
# MT(SND) seeds 0-2 finished at 3.26, 3.22, 3.47 (relative std 0.040)
SMOKE_MIN_DROP = 0.5
MT_SND_MAX_RELATIVE_STD = 0.10


def criterion(n, title):
    return pytest.mark.criterion(n, title)


@criterion(1, "per-layer parameter ratio perturb/conv = 1/9")
@pytest.mark.parametrize("p,q", [(4, 8), (64, 64), (256, 128)])
def test_c1_parameter_law(p, q, record_property):
    ratio = Fraction(PerturbLayerSpec(p, q).n_params(), ConvLayerSpec(p, q, kernel=3).n_params())
    record_property("detail", f"({p},{q}) -> {ratio}")
    assert ratio == Fraction(1, 9)


@criterion(2, "count-params PGv1 vs CG report")
def test_c2_table_report(capsys, record_property):
    assert main(["count-params", "--model", "PGv1", "--compare", "CG"]) == 0
    out = capsys.readouterr().out
    ratio = float(re.search(r"ratio PGv1/CG = ([0-9.]+) \(reference 0\.48\)", out).group(1))
    record_property("detail", f"ratio {ratio:.4f}, reference 0.48")
    assert 0.35 <= ratio <= 0.70
    assert "per-stage 1/9 law: holds" in out
    assert out.count("= 1/9") == 4


@criterion(3, "finite-difference gradients of every op, 20 points each")
def test_c3_gradients(record_property):
    t0 = time.perf_counter()
    worst = {name: max(worst_error(build, seed) for seed in range(20))
             for name, build in CASES.items()}
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    record_property("detail", f"{len(worst)} ops, worst {name} {worst[name]:.2e}, {elapsed:.0f}s")
    assert worst[name] < 1e-4
    assert elapsed < 60


def _fd_gradient(tape, out, leaf, h=1e-5):
    base = leaf.value
    fd = np.zeros(base.size)
    for c in range(base.size):
        vals = []
        for sign in (1.0, -1.0):
            x = base.copy().reshape(-1)
            x[c] += sign * h
            vals.append(float(evaluate(tape, {leaf: x.reshape(base.shape)}, [out])[out]))
        fd[c] = (vals[0] - vals[1]) / (2 * h)
    return fd


def _relative_error(analytic, fd):
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(analytic), 1e-8)))


def _perturbative_critic_case(seed):
    """Two perturbation layers, global pooling and a linear head."""
    r = np.random.default_rng(seed)
    bank = MaskBank()
    t = Tape()
    xh = t.input(r.normal(size=(3, 2, 4, 4)), name="x_hat")
    v1 = t.param(r.normal(size=(3, 2)), name="v1")
    v2 = t.param(r.normal(size=(2, 3)), name="v2")
    w = t.param(r.normal(size=(2, 1)), name="w")
    l1, l2 = PerturbLayerSpec(2, 3, layer_id=1), PerturbLayerSpec(3, 2, layer_id=2)
    h = perturb_forward(xh, l1, v1, bank)
    d = ops.linear(ops.global_avg_pool(perturb_forward(h, l2, v2, bank)), w)
    pre = [xh.value + bank.stack(1, 2, (4, 4)), h.value + bank.stack(2, 3, (4, 4))]
    margin = min(float(np.abs(a).min()) for a in pre)
    return t, ops.sum(d), xh, [v1, v2, w], margin


@criterion(4, "gradient of the gradient norm against finite differences")
def test_c4_second_order(record_property):
    errors = {}
    # (a) linear critic: penalty gradient is 2(|w| - 1) w / |w|, checked against both
    r = np.random.default_rng(0)
    t = Tape()
    xh = t.input(r.normal(size=(4, 6)))
    w = t.param(r.normal(size=(6, 1)))
    d = ops.sum(ops.matmul(xh, w))
    g = gradient_of_gradient_norm(t, d, xh, [w])[w.id].value.ravel()
    n = np.linalg.norm(w.value)
    assert np.allclose(g, 2 * (n - 1) * w.value.ravel() / n, rtol=1e-10)
    pen = gradient_penalty(t, d, xh)
    errors["linear"] = _relative_error(g, _fd_gradient(t, pen, w))
    # (b) two-layer perturbative critic at a point with every pre-activation off its kink
    seed = next(s for s in range(100) if _perturbative_critic_case(s)[4] > 1e-3)
    t, d, xh, params, margin = _perturbative_critic_case(seed)
    grads = gradient_of_gradient_norm(t, d, xh, params)
    pen = gradient_penalty(t, d, xh)
    for p in params:
        errors[p.node.name] = _relative_error(grads[p.id].value.ravel(), _fd_gradient(t, pen, p))
    worst = max(errors.values())
    record_property("detail", f"worst relative error {worst:.2e} (kink margin {margin:.1e})")
    assert worst < 1e-3


def _big_int_lc(a, c, m, x, n):
    out = []
    for _ in range(n):
        x = (a * x + c) % m
        out.append(x)
    return out


@criterion(5, "LC and MT19937 golden vectors")
def test_c5_golden_vectors(record_property):
    lc, _ = draw_raw(LcState(DEFAULT_LC, 1), 1000)
    assert lc.tolist() == _big_int_lc(1103515245, 12345, 2**31, 1, 1000)
    ref = [int(v) for v in (DATA / "mt19937_seed5489_first1000.txt").read_text().split()]
    mt, _ = mt_draw(mt_seed(5489), 1000)
    assert mt.tolist() == ref
    record_property("detail", "1000 LC + 1000 MT values match")


@criterion(6, "RANDU lattice residue vs MT19937")
def test_c6_lattice(record_property):
    t0 = time.perf_counter()
    randu = lattice_diagnostic(LcState(RANDU, 1), 10**5)
    mt = lattice_diagnostic(mt_seed(5489), 10**5)
    nonzero = float(np.mean(mt.residues != 0))
    record_property("detail", f"RANDU zero fraction {randu.residue_zero_fraction:.4f}, "
                              f"MT nonzero fraction {nonzero:.5f}")
    assert randu.residue_zero_fraction == 1.0
    assert nonzero > 0.99
    assert time.perf_counter() - t0 < 10


@criterion(7, "masks re-derive bit-exactly after 1000 iterations and are never stored")
def test_c7_mask_contract(tmp_path, record_property):
    cfg = TINY_CONFIG.replace(iterations=1000, n_critic=1, eval_every=500, dtype="float64")
    midway = {}

    def snapshot_masks(state):
        # the evaluator hook sees the live training state
        if state.iteration == 500:
            for bank in (state.g.masks, state.d.masks):
                midway.update({k: v.copy() for k, v in bank.used.items()})
        return None, None

    t0 = time.perf_counter()
    _, _, st = train(cfg, tmp_path, evaluator=snapshot_masks)
    elapsed = time.perf_counter() - t0
    used = {**st.g.masks.used, **st.d.masks.used}
    assert len(used) > 0 and midway
    for key, mask in used.items():
        assert np.array_equal(mask, make_mask(key)), key
    for key, mask in midway.items():
        assert np.array_equal(used[key], mask), key
    blob = (tmp_path / "checkpoint_1000.bin").read_bytes()
    for mask in used.values():
        assert np.ascontiguousarray(mask, dtype="<f8").tobytes() not in blob
    names = ckpt.load(tmp_path / "checkpoint_1000.bin").tensors
    assert not any("mask" in k for k in names)
    record_property("detail", f"{len(used)} masks checked, {elapsed:.0f}s")
    assert elapsed < 300


@criterion(8, "bit-identical history.csv across runs and across resume")
def test_c8_run_determinism(tmp_path, record_property):
    cfg = TINY_CONFIG.replace(iterations=200, checkpoint_every=100, dtype="float64")
    t0 = time.process_time()
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    train(cfg, tmp_path / "c", resume=tmp_path / "a" / "checkpoint_100.bin")
    elapsed = time.process_time() - t0
    a, b, c = ((tmp_path / d / "history.csv").read_bytes() for d in "abc")
    assert a.count(b"\n") == 201
    assert a == b
    assert a == c
    record_property("detail", f"3 x 200 iterations identical, {elapsed:.0f} CPU s")
    assert elapsed < 600


@pytest.fixture(scope="module")
def smoke_data():
    data = load_dataset(SMOKE_CONFIG.dataset, SMOKE_CONFIG.n_data, SMOKE_CONFIG.global_seed)
    clf = ProxyClassifier.fit(data, ClassifierConfig())
    return data, clf


@pytest.fixture(scope="module")
def smoke_run(smoke_data):
    data, clf = smoke_data
    c0 = time.process_time()
    initial, final, _ = run_with_metrics(SMOKE_CONFIG, data, clf)
    return initial, final, time.process_time() - c0


@criterion(9, "desk-scale convergence smoke, PGv1 vs CD on two-mode data")
def test_c9_convergence(smoke_run, record_property):
    initial, final, cpu = smoke_run
    drop = 1.0 - final.moment_distance / initial.moment_distance
    record_property("detail", f"moment distance {initial.moment_distance:.2f} -> "
                              f"{final.moment_distance:.2f} ({drop:.0%} drop), proxy IS "
                              f"{initial.proxy_is:.4f} -> {final.proxy_is:.4f}, {cpu / 60:.1f} CPU min")
    assert cpu < 15 * 60
    assert drop >= SMOKE_MIN_DROP
    assert final.proxy_is > initial.proxy_is


@criterion(10, "MT(SND) mask-seed spread below threshold; LC(UD) reported")
def test_c10_rng_kinds(smoke_data, smoke_run, record_property):
    data, clf = smoke_data
    _, first, _ = smoke_run
    rest = mask_seed_sweep(SMOKE_CONFIG, [1, 2], data, clf)
    mt = SweepResult([SweepRow(SMOKE_CONFIG.mask_seed, final=first)] + rest.rows)
    lc = mask_seed_sweep(SMOKE_CONFIG.replace(rng_kind="LC", dist_kind="UD"), [0, 1, 2], data, clf)
    assert all(r.error is None for r in mt.rows)
    rel = mt.relative_std()
    lc_finals = ", ".join(f"{r.seed}:{r.final.moment_distance:.2f}" if r.final else f"{r.seed}:{r.error}"
                          for r in lc.rows)
    mt_finals = ", ".join(f"{r.seed}:{r.final.moment_distance:.2f}" for r in mt.rows)
    record_property("detail", f"MT(SND) finals {mt_finals} rel std {rel:.3f} "
                              f"(< {MT_SND_MAX_RELATIVE_STD}); LC(UD) finals {lc_finals}")
    assert rel < MT_SND_MAX_RELATIVE_STD


@criterion(11, "proxy inception score contract")
def test_c11_inception_contract(record_property):
    assert abs(inception_score_from_probs(np.full((10, 4), 0.25)) - 1.0) <= 1e-9
    for c in (2, 5, 10):
        one_hot = np.eye(c)[np.arange(4 * c) % c]
        assert abs(inception_score_from_probs(one_hot) - c) <= 1e-6
    hand = math.exp(0.9 * math.log(1.8) + 0.1 * math.log(0.2))
    got = inception_score_from_probs([[0.9, 0.1], [0.1, 0.9]])
    record_property("detail", f"N=2 case {got:.6f} vs hand value {hand:.6f}")
    assert abs(got - hand) <= 1e-4
