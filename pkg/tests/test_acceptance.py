"""Acceptance gate: one test per shipped guarantee, one verdict line each.

Criteria 1-7 check the closed-form loss construction against independent
oracles (numpy reference CE, Monte Carlo, finite differences, brute-force
recomputation).  Criteria 8-12 train the shipped scenario presets and
compare against plain-CE baselines trained on identical data draws.  Every
test prints `criterion NN <label>: PASS/FAIL (<key numbers>)` and enforces
both the stated tolerance and the runtime budget; run with `-s` to see the
verdict lines on a green suite.
"""

import csv
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import advaug.autodiff as ad
from advaug.autodiff import Tape, Tensor
from advaug.cli import ALPHA_GRID, main as cli_main
from advaug.config import parse_config, trainer_config
from advaug.data import Dataset, MetaDataset
from advaug.loss import (
    LossConfig,
    adjusted_logits,
    augmented_ce_loss,
    quadratic_terms,
    surrogate_per_sample,
)
from advaug.metrics import run_summary
from advaug.oracles import (
    fd_gradient,
    finite_loss_convergence,
    mc_expected_ce,
    mgf_check,
    random_bound_instance,
)
from advaug.scenarios import build_scenario
from advaug.stats import ClassStats, update_covariance
from advaug.training import (
    TrainerConfig,
    _forward_param_list,
    _observe_batch,
    _surrogate_loss,
    init_state,
    learning_rate,
    train,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2, 3, 4)


def _verdict(num: int, label: str, passed: bool, detail: str) -> None:
    line = f"criterion {num:02d} {label}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line)
    assert passed, line


def _ce_reference(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Independent per-sample -log softmax via explicit log-sum-exp."""
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def _final_rows(log) -> list[dict]:
    """Rows covering the last fifth of the logged epochs."""
    rows = log.rows
    return rows[int(np.ceil(len(rows) * 0.8)) - 1:]


def _paired_runs(preset: str, seed: int):
    """Meta-trained run plus a plain-CE run on one identical data draw.

    The baseline reuses the exact config with the warm-up horizon extended
    to cover the whole schedule, so every iteration is a plain CE step on
    the same datasets with the same trainer seed.
    """
    cfg = parse_config(str(CONFIG_DIR / preset))
    cfg.seed = seed
    data = build_scenario(cfg)
    tc = trainer_config(cfg)
    _, full = train(tc, data.train, data.meta, eval_data=data.test)
    _, ce = train(replace(tc, t1=tc.t2), data.train, data.meta,
                  eval_data=data.test)
    return data, tc, full, ce


@pytest.fixture(scope="module")
def longtail_pack():
    """Five paired long-tail runs, shared by criteria 8 and 11."""
    t0 = time.time()
    runs = {}
    for seed in SEEDS:
        data, tc, full, ce = _paired_runs("longtail.ini", seed)
        runs[seed] = {"data": data, "tc": tc, "full": full, "ce": ce}
    return {"runs": runs, "seconds": time.time() - t0}


def test_criterion_01_reduction_identity():
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst_ce = worst_la = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        c = int(rng.integers(2, 6))
        width = int(rng.integers(1, 9))
        w = rng.normal(size=(c, width))
        b = rng.normal(size=c)
        h = rng.normal(size=(n, width))
        labels = rng.integers(0, c, size=n)
        priors = rng.uniform(0.1, 1.0, size=c)
        priors /= priors.sum()
        sigmas = [Tensor(a @ a.T / width)
                  for a in rng.normal(size=(c, width, width))]
        rho = quadratic_terms(Tensor(w), sigmas, labels)
        zeros = Tensor(np.zeros((n, width)))

        z0 = adjusted_logits(Tensor(w), Tensor(b), Tensor(h), zeros, rho,
                             priors, LossConfig(alpha=0.0, beta=0.0))
        dev = np.abs(ad.softmax_cross_entropy(z0, labels).value
                     - _ce_reference(h @ w.T + b, labels)).max()
        worst_ce = max(worst_ce, float(dev))

        z1 = adjusted_logits(Tensor(w), Tensor(b), Tensor(h), zeros, rho,
                             priors, LossConfig(alpha=0.0, beta=1.0))
        la = _ce_reference(h @ w.T + b + np.log(priors)[None, :], labels)
        dev = np.abs(ad.softmax_cross_entropy(z1, labels).value - la).max()
        worst_la = max(worst_la, float(dev))
    elapsed = time.time() - t0
    passed = worst_ce <= 1e-12 and worst_la <= 1e-12 and elapsed < 1.0
    _verdict(1, "reduction-identity", passed,
             f"max dev CE {worst_ce:.2e}, LA {worst_la:.2e}, "
             f"100 instances, {elapsed:.2f}s")


def test_criterion_02_jensen_upper_bound():
    t0 = time.time()
    rng = np.random.default_rng(0)
    held = 0
    worst_margin = np.inf
    for k in range(1000):
        inst = random_bound_instance(rng)  # C <= 5, width <= 8
        c = inst["w"].shape[0]
        y = inst["y"]
        sigmas = [None] * c
        sigmas[y] = Tensor(inst["sigma"])
        labels = np.array([y])
        rho = quadratic_terms(Tensor(inst["w"]), sigmas, labels)
        closed = surrogate_per_sample(
            Tensor(inst["w"]), Tensor(inst["b"]), Tensor(inst["h"][None, :]),
            Tensor(inst["delta"][None, :]), rho, labels,
            inst["alpha"]).value[0]
        mc, se = mc_expected_ce(inst["w"], inst["b"], inst["h"],
                                inst["delta"], inst["sigma"], inst["alpha"],
                                y, count=100000, seed=1000 + k)
        margin = float(closed + 1e-12 - (mc - 3.0 * se))
        worst_margin = min(worst_margin, margin)
        held += margin >= 0
    elapsed = time.time() - t0
    passed = held == 1000 and elapsed < 120.0
    _verdict(2, "jensen-upper-bound", passed,
             f"{held}/1000 bounds hold, worst margin {worst_margin:+.2e}, "
             f"{elapsed:.1f}s")


def test_criterion_03_mgf_identity():
    t0 = time.time()
    count = 1000000
    worst_ratio = 0.0
    cells = failures = 0
    for t in (-2.0, -1.0, 0.5, 1.0, 2.0):
        for mu in (-1.5, -0.5, 0.0, 0.75, 1.5):
            for s2 in (0.25, 0.5, 1.0, 2.0, 4.0):
                cells += 1
                mc, closed = mgf_check(t, mu, s2, count, seed=2000 + cells)
                # exact estimator se from the closed-form second moment
                var = np.exp(2 * t * mu) * (np.exp(2 * s2 * t * t)
                                            - np.exp(s2 * t * t))
                ratio = abs(mc - closed) / np.sqrt(var / count)
                worst_ratio = max(worst_ratio, float(ratio))
                failures += ratio > 4.0
    elapsed = time.time() - t0
    passed = failures == 0 and cells == 125 and elapsed < 60.0
    _verdict(3, "mgf-identity", passed,
             f"{cells - failures}/{cells} cells within 4 se, "
             f"worst {worst_ratio:.2f} se, {elapsed:.1f}s")


def test_criterion_04_finite_sample_convergence():
    t0 = time.time()
    rng = np.random.default_rng(9)
    n, c, width = 4, 3, 4
    w = rng.normal(size=(c, width))
    b = rng.normal(size=c)
    h = rng.normal(size=(n, width))
    delta = 0.3 * np.sign(rng.normal(size=(n, width)))
    sigmas = [a @ a.T / width for a in rng.normal(size=(c, width, width))]
    labels = np.array([0, 1, 2, 0])
    priors = np.array([0.5, 0.3, 0.2])
    budgets = [10, 100, 1000]
    slopes = []
    for seed in range(1, 51):
        rows = finite_loss_convergence(w, b, h, delta, sigmas, 0.5, priors,
                                       labels, budgets, seed=seed,
                                       limit_count=200000)
        gaps = [row["gap"] for row in rows]
        slopes.append(np.polyfit(np.log10(budgets), np.log10(gaps), 1)[0])
    mean_slope = float(np.mean(slopes))
    elapsed = time.time() - t0
    passed = abs(mean_slope + 0.5) <= 0.15 and elapsed < 120.0
    _verdict(4, "finite-sample-convergence", passed,
             f"mean log-log slope {mean_slope:+.3f} over 50 seeds, "
             f"{elapsed:.1f}s")


def _pipeline_instance(rng):
    """Two-layer pipeline with relu inputs kept away from the kink."""
    n, in_dim, hid, c = 5, 3, 4, 3
    while True:
        x = rng.normal(size=(n, in_dim))
        w1 = rng.normal(size=(in_dim, hid)) * 0.7
        b1 = rng.normal(size=hid)
        if np.abs(x @ w1 + b1).min() > 1e-3:
            break
    labels = rng.integers(0, c, size=n)
    delta = rng.uniform(-0.9, 0.9, size=(n, 1)) * np.sign(
        rng.normal(size=(n, hid)))
    sigmas = [a @ a.T / hid for a in rng.normal(size=(c, hid, hid))]
    priors = rng.uniform(0.1, 1.0, size=c)
    priors /= priors.sum()
    params = [w1, b1, rng.normal(size=(c, hid)), rng.normal(size=c)]
    cfg = LossConfig(alpha=float(rng.uniform(0.1, 1.0)), beta=1.0)
    return x, labels, delta, sigmas, priors, params, cfg


def _pipeline_loss(values, x, labels, delta, sigmas, priors, cfg):
    w1, b1, hw, hb = [Tensor(v) for v in values]
    h = ad.relu(ad.add(ad.matmul(Tensor(x), w1), b1))
    rho = quadratic_terms(hw, [Tensor(s) for s in sigmas], labels)
    z = adjusted_logits(hw, hb, h, Tensor(delta), rho, priors, cfg)
    return augmented_ce_loss(z, labels), [w1, b1, hw, hb]


def test_criterion_05_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(50):
        x, labels, delta, sigmas, priors, params, cfg = _pipeline_instance(rng)
        with Tape() as tape:
            loss, tensors = _pipeline_loss(params, x, labels, delta, sigmas,
                                           priors, cfg)
            grads = tape.gradient(loss, tensors)
        for k, value in enumerate(params):
            def f(v, k=k):
                trial = [p.copy() for p in params]
                trial[k] = v.reshape(params[k].shape)
                out, _ = _pipeline_loss(trial, x, labels, delta, sigmas,
                                        priors, cfg)
                return float(out.value)
            fd = fd_gradient(f, value.ravel().copy()).reshape(value.shape)
            scale = max(np.abs(fd).max(), 1e-12)
            worst = max(worst, np.abs(grads[k].value - fd).max() / scale)
    elapsed = time.time() - t0
    passed = worst < 1e-4 and elapsed < 60.0
    _verdict(5, "gradient-correctness", passed,
             f"max rel err {worst:.2e} over 50 instances, {elapsed:.1f}s")


def _tiny_meta_instance(seed: int = 0):
    """2-class, 2-feature head-only instance with 4 train + 4 meta points."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 2))
    ds = Dataset(features=x, labels=np.array([0, 1, 0, 1]),
                 class_counts=np.array([2, 2]))
    md = MetaDataset(features=rng.normal(size=(4, 2)),
                     labels=np.array([0, 0, 1, 1]), per_class=2)
    cfg = TrainerConfig(t1=0, t2=10, alpha=0.6, beta=1.0, batch_train=4,
                        batch_meta=4, hidden=(), feat_dim=2, perturb_hidden=4,
                        decay_points=(), seed=seed)
    state = init_state(cfg, ds, md)
    state.t = 1
    state.perturb.load_values([rng.normal(scale=0.3, size=t.value.shape)
                               for t in state.perturb.all_tensors()])
    f, grad_h = _observe_batch(state, np.arange(4))
    # FD needs smooth relu inputs inside the perturbation net
    assert np.abs(f @ state.perturb.w1.value
                  + state.perturb.b1.value).min() > 1e-3
    return state, f, grad_h


def _tiny_meta_value(state, f, grad_h):
    """Lookahead step plus meta CE on one tape, from current values."""
    tape = Tape()
    with tape:
        loss, _, leaves = _surrogate_loss(state, state.dataset.features,
                                          state.dataset.labels, f, grad_h)
        phi = state.params.all_tensors()
        grads = tape.gradient(loss, phi)
        lr = Tensor(learning_rate(state.config, state.t))
        pseudo = [ad.sub(p, ad.mul(lr, g)) for p, g in zip(phi, grads)]
        zm = _forward_param_list(pseudo, len(state.params.extractor),
                                 state.metadata.features)
        meta_loss = augmented_ce_loss(zm, state.metadata.labels)
    return meta_loss, tape, leaves


def test_criterion_06_hypergradient_correctness():
    t0 = time.time()
    state, f, grad_h = _tiny_meta_instance(seed=0)
    meta_loss, tape, leaves = _tiny_meta_value(state, f, grad_h)
    omega = state.perturb.all_tensors()
    hyper_omega = tape.gradient(meta_loss, omega)
    hyper_sigma = tape.gradient(meta_loss, leaves)
    step = 1e-5
    worst = 0.0

    for t_idx, tensor in enumerate(omega):
        fd = np.zeros_like(tensor.value)
        it = np.nditer(tensor.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor.value[idx]
            tensor.value[idx] = orig + step
            up, *_ = _tiny_meta_value(state, f, grad_h)
            tensor.value[idx] = orig - step
            dn, *_ = _tiny_meta_value(state, f, grad_h)
            tensor.value[idx] = orig
            fd[idx] = (float(up.value) - float(dn.value)) / (2 * step)
        scale = max(np.abs(fd).max(), 1e-12)
        worst = max(worst, np.abs(hyper_omega[t_idx].value - fd).max() / scale)

    for c in range(2):
        base = state.stats.covariance(c)
        fd = np.zeros_like(base)
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                bump = np.zeros_like(base)
                bump[i, j] = step
                state.stats.set_covariance(c, base + bump)
                up, *_ = _tiny_meta_value(state, f, grad_h)
                state.stats.set_covariance(c, base - bump)
                dn, *_ = _tiny_meta_value(state, f, grad_h)
                fd[i, j] = (float(up.value) - float(dn.value)) / (2 * step)
        state.stats.set_covariance(c, base)
        scale = max(np.abs(fd).max(), 1e-12)
        worst = max(worst, np.abs(hyper_sigma[c].value - fd).max() / scale)

    elapsed = time.time() - t0
    passed = worst < 1e-3 and elapsed < 60.0
    _verdict(6, "hypergradient-correctness", passed,
             f"max rel err {worst:.2e} across omega and sigma, {elapsed:.1f}s")


def test_criterion_07_covariance_pooling():
    t0 = time.time()
    rng = np.random.default_rng(23)
    n, dim, c = 60, 5, 3
    x = rng.normal(size=(n, dim)) @ rng.normal(size=(dim, dim))
    y = rng.integers(0, c, size=n)
    full = ClassStats(c, dim)
    update_covariance(full, x, y)
    worst = 0.0
    for _ in range(20):
        order = rng.permutation(n)
        pieces = int(rng.integers(1, 8))
        cuts = np.sort(rng.choice(np.arange(1, n), size=pieces, replace=False))
        pooled = ClassStats(c, dim)
        for chunk in np.split(order, cuts):
            update_covariance(pooled, x[chunk], y[chunk])
        for cls in range(c):
            worst = max(worst, np.abs(pooled.covariance(cls)
                                      - full.covariance(cls)).max())
    elapsed = time.time() - t0
    passed = worst <= 1e-10 and elapsed < 10.0
    _verdict(7, "covariance-pooling", passed,
             f"max pooled-vs-full dev {worst:.2e} over 20 partitions, "
             f"{elapsed:.2f}s")


def test_criterion_08_longtail_behavior(longtail_pack):
    t0 = time.time()
    deltas = []
    pattern_hits = 0
    for seed in SEEDS:
        pack = longtail_pack["runs"][seed]
        deltas.append(run_summary(pack["full"])["worst_class_recall"]
                      - run_summary(pack["ce"])["worst_class_recall"])
        order = np.argsort(pack["data"].train.class_counts)
        rows = _final_rows(pack["full"])
        small = np.mean([[row[f"adv_ratio_{c}"] for c in order[:2]]
                         for row in rows])
        large = np.mean([[row[f"adv_ratio_{c}"] for c in order[-2:]]
                         for row in rows])
        pattern_hits += small > large
    mean_delta = float(np.mean(deltas))
    elapsed = longtail_pack["seconds"] + time.time() - t0
    passed = mean_delta >= 0.05 and pattern_hits >= 4 and elapsed < 600.0
    _verdict(8, "longtail-behavior", passed,
             f"worst-class recall delta {mean_delta * 100:+.1f} pts, "
             f"tail-vs-head adversarial pattern {pattern_hits}/5 seeds, "
             f"{elapsed:.0f}s")


def test_criterion_09_noisy_label_behavior():
    t0 = time.time()
    eps_hits = 0
    acc_deltas = []
    for seed in SEEDS:
        _, _, full, ce = _paired_runs("noise.ini", seed)
        rows = _final_rows(full)
        noisy = np.mean([row["eps_noisy_mean"] for row in rows])
        clean = np.mean([row["eps_clean_mean"] for row in rows])
        eps_hits += noisy < clean
        acc_deltas.append(run_summary(full)["accuracy"]
                          - run_summary(ce)["accuracy"])
    mean_delta = float(np.mean(acc_deltas))
    elapsed = time.time() - t0
    passed = eps_hits >= 4 and mean_delta >= 0.03 and elapsed < 600.0
    _verdict(9, "noisy-label-behavior", passed,
             f"eps noisy<clean in {eps_hits}/5 seeds, "
             f"accuracy delta {mean_delta * 100:+.1f} pts, {elapsed:.0f}s")


def test_criterion_10_subpopulation_shift_behavior():
    t0 = time.time()
    deltas = []
    for seed in SEEDS:
        _, _, full, ce = _paired_runs("subpop.ini", seed)
        deltas.append(run_summary(full)["worst_group_accuracy"]
                      - run_summary(ce)["worst_group_accuracy"])
    mean_delta = float(np.mean(deltas))
    elapsed = time.time() - t0
    passed = mean_delta >= 0.05 and elapsed < 600.0
    _verdict(10, "subpopulation-shift-behavior", passed,
             f"worst-group accuracy delta {mean_delta * 100:+.1f} pts "
             f"over 5 seeds, {elapsed:.0f}s")


def test_criterion_11_ablation_direction(longtail_pack, tmp_path):
    t0 = time.time()
    full_acc, no_cov_acc, no_eps_acc = [], [], []
    for seed in SEEDS:
        pack = longtail_pack["runs"][seed]
        data, tc = pack["data"], pack["tc"]
        full_acc.append(run_summary(pack["full"])["accuracy"])
        _, log = train(replace(tc, alpha=0.0), data.train, data.meta,
                       eval_data=data.test)
        no_cov_acc.append(run_summary(log)["accuracy"])
        _, log = train(replace(tc, freeze_eps=True), data.train, data.meta,
                       eval_data=data.test)
        no_eps_acc.append(run_summary(log)["accuracy"])
    full = float(np.mean(full_acc))
    no_cov = float(np.mean(no_cov_acc))
    no_eps = float(np.mean(no_eps_acc))

    sweep_dir = tmp_path / "sweep"
    code = cli_main(["sweep", "--config", str(CONFIG_DIR / "longtail.ini"),
                     "--output", str(sweep_dir)])
    with open(sweep_dir / "sweep_summary.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    swept = tuple(float(row["alpha"]) for row in table)
    sweep_ok = code == 0 and swept == ALPHA_GRID

    elapsed = longtail_pack["seconds"] + time.time() - t0
    passed = (full > no_cov and full > no_eps and sweep_ok
              and elapsed < 1800.0)
    _verdict(11, "ablation-direction", passed,
             f"accuracy full {full:.4f} > alpha-off {no_cov:.4f}, "
             f"> eps-off {no_eps:.4f}; sweep reported {len(table)} rows, "
             f"{elapsed:.0f}s")


SHORT_INI = """\
[run]
scenario = longtail
seed = 3

[data]
n_max = 80
imbalance_ratio = 10
meta_per_class = 5
test_per_class = 20

[model]
hidden = 16
feat_dim = 8

[training]
t1 = 5
t2 = 40
"""


def test_criterion_12_end_to_end_determinism(tmp_path):
    t0 = time.time()
    cfg_path = tmp_path / "short.ini"
    cfg_path.write_text(SHORT_INI)
    logs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli_main(["run", "--config", str(cfg_path),
                         "--output", str(out)]) == 0
        logs.append((out / "metrics.csv").read_bytes())
    elapsed = time.time() - t0
    passed = logs[0] == logs[1] and elapsed < 120.0
    _verdict(12, "end-to-end-determinism", passed,
             f"metrics.csv byte-identical across reruns "
             f"({len(logs[0])} bytes), {elapsed:.1f}s")
