"""Self-check suites wired to the `verify` CLI verb.

Each suite re-derives a core identity of the surrogate-loss construction
from an independent oracle (Monte Carlo sampling, finite differences, or
brute-force recomputation) and reports a structured pass/fail record.  The
full acceptance-grade sweeps live in the test suite; these are fast
versions of the same checks for use on a fresh checkout or inside `run
--oracle-suite` sanity gates.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import loss as loss_mod
from .autodiff import Tape, Tensor
from .data import Dataset, MetaDataset
from .loss import LossConfig, adjusted_logits, augmented_ce_loss
from .oracles import fd_gradient, mc_expected_ce, mgf_check, random_bound_instance
from .stats import ClassStats, update_covariance
from .training import (TrainerConfig, _forward_param_list, _observe_batch,
                       _surrogate_loss, init_state, learning_rate)


def jensen_suite(instances: int = 200, draws: int = 4000,
                 seed: int = 0) -> dict:
    """Closed-form surrogate must dominate the sampled expectation."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst = np.inf
    for k in range(instances):
        inst = random_bound_instance(rng)
        c = inst["w"].shape[0]
        y = inst["y"]
        sigmas = [None] * c
        sigmas[y] = Tensor(inst["sigma"])
        labels = np.array([y])
        rho = loss_mod.quadratic_terms(Tensor(inst["w"]), sigmas, labels)
        closed = loss_mod.surrogate_per_sample(
            Tensor(inst["w"]), Tensor(inst["b"]), Tensor(inst["h"][None, :]),
            Tensor(inst["delta"][None, :]), rho, labels,
            inst["alpha"]).value[0]
        mc, se = mc_expected_ce(inst["w"], inst["b"], inst["h"],
                                inst["delta"], inst["sigma"], inst["alpha"],
                                y, count=draws, seed=seed + k)
        margin = closed + 1e-12 - (mc - 3.0 * se)
        worst = min(worst, margin)
        if margin < 0:
            violations += 1
    return {"name": "jensen", "passed": violations == 0,
            "detail": f"{violations}/{instances} violations, "
                      f"worst margin {worst:.3e}"}


def mgf_suite(count: int = 200000, seed: int = 0) -> dict:
    """Gaussian moment-generating identity on a parameter grid."""
    failures = []
    for t in (-2.0, 0.5, 2.0):
        for mu in (-1.0, 0.0, 1.5):
            for s2 in (0.0, 1.0, 4.0):
                mc, closed = mgf_check(t, mu, s2, count, seed)
                var = np.exp(2 * t * mu) * (np.exp(2 * s2 * t * t)
                                            - np.exp(s2 * t * t))
                tol = 5.0 * np.sqrt(var / count) + 1e-9
                if abs(mc - closed) > tol:
                    failures.append((t, mu, s2))
    return {"name": "mgf", "passed": not failures,
            "detail": f"{len(failures)} grid failures: {failures[:3]}"}


def _random_pipeline(rng):
    """Small two-layer pipeline instance for gradient checking."""
    n, in_dim, hid, c = 5, 3, 4, 3
    feat = hid  # head consumes the extractor output directly
    while True:
        x = rng.normal(size=(n, in_dim))
        w1 = rng.normal(size=(in_dim, hid)) * 0.7
        b1 = rng.normal(size=hid)
        # keep relu inputs away from the kink so FD stays smooth
        if np.abs(x @ w1 + b1).min() > 1e-3:
            break
    labels = rng.integers(0, c, size=n)
    delta = rng.uniform(-0.9, 0.9, size=(n, 1)) * np.sign(
        rng.normal(size=(n, feat)))
    sigmas = []
    for _ in range(c):
        a = rng.normal(size=(feat, feat))
        sigmas.append(a @ a.T / feat)
    priors = rng.uniform(0.1, 1.0, size=c)
    priors /= priors.sum()
    params = [w1, b1, rng.normal(size=(c, feat)), rng.normal(size=c)]
    cfg = LossConfig(alpha=float(rng.uniform(0.1, 1.0)), beta=1.0)
    return x, labels, delta, sigmas, priors, params, cfg


def _pipeline_loss(values, x, labels, delta, sigmas, priors, cfg):
    w1, b1, hw, hb = [Tensor(v) for v in values]
    h = ad.relu(ad.add(ad.matmul(Tensor(x), w1), b1))
    rho = loss_mod.quadratic_terms(hw, [Tensor(s) for s in sigmas], labels)
    z = adjusted_logits(hw, hb, h, Tensor(delta), rho, priors, cfg)
    return augmented_ce_loss(z, labels), [w1, b1, hw, hb]


def gradient_suite(instances: int = 10, seed: int = 0) -> dict:
    """Tape gradients of the surrogate loss vs central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        x, labels, delta, sigmas, priors, params, cfg = _random_pipeline(rng)
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
    return {"name": "gradient", "passed": worst < 1e-4,
            "detail": f"max rel err {worst:.3e} over {instances} instances"}


def _tiny_state(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 2))
    y = np.array([0, 1, 0, 1])
    ds = Dataset(features=x, labels=y, class_counts=np.array([2, 2]))
    md = MetaDataset(features=rng.normal(size=(4, 2)),
                     labels=np.array([0, 0, 1, 1]), per_class=2)
    cfg = TrainerConfig(t1=0, t2=10, alpha=0.6, beta=1.0, batch_train=4,
                        batch_meta=4, hidden=(), feat_dim=2,
                        perturb_hidden=4, decay_points=(), seed=seed)
    state = init_state(cfg, ds, md)
    state.t = 1
    state.perturb.load_values([rng.normal(scale=0.3, size=t.value.shape)
                               for t in state.perturb.all_tensors()])
    obs = _observe_batch(state, np.arange(4))
    return state, obs


def _meta_value(state, obs):
    """Lookahead + meta CE on one tape, from current parameter values."""
    f, grad_h = obs
    x = state.dataset.features
    y = state.dataset.labels
    tape = Tape()
    with tape:
        loss, eps, leaves = _surrogate_loss(state, x, y, f, grad_h)
        phi = state.params.all_tensors()
        grads = tape.gradient(loss, phi)
        lr_t = Tensor(learning_rate(state.config, state.t))
        pseudo = [ad.sub(p, ad.mul(lr_t, g)) for p, g in zip(phi, grads)]
        zm = _forward_param_list(pseudo, 0, state.metadata.features)
        meta_loss = augmented_ce_loss(zm, state.metadata.labels)
    return meta_loss, tape, leaves


def hypergradient_suite(seed: int = 0) -> dict:
    """Meta-gradients through the lookahead step vs finite differences."""
    state, obs = _tiny_state(seed)
    meta_loss, tape, leaves = _meta_value(state, obs)
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
            up, *_ = _meta_value(state, obs)
            tensor.value[idx] = orig - step
            dn, *_ = _meta_value(state, obs)
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
                up, *_ = _meta_value(state, obs)
                state.stats.set_covariance(c, base - bump)
                dn, *_ = _meta_value(state, obs)
                fd[i, j] = (float(up.value) - float(dn.value)) / (2 * step)
        state.stats.set_covariance(c, base)
        scale = max(np.abs(fd).max(), 1e-12)
        worst = max(worst, np.abs(hyper_sigma[c].value - fd).max() / scale)

    return {"name": "hypergradient", "passed": worst < 1e-3,
            "detail": f"max rel err {worst:.3e}"}


def covariance_suite(partitions: int = 5, seed: int = 0) -> dict:
    """Streaming per-class covariance equals the full-batch computation."""
    rng = np.random.default_rng(seed)
    n, dim, c = 60, 5, 3
    x = rng.normal(size=(n, dim)) @ rng.normal(size=(dim, dim))
    y = rng.integers(0, c, size=n)
    full = ClassStats(c, dim)
    update_covariance(full, x, y)
    worst = 0.0
    for _ in range(partitions):
        order = rng.permutation(n)
        cuts = np.sort(rng.choice(np.arange(1, n), size=4, replace=False))
        pooled = ClassStats(c, dim)
        for chunk in np.split(order, cuts):
            update_covariance(pooled, x[chunk], y[chunk])
        for cls in range(c):
            worst = max(worst, np.abs(pooled.covariance(cls)
                                      - full.covariance(cls)).max())
    return {"name": "covariance-pooling", "passed": worst < 1e-10,
            "detail": f"max pooled-vs-full deviation {worst:.3e}"}


def run_all(seed: int = 0) -> list[dict]:
    return [
        jensen_suite(seed=seed),
        mgf_suite(seed=seed),
        gradient_suite(seed=seed),
        hypergradient_suite(seed=seed),
        covariance_suite(seed=seed),
    ]
