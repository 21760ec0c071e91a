"""Bilevel meta-training loop.

Each meta iteration performs four sub-steps on one persistent tape:

1. ``pseudo_step``: a plain-SGD lookahead update of the classifier under the
   surrogate loss, with the perturbation scale kept as a differentiable
   function of the perturbation net and the class covariances kept as leaf
   tensors.
2. ``meta_update_omega``: cross-entropy on the balanced meta batch, evaluated
   at the lookahead parameters, differentiated back through the lookahead
   step into the perturbation net (Adam update).
3. ``meta_update_sigma``: the same meta loss differentiated into the class
   covariance leaves (SGD step + PSD projection, persisted into the running
   class statistics).
4. ``final_step``: the real classifier update (momentum SGD + weight decay)
   under the surrogate loss rebuilt with the refreshed perturbation net and
   covariances.  Per-sample characteristics and gradient signs are computed
   once per iteration and shared by the lookahead and final steps.

Iterations up to the warm-up horizon use plain cross-entropy instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .characteristics import (BatchView, History, extract, update_history)
from .classifier import (ClassifierParams, ce_grad_wrt_features,
                         extract_features, init_classifier, logits,
                         numpy_features)
from .data import Dataset, MetaDataset
from .loss import (LossConfig, adjusted_logits, augmented_ce_loss,
                   compute_delta, quadratic_terms, regularizer_terms)
from .metrics import MetricsLog, evaluate
from .perturbation import PerturbNetParams, eps_forward, init_perturb_net
from .stats import ClassStats, class_priors, project_psd, update_covariance


class NumericalAbort(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass
class TrainerConfig:
    """Hyperparameters of one training run."""

    t1: int
    t2: int
    eta1: float = 0.05
    eta2: float = 1e-3
    batch_train: int = 64
    batch_meta: int = 32
    alpha: float = 0.5
    beta: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_points: tuple[float, ...] = (0.8, 0.9)
    decay_factor: float = 0.01
    hidden: tuple[int, ...] = (64, 64)
    feat_dim: int = 16
    perturb_hidden: int = 100
    freeze_eps: bool = False
    detach_rho_w: bool = False
    diagonal_sigma: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.t2 < 1:
            raise ValueError("t2 must be positive")
        if not 0 <= self.t1 <= self.t2:
            raise ValueError("need 0 <= t1 <= t2")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_train < 1 or self.batch_meta < 1:
            raise ValueError("batch sizes must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        LossConfig(alpha=self.alpha, beta=self.beta)  # range check

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, beta=self.beta)


class MomentumSgd:
    """SGD with classical momentum and decoupled-from-loss weight decay."""

    def __init__(self, params: list[Tensor], momentum: float,
                 weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in params]

    def step(self, grads: list[Tensor], lr: float) -> None:
        for p, g, v in zip(self.params, grads, self.velocity, strict=True):
            v *= self.momentum
            v += g.value + self.weight_decay * p.value
            p.value -= lr * v


class Adam:
    def __init__(self, params: list[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, grads: list[Tensor]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v,
                              strict=True):
            m *= b1
            m += (1.0 - b1) * g.value
            v *= b2
            v += (1.0 - b2) * np.square(g.value)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class MetaState:
    """Everything a run mutates: parameters, statistics, optimizers, RNGs."""

    config: TrainerConfig
    params: ClassifierParams
    perturb: PerturbNetParams
    stats: ClassStats
    history: History
    priors: np.ndarray
    dataset: Dataset
    metadata: MetaDataset
    sgd: MomentumSgd
    adam: Adam
    batch_rng: np.random.Generator
    meta_rng: np.random.Generator
    t: int = 0
    events: list[str] = field(default_factory=list)
    last_batch: tuple[np.ndarray, np.ndarray] | None = None
    last_train_loss: float = math.nan


@dataclass
class PseudoStep:
    """Artifacts of one lookahead step, shared by the two meta updates."""

    tape: Tape
    pseudo_params: list[Tensor]
    sigma_leaves: list[Tensor]
    eps: Tensor | None
    train_loss: Tensor
    characteristics: np.ndarray
    grad_h: np.ndarray
    batch_idx: np.ndarray
    lr: float
    meta_loss: Tensor | None = None
    meta_idx: np.ndarray | None = None


def init_state(config: TrainerConfig, dataset: Dataset,
               metadata: MetaDataset) -> MetaState:
    if metadata.features.shape[1] != dataset.dim:
        raise ValueError("metadata dimensionality differs from train data")
    keys = [int(k) for k in
            np.random.SeedSequence(config.seed).generate_state(4)]
    params = init_classifier(dataset.dim, dataset.num_classes,
                             hidden=config.hidden, feat_dim=config.feat_dim,
                             seed=keys[0])
    perturb = init_perturb_net(hidden=config.perturb_hidden, seed=keys[1])
    stats = ClassStats(dataset.num_classes, params.feat_dim,
                       diagonal=config.diagonal_sigma)
    history = History(capacity=dataset.n)
    priors = class_priors(dataset.class_counts)
    sgd = MomentumSgd(params.all_tensors(), config.momentum,
                      config.weight_decay)
    adam = Adam(perturb.all_tensors(), lr=config.eta2)
    return MetaState(
        config=config, params=params, perturb=perturb, stats=stats,
        history=history, priors=priors, dataset=dataset, metadata=metadata,
        sgd=sgd, adam=adam,
        batch_rng=np.random.default_rng(np.random.SeedSequence(keys[2])),
        meta_rng=np.random.default_rng(np.random.SeedSequence(keys[3])))


def learning_rate(config: TrainerConfig, t: int) -> float:
    lr = config.eta1
    for frac in config.decay_points:
        if t >= int(round(frac * config.t2)):
            lr *= config.decay_factor
    return lr


def sample_train_batch(state: MetaState) -> np.ndarray:
    size = min(state.config.batch_train, state.dataset.n)
    return state.batch_rng.choice(state.dataset.n, size=size, replace=False)


def sample_meta_batch(state: MetaState) -> np.ndarray:
    n_meta = state.metadata.features.shape[0]
    size = min(state.config.batch_meta, n_meta)
    return state.meta_rng.choice(n_meta, size=size, replace=False)


def _observe_batch(state: MetaState, batch_idx: np.ndarray) -> np.ndarray:
    """Update running stats/EMAs from the detached batch forward.

    Returns the normalized characteristics matrix used by the perturbation
    net for this iteration.
    """
    x = state.dataset.features[batch_idx]
    y = state.dataset.labels[batch_idx]
    h_np = numpy_features(state.params, x)
    logits_np = h_np @ state.params.head_w.value.T + state.params.head_b.value
    grad_h = ce_grad_wrt_features(state.params, h_np, y)
    update_covariance(state.stats, h_np, y)
    view = BatchView(ids=batch_idx, h=h_np, logits=logits_np, labels=y,
                     grad_h=grad_h, progress=state.t / state.config.t2)
    batch = extract(view, state.history, state.stats)
    update_history(state.history, batch_idx, batch.raw)
    state.last_batch = (batch_idx, grad_h)
    return batch.normalized, grad_h


def _check_finite_loss(state: MetaState, loss: Tensor, stage: str) -> None:
    if not np.isfinite(loss.value):
        raise NumericalAbort(
            f"non-finite {stage} loss at iteration {state.t}: "
            f"{float(loss.value)}")


def warmup_step(state: MetaState, batch_idx: np.ndarray) -> None:
    """One plain cross-entropy step (also used for the CE baseline)."""
    _observe_batch(state, batch_idx)
    x = state.dataset.features[batch_idx]
    y = state.dataset.labels[batch_idx]
    with Tape() as tape:
        h = extract_features(state.params, x)
        z = logits(state.params, h)
        loss = augmented_ce_loss(z, y)
        _check_finite_loss(state, loss, "warm-up")
        grads = tape.gradient(loss, state.params.all_tensors())
    state.sgd.step(grads, learning_rate(state.config, state.t))
    state.last_train_loss = float(loss.value)


def _surrogate_loss(state: MetaState, x: np.ndarray, y: np.ndarray,
                    characteristics: np.ndarray, grad_h: np.ndarray,
                    ) -> tuple[Tensor, Tensor | None, list[Tensor]]:
    """Build the adjusted surrogate loss on the active tape.

    Returns (loss, eps tensor or None, covariance leaf tensors).
    """
    cfg = state.config
    eps = None
    delta = None
    if not cfg.freeze_eps:
        eps = eps_forward(state.perturb, characteristics)
        delta = compute_delta(grad_h, eps).delta
    sigma_leaves = [Tensor(state.stats.covariance(c))
                    for c in range(state.dataset.num_classes)]
    h = extract_features(state.params, x)
    rho = quadratic_terms(state.params.head_w, sigma_leaves, y,
                          detach_w=cfg.detach_rho_w)
    z = adjusted_logits(state.params.head_w, state.params.head_b, h, delta,
                        rho, state.priors, cfg.loss_config())
    return augmented_ce_loss(z, y), eps, sigma_leaves


def pseudo_step(state: MetaState, batch_idx: np.ndarray) -> PseudoStep:
    """Lookahead classifier update, recorded for later differentiation."""
    characteristics, grad_h = _observe_batch(state, batch_idx)
    x = state.dataset.features[batch_idx]
    y = state.dataset.labels[batch_idx]
    lr = learning_rate(state.config, state.t)
    tape = Tape()
    with tape:
        loss, eps, sigma_leaves = _surrogate_loss(
            state, x, y, characteristics, grad_h)
        _check_finite_loss(state, loss, "train")
        phi = state.params.all_tensors()
        grads = tape.gradient(loss, phi)
        lr_t = Tensor(lr)
        pseudo = [ad.sub(p, ad.mul(lr_t, g))
                  for p, g in zip(phi, grads, strict=True)]
    state.last_train_loss = float(loss.value)
    return PseudoStep(tape=tape, pseudo_params=pseudo,
                      sigma_leaves=sigma_leaves, eps=eps, train_loss=loss,
                      characteristics=characteristics, grad_h=grad_h,
                      batch_idx=batch_idx, lr=lr)


def _forward_param_list(tensors: list[Tensor], depth: int,
                        x: np.ndarray) -> Tensor:
    """Classifier forward through an explicit parameter list (layout as
    ClassifierParams.all_tensors: depth (w, b) pairs then head w, b)."""
    h = Tensor(x)
    for i in range(depth):
        h = ad.relu(ad.add(ad.matmul(h, tensors[2 * i]), tensors[2 * i + 1]))
    return ad.add(ad.matmul(h, ad.transpose(tensors[-2])), tensors[-1])


def _ensure_meta_loss(state: MetaState, step: PseudoStep,
                      meta_idx: np.ndarray) -> Tensor:
    if step.meta_loss is not None:
        if step.meta_idx is not None and not np.array_equal(
                step.meta_idx, meta_idx):
            raise ValueError("meta updates must share one meta batch")
        return step.meta_loss
    xm = state.metadata.features[meta_idx]
    ym = state.metadata.labels[meta_idx]
    depth = len(state.params.extractor)
    with step.tape:
        zm = _forward_param_list(step.pseudo_params, depth, xm)
        step.meta_loss = augmented_ce_loss(zm, ym)
    step.meta_idx = np.asarray(meta_idx)
    _check_finite_loss(state, step.meta_loss, "meta")
    return step.meta_loss


def meta_update_omega(state: MetaState, step: PseudoStep,
                      meta_idx: np.ndarray) -> None:
    """Adam step on the perturbation net along the meta hypergradient."""
    if step.eps is None:
        return  # perturbations frozen at zero; no dependence to update
    meta_loss = _ensure_meta_loss(state, step, meta_idx)
    grads = step.tape.gradient(meta_loss, state.perturb.all_tensors())
    if not all(np.all(np.isfinite(g.value)) for g in grads):
        state.events.append(
            f"iteration {state.t}: non-finite perturbation-net "
            "hypergradient, update skipped")
        return
    state.adam.step(grads)


def meta_update_sigma(state: MetaState, step: PseudoStep,
                      meta_idx: np.ndarray) -> None:
    """SGD + PSD projection on each class covariance along its
    hypergradient; results persist into the running statistics."""
    meta_loss = _ensure_meta_loss(state, step, meta_idx)
    grads = step.tape.gradient(meta_loss, step.sigma_leaves)
    for c, (leaf, g) in enumerate(zip(step.sigma_leaves, grads, strict=True)):
        if not np.all(np.isfinite(g.value)):
            state.events.append(
                f"iteration {state.t}: non-finite covariance hypergradient "
                f"for class {c}, update skipped")
            continue
        candidate = leaf.value - state.config.eta2 * g.value
        try:
            projected = project_psd(candidate)
        except (ValueError, np.linalg.LinAlgError) as exc:
            state.events.append(
                f"iteration {state.t}: covariance projection failed for "
                f"class {c} ({exc}), keeping previous value")
            continue
        state.stats.set_covariance(c, projected)


def final_step(state: MetaState, step: PseudoStep) -> None:
    """Real classifier update with refreshed perturbations/covariances."""
    x = state.dataset.features[step.batch_idx]
    y = state.dataset.labels[step.batch_idx]
    with Tape() as tape:
        loss, _, _ = _surrogate_loss(
            state, x, y, step.characteristics, step.grad_h)
        _check_finite_loss(state, loss, "train")
        grads = tape.gradient(loss, state.params.all_tensors())
    state.sgd.step(grads, step.lr)
    state.last_train_loss = float(loss.value)


def meta_iteration(state: MetaState, batch_idx: np.ndarray,
                   meta_idx: np.ndarray) -> None:
    step = pseudo_step(state, batch_idx)
    meta_update_omega(state, step, meta_idx)
    meta_update_sigma(state, step, meta_idx)
    final_step(state, step)


def full_train_eps(state: MetaState) -> np.ndarray:
    """Perturbation scale for every training sample under current state.

    Detached (no tape, no EMA update); used for per-epoch diagnostics.
    """
    if state.config.freeze_eps:
        return np.zeros(state.dataset.n)
    x = state.dataset.features
    y = state.dataset.labels
    h_np = numpy_features(state.params, x)
    logits_np = h_np @ state.params.head_w.value.T + state.params.head_b.value
    grad_h = ce_grad_wrt_features(state.params, h_np, y)
    view = BatchView(ids=np.arange(state.dataset.n), h=h_np,
                     logits=logits_np, labels=y, grad_h=grad_h,
                     progress=state.t / state.config.t2)
    batch = extract(view, state.history, state.stats)
    return eps_forward(state.perturb, batch.normalized).value[:, 0]


def _epoch_row(state: MetaState, epoch: int, phase: str,
               eval_data: Dataset | None) -> dict:
    cfg = state.config
    num_classes = state.dataset.num_classes
    row = {"epoch": epoch, "iteration": state.t, "phase": phase,
           "train_loss": state.last_train_loss,
           "test_loss": math.nan, "test_accuracy": math.nan,
           "worst_group_accuracy": math.nan,
           "eps_noisy_mean": math.nan, "eps_clean_mean": math.nan}
    for c in range(num_classes):
        row[f"recall_{c}"] = math.nan
    if eval_data is not None:
        report = evaluate(state.params, eval_data.features, eval_data.labels,
                          eval_data.group_ids)
        row["test_loss"] = report["loss"]
        row["test_accuracy"] = report["accuracy"]
        row["worst_group_accuracy"] = report["worst_group_accuracy"]
        for c in range(num_classes):
            row[f"recall_{c}"] = float(report["per_class_recall"][c])

    eps = full_train_eps(state)
    labels = state.dataset.labels
    for c in range(num_classes):
        mask = labels == c
        row[f"mean_eps_{c}"] = float(eps[mask].mean()) if mask.any() else math.nan
        row[f"adv_ratio_{c}"] = float((eps[mask] > 0).mean()) if mask.any() else math.nan
    if state.dataset.noise_mask is not None:
        noisy = state.dataset.noise_mask
        if noisy.any():
            row["eps_noisy_mean"] = float(eps[noisy].mean())
        if (~noisy).any():
            row["eps_clean_mean"] = float(eps[~noisy].mean())

    row.update(_regularizer_row(state, eps))
    return row


def _regularizer_row(state: MetaState, eps_all: np.ndarray) -> dict:
    """Detached diagnostic decomposition on the most recent batch."""
    if state.last_batch is None:
        return {"gen_term": math.nan, "rob_term": math.nan,
                "fair_term": math.nan}
    batch_idx, grad_h = state.last_batch
    x = state.dataset.features[batch_idx]
    y = state.dataset.labels[batch_idx]
    h_np = numpy_features(state.params, x)
    delta = eps_all[batch_idx][:, None] * np.sign(grad_h)
    sigma_leaves = [Tensor(state.stats.covariance(c))
                    for c in range(state.dataset.num_classes)]
    w = state.params.head_w
    rho = quadratic_terms(w, sigma_leaves, y)
    z = adjusted_logits(w, state.params.head_b, Tensor(h_np), Tensor(delta),
                        rho, state.priors, state.config.loss_config())
    zv = z.value - z.value.max(axis=1, keepdims=True)
    q = np.exp(zv)
    q /= q.sum(axis=1, keepdims=True)
    report = regularizer_terms(q, rho.value, w.value, delta, state.priors, y)
    # Scale by the loss coefficients so ablation toggles zero the columns.
    return {"gen_term": state.config.alpha * report.generalization,
            "rob_term": report.robustness,
            "fair_term": state.config.beta * report.fairness}


def train(config: TrainerConfig, dataset: Dataset, metadata: MetaDataset,
          eval_data: Dataset | None = None,
          state: MetaState | None = None) -> tuple[MetaState, MetricsLog]:
    """Run the full schedule: warm-up then meta iterations, logged per epoch."""
    if state is None:
        state = init_state(config, dataset, metadata)
    log = MetricsLog(dataset.num_classes)
    iters_per_epoch = max(1, round(dataset.n / config.batch_train))
    epoch = 0
    for t in range(1, config.t2 + 1):
        state.t = t
        batch_idx = sample_train_batch(state)
        if t <= config.t1:
            warmup_step(state, batch_idx)
            phase = "warmup"
        else:
            meta_idx = sample_meta_batch(state)
            meta_iteration(state, batch_idx, meta_idx)
            phase = "meta"
        if t % iters_per_epoch == 0 or t == config.t2:
            epoch += 1
            log.append(_epoch_row(state, epoch, phase, eval_data))
    log.events.extend(state.events)
    return state, log
