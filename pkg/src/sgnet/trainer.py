"""Training regimes and losses.

Four regimes share one loop: ``normal`` and ``combined`` minimize the
standard binary cross-entropy throughout; ``adversarial`` and
``interp_aware`` train benignly for a warmup, then on PGD examples whose
strength ramps linearly to epsilon_train, with ``interp_aware`` adding
lambda times the two-class saliency-map discrepancy between benign and
adversarial inputs.

Early stopping and the plateau LR scheduler score the benign validation
cross-entropy; for attack regimes they arm only once the ramp has finished
(training continues at maximum strength until early stopping triggers).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attack import AttackConfig, EpsilonSchedule, epsilon_at, pgd
from .errors import ConfigError, ContractError, ShapeError
from .gradcam import activation_map
from .model import ForwardPass, Model, forward, l2_penalty

REGIMES = ("normal", "combined", "adversarial", "interp_aware")
_PROB_CLAMP = 1e-7


@dataclass
class RegimeConfig:
    regime: str = "normal"
    lambda_interp: float = 0.0
    epsilon_train: float = 0.001
    learning_rate: float = 0.0003
    batch_size: int = 32
    max_epochs: int = 3000
    early_stop_patience: int = 50
    lr_plateau_factor: float = 0.8
    lr_plateau_patience: int = 20
    min_improvement: float = 1e-4
    warmup_steps: int = 400
    ramp_steps: int = 2000
    attack_iters: int = 10
    attack_step_size: float | None = None
    attack_random_start: bool = True
    saliency_grad: str = "detached"
    seed: int = 0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.lambda_interp < 0:
            raise ConfigError(f"lambda_interp must be >= 0, got {self.lambda_interp}")
        if self.epsilon_train < 0:
            raise ConfigError(f"epsilon_train must be >= 0, got {self.epsilon_train}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("learning_rate, batch_size, max_epochs must be positive")
        if not 0 < self.lr_plateau_factor < 1:
            raise ConfigError(f"lr_plateau_factor must lie in (0, 1), got {self.lr_plateau_factor}")
        if self.early_stop_patience < 1 or self.lr_plateau_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.saliency_grad not in ("detached", "full"):
            raise ConfigError(f"saliency_grad must be 'detached' or 'full', got {self.saliency_grad}")

    def attacks_enabled(self) -> bool:
        return self.regime in ("adversarial", "interp_aware")

    def effective_lambda(self) -> float:
        # lambda_interp == 0 degenerates interp_aware to the adversarial regime
        return self.lambda_interp if self.regime == "interp_aware" else 0.0


@dataclass
class StepRecord:
    step: int
    loss: float            # optimized objective incl. L2 penalty
    objective: float       # regime loss excl. L2 (adjusted loss for interp)
    adv_loss: float        # cross-entropy term of the objective
    discrepancy: float
    epsilon: float
    lr: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    epsilon: float
    discrepancy: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    best_epoch: int = -1

    CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "epsilon", "discrepancy")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.CSV_COLUMNS)
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                            repr(r.lr), repr(r.epsilon), repr(r.discrepancy)])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def positive_probability(fp: ForwardPass) -> Tensor:
    """Positive-class (disease) probability from raw scores."""
    return ad.getitem(ad.softmax(fp.logits), (slice(None), 1))


def standard_loss(y, y_hat) -> Tensor:
    """Mean binary cross-entropy of positive-class probabilities, clamped to
    [1e-7, 1 - 1e-7] to stay finite."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = ad.as_tensor(y_hat)
    if y_hat.ndim != 1 or y.shape != y_hat.shape:
        raise ShapeError(f"labels {y.shape} and predictions {y_hat.shape} must be equal-length vectors")
    p = ad.clip(y_hat, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    yt = Tensor(y.astype(p.data.dtype))
    one = Tensor(np.ones(p.shape, dtype=p.data.dtype))
    ll = ad.add(ad.mul(yt, ad.log(p)), ad.mul(ad.sub(one, yt), ad.log(ad.sub(one, p))))
    return ad.neg(ad.tmean(ll))


def cross_entropy_objective(model, x: Tensor, y) -> Tensor:
    """Attack/eval objective: benign-architecture CE in inference behavior."""
    from .attack import _logits  # local import to avoid a cycle at module load
    logits = _logits(model, x)
    p = ad.getitem(ad.softmax(logits), (slice(None), 1))
    return standard_loss(y, p)


def interpretation_discrepancy(fp_x: ForwardPass, fp_adv: ForwardPass,
                               saliency_grad: str = "detached") -> Tensor:
    """Half the summed L1 distances between the two class maps of the benign
    and adversarial passes, averaged over the batch."""
    maps_x = [activation_map(fp_x, c, saliency_grad).values for c in (0, 1)]
    maps_a = [activation_map(fp_adv, c, saliency_grad).values for c in (0, 1)]
    if maps_x[0].shape != maps_a[0].shape:
        raise ContractError(
            f"map shapes differ between passes: {maps_x[0].shape} vs {maps_a[0].shape}")
    spatial = tuple(range(1, maps_x[0].ndim))
    per_example = ad.add(ad.l1_diff(maps_x[0], maps_a[0], axis=spatial),
                         ad.l1_diff(maps_x[1], maps_a[1], axis=spatial))
    half = Tensor(np.asarray(0.5, per_example.data.dtype))
    return ad.mul(half, ad.tmean(per_example))


def reference_maps(model: Model, x) -> list[np.ndarray]:
    """Benign class maps captured as constants (used as the fixed side of the
    discrepancy while the attack iterates)."""
    fp = forward(model, x, training=False)
    return [activation_map(fp, c, "detached").values.data.copy() for c in (0, 1)]


def _stacked_discrepancy(fp_stacked: ForwardPass, n_benign: int,
                         saliency_grad: str) -> Tensor:
    """Discrepancy from one forward pass over [x; x_adv] stacked batch-wise
    (inference behavior is per-example, so this matches two separate passes)."""
    total = None
    for c in (0, 1):
        m = activation_map(fp_stacked, c, saliency_grad).values
        spatial = tuple(range(1, m.ndim))
        d = ad.l1_diff(ad.getitem(m, slice(0, n_benign)),
                       ad.getitem(m, slice(n_benign, None)), axis=spatial)
        total = d if total is None else ad.add(total, d)
    half = Tensor(np.asarray(0.5, total.data.dtype))
    return ad.mul(half, ad.tmean(total))


def make_adjusted_objective(ref_maps: Sequence[np.ndarray], lam: float,
                            saliency_grad: str = "detached") -> Callable:
    """PGD objective for the interp-aware regime: per-example CE plus lambda
    times the discrepancy against fixed benign reference maps."""

    def objective(model, x: Tensor, y) -> Tensor:
        fp = forward(model, x, training=False)
        ce = standard_loss(y, positive_probability(fp))
        if lam == 0.0:
            return ce
        full = saliency_grad == "full"
        total = None
        for c in (0, 1):
            m = activation_map(fp, c, saliency_grad).values
            d = ad.l1_diff(m, Tensor(ref_maps[c].astype(m.data.dtype)),
                           axis=tuple(range(1, m.ndim)))
            total = d if total is None else ad.add(total, d)
        half_lam = Tensor(np.asarray(0.5 * lam, ce.data.dtype))
        return ad.add(ce, ad.mul(half_lam, ad.tmean(total)))

    return objective


def adversarial_loss(model: Model, x, y, attack_cfg: AttackConfig,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Cross-entropy on PGD examples (the benign term is not included)."""
    x_adv = pgd(model, x, y, attack_cfg, loss=cross_entropy_objective, rng=rng)
    fp = forward(model, x_adv.data, training=False)
    return standard_loss(y, positive_probability(fp))


def adjusted_loss(model: Model, x, y, attack_cfg: AttackConfig, lambda_interp: float,
                  rng: np.random.Generator | None = None,
                  saliency_grad: str = "detached") -> Tensor:
    """Adversarial cross-entropy plus lambda times the interpretation
    discrepancy; the same adversarial batch feeds both terms."""
    if lambda_interp < 0:
        raise ConfigError(f"lambda_interp must be >= 0, got {lambda_interp}")
    if lambda_interp == 0.0:
        return adversarial_loss(model, x, y, attack_cfg, rng=rng)
    refs = reference_maps(model, x)
    objective = make_adjusted_objective(refs, lambda_interp, saliency_grad)
    x_adv = pgd(model, x, y, attack_cfg, loss=objective, rng=rng)
    fp_adv = forward(model, x_adv.data, training=False)
    ce = standard_loss(y, positive_probability(fp_adv))
    fp_x = forward(model, x, training=False)
    disc = interpretation_discrepancy(fp_x, fp_adv, saliency_grad)
    lam = Tensor(np.asarray(lambda_interp, ce.data.dtype))
    return ad.add(ce, ad.mul(lam, disc))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8); lr is mutable so the
    plateau scheduler can shrink it."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: ad.GradientMap) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p not in grads:
                continue
            g = grads[p].data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            update = (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# the fit loop
# ---------------------------------------------------------------------------

def _as_xy(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple) and len(dataset) == 2:
        x, y = dataset
    else:  # duck-typed Dataset from the data module
        x, y = dataset.stacked_voxels(), dataset.labels()
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) != len(y):
        raise ConfigError(f"{len(x)} inputs vs {len(y)} labels")
    if len(x) == 0:
        raise ConfigError("empty data split")
    return x, y


def _validation_ce(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        with ad.no_grad():
            fp = forward(model, xb, training=False)
            ce = standard_loss(yb, positive_probability(fp)).item()
        total += ce * len(xb)
    return total / len(x)


def _step_objective(model: Model, xb: np.ndarray, yb: np.ndarray, cfg: RegimeConfig,
                    eps_now: float, rng: np.random.Generator) -> tuple[Tensor, float, float]:
    """One training step's regime loss; returns (loss, adv_ce_value, discrepancy_value)."""
    lam = cfg.effective_lambda()
    # with eps == 0 the attack is the identity, so the discrepancy and its
    # gradient are exactly zero; skip that machinery entirely
    use_interp = lam > 0.0 and eps_now > 0.0
    attack = AttackConfig(eps_now, cfg.attack_iters, cfg.attack_step_size,
                          cfg.attack_random_start)
    if use_interp:
        refs = reference_maps(model, xb)
        objective = make_adjusted_objective(refs, lam, cfg.saliency_grad)
    else:
        objective = cross_entropy_objective
    x_adv = pgd(model, xb, yb, attack, loss=objective, rng=rng)
    fp_adv = forward(model, x_adv.data, training=True, rng=rng)
    ce = standard_loss(yb, positive_probability(fp_adv))
    if not use_interp:
        return ce, ce.item(), 0.0
    fp_sal = forward(model, np.concatenate([xb, x_adv.data]), training=False)
    disc = _stacked_discrepancy(fp_sal, len(xb), cfg.saliency_grad)
    lam_t = Tensor(np.asarray(lam, ce.data.dtype))
    return ad.add(ce, ad.mul(lam_t, disc)), ce.item(), disc.item()


def fit(model: Model, train, validation, cfg: RegimeConfig) -> tuple[Model, TrainHistory]:
    """Train under the configured regime; returns the model restored to the
    parameters of the best-validation-loss epoch, plus the history."""
    cfg.validate()
    x_tr, y_tr = _as_xy(train)
    x_va, y_va = _as_xy(validation)
    rng = np.random.default_rng(cfg.seed)
    attacks = cfg.attacks_enabled()
    sched = EpsilonSchedule(cfg.epsilon_train, cfg.warmup_steps, cfg.ramp_steps)
    full_strength = cfg.warmup_steps + cfg.ramp_steps if attacks else 0

    opt = Adam([t for _, t in model.trainable()], cfg.learning_rate)
    hist = TrainHistory()
    best_val = np.inf
    best_state: dict[str, np.ndarray] | None = None
    fallback_val = np.inf
    fallback_state: dict[str, np.ndarray] | None = None
    fallback_epoch = -1
    es_bad = 0
    plateau_best = np.inf
    plateau_bad = 0
    step = 0
    n = len(x_tr)

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        losses, discs = [], []
        eps_now = 0.0
        epoch_lr = opt.lr
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            eps_now = epsilon_at(step, sched) if attacks else 0.0
            if attacks and step >= cfg.warmup_steps:
                objective, adv_val, disc_val = _step_objective(model, xb, yb, cfg, eps_now, rng)
            else:
                fp = forward(model, xb, training=True, rng=rng)
                objective = standard_loss(yb, positive_probability(fp))
                adv_val, disc_val = objective.item(), 0.0
            total = ad.add(objective, l2_penalty(model))
            grads = ad.backward(total)
            opt.step(grads)
            hist.steps.append(StepRecord(step, total.item(), objective.item(),
                                         adv_val, disc_val, eps_now, opt.lr))
            losses.append(total.item())
            discs.append(disc_val)
            step += 1
            model.step += 1
        val_loss = _validation_ce(model, x_va, y_va, cfg.batch_size)
        hist.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss,
                                       epoch_lr, eps_now, float(np.mean(discs))))
        if val_loss < fallback_val:
            fallback_val = val_loss
            fallback_state = model.state_copy()
            fallback_epoch = epoch
        armed = (not attacks) or step >= full_strength
        if armed:
            if val_loss < best_val - cfg.min_improvement:
                best_val = val_loss
                best_state = model.state_copy()
                hist.best_epoch = epoch
                es_bad = 0
            else:
                es_bad += 1
            if val_loss < plateau_best - cfg.min_improvement:
                plateau_best = val_loss
                plateau_bad = 0
            else:
                plateau_bad += 1
            if plateau_bad >= cfg.lr_plateau_patience:
                opt.lr *= cfg.lr_plateau_factor
                plateau_bad = 0
            if es_bad >= cfg.early_stop_patience:
                break
    if best_state is None:
        # run ended before full attack strength: best over all epochs instead
        best_state = fallback_state
        hist.best_epoch = fallback_epoch
    if best_state is not None:
        model.load_state(best_state)
    return model, hist
