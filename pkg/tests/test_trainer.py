import numpy as np
import pytest

from sgnet import autodiff as ad
from sgnet import model as M
from sgnet import trainer as T
from sgnet.attack import AttackConfig, EpsilonSchedule, epsilon_at, pgd
from sgnet.autodiff import Tensor
from sgnet.errors import ConfigError, ShapeError
from sgnet.gradcam import activation_map
from sgnet.model import ForwardPass, forward


def micro_model(seed=0):
    return M.init(M.ModelConfig(input_extents=(8, 8), conv_filters=(2, 2, 2)), seed=seed)


def toy_problem(n=128, seed=7, separation=1.5):
    r = np.random.default_rng(seed)
    x = r.normal(0, 0.3, size=(n, 1, 8, 8)).astype(np.float32)
    y = r.integers(0, 2, size=n)
    x[y == 1, 0, 2:6, 2:6] += separation
    return x, y


# ---------------------------------------------------------------------------
# standard loss
# ---------------------------------------------------------------------------

def test_standard_loss_perfect_prediction(f64):
    loss = T.standard_loss(np.array([1.0]), Tensor(np.array([1.0 - 1e-7])))
    assert loss.item() == pytest.approx(1e-7, rel=1e-2)


def test_standard_loss_uniform(f64):
    loss = T.standard_loss(np.array([1.0, 0.0]), Tensor(np.array([0.5, 0.5])))
    assert loss.item() == pytest.approx(np.log(2.0), rel=1e-9)


def test_standard_loss_matches_scalar_loop(f64, rng):
    y = rng.integers(0, 2, size=40).astype(np.float64)
    p = rng.uniform(0.001, 0.999, size=40)
    loss = T.standard_loss(y, Tensor(p)).item()
    acc = 0.0
    for yi, pi in zip(y, p):
        pi = min(max(pi, 1e-7), 1 - 1e-7)
        acc += yi * np.log(pi) + (1 - yi) * np.log(1 - pi)
    assert loss == pytest.approx(-acc / 40, abs=1e-7)


def test_standard_loss_shape_mismatch(f64):
    with pytest.raises(ShapeError):
        T.standard_loss(np.array([1.0, 0.0]), Tensor(np.array([0.5])))


def test_standard_loss_gradient(f64, rng):
    y = rng.integers(0, 2, size=12).astype(np.float64)
    p0 = rng.uniform(0.05, 0.95, size=12)
    err = ad.finite_diff_check(lambda t: T.standard_loss(y, t), Tensor(p0, requires_grad=True))
    assert err < 1e-7


# ---------------------------------------------------------------------------
# adversarial loss
# ---------------------------------------------------------------------------

def test_adversarial_loss_zero_eps_equals_standard(f64, rng):
    m = micro_model(1)
    x = rng.normal(size=(4, 1, 8, 8))
    y = np.array([0, 1, 1, 0])
    adv = T.adversarial_loss(m, x, y, AttackConfig(epsilon=0.0)).item()
    fp = forward(m, x, training=False)
    std = T.standard_loss(y, T.positive_probability(fp)).item()
    assert adv == std


def test_adversarial_loss_gradient_matches_fd(f64, rng):
    # the attack reruns per probe with frozen randomness; its dependence on the
    # parameters is piecewise constant, so finite differences remain valid
    m = micro_model(2)
    x = rng.normal(size=(2, 1, 8, 8))
    y = np.array([1, 0])
    cfg = AttackConfig(epsilon=0.05, n_iters=3, random_start=True)
    kernel = m.params["conv3.kernel"]

    def loss_fn(t):
        m.params["conv3.kernel"] = t
        try:
            return T.adversarial_loss(m, x, y, cfg, rng=np.random.default_rng(55))
        finally:
            m.params["conv3.kernel"] = kernel

    assert ad.finite_diff_check(loss_fn, kernel, h=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# interpretation discrepancy and adjusted loss
# ---------------------------------------------------------------------------

def test_discrepancy_zero_for_identical_inputs(f64, rng):
    m = micro_model(3)
    x = rng.normal(size=(3, 1, 8, 8))
    fp1 = forward(m, x, training=False)
    fp2 = forward(m, x, training=False)
    assert T.interpretation_discrepancy(fp1, fp2).item() == 0.0


def test_discrepancy_symmetry(f64, rng):
    m = micro_model(3)
    a = rng.normal(size=(3, 1, 8, 8))
    b = a + rng.normal(0, 0.05, size=a.shape)
    d_ab = T.interpretation_discrepancy(forward(m, a), forward(m, b)).item()
    d_ba = T.interpretation_discrepancy(forward(m, b), forward(m, a)).item()
    assert d_ab == pytest.approx(d_ba, rel=1e-12)
    assert d_ab > 0.0


def test_discrepancy_matches_hand_l1(f64, rng):
    m = micro_model(4)
    a = rng.normal(size=(2, 1, 8, 8))
    b = a + rng.normal(0, 0.1, size=a.shape)
    fa, fb = forward(m, a), forward(m, b)
    total = np.zeros(2)
    for c in (0, 1):
        ma = activation_map(fa, c, "detached").values.data
        mb = activation_map(fb, c, "detached").values.data
        total += np.abs(ma - mb).reshape(2, -1).sum(axis=1)
    expected = float(np.mean(0.5 * total))
    assert T.interpretation_discrepancy(fa, fb).item() == pytest.approx(expected, rel=1e-9)


def test_adjusted_loss_lambda_zero_equals_adversarial(f64, rng):
    m = micro_model(5)
    x = rng.normal(size=(3, 1, 8, 8))
    y = np.array([1, 0, 1])
    cfg = AttackConfig(epsilon=0.05, n_iters=2, random_start=True)
    a = T.adjusted_loss(m, x, y, cfg, lambda_interp=0.0, rng=np.random.default_rng(7)).item()
    b = T.adversarial_loss(m, x, y, cfg, rng=np.random.default_rng(7)).item()
    assert a == b


def test_adjusted_loss_composition(f64, rng):
    # L_adj = CE(x_adv) + lambda * discrepancy(x, x_adv) with the same x_adv
    m = micro_model(6)
    x = rng.normal(size=(2, 1, 8, 8))
    y = np.array([0, 1])
    lam = 2.0
    cfg = AttackConfig(epsilon=0.08, n_iters=2, random_start=False)
    total = T.adjusted_loss(m, x, y, cfg, lambda_interp=lam).item()
    refs = T.reference_maps(m, x)
    objective = T.make_adjusted_objective(refs, lam)
    x_adv = pgd(m, x, y, cfg, loss=objective)
    fp_adv = forward(m, x_adv.data, training=False)
    ce = T.standard_loss(y, T.positive_probability(fp_adv)).item()
    disc = T.interpretation_discrepancy(forward(m, x), fp_adv).item()
    assert total == pytest.approx(ce + lam * disc, rel=1e-12)
    # the trivial arithmetic case: 0.5 + 2 * 0.25 = 1.0
    assert 0.5 + lam * 0.25 == 1.0


def test_adjusted_loss_gradient_detached_mode(f64, rng):
    m = micro_model(7)
    x = rng.normal(size=(2, 1, 8, 8))
    y = np.array([1, 0])
    cfg = AttackConfig(epsilon=0.05, n_iters=2, random_start=True)
    kernel = m.params["conv2.kernel"]

    def loss_fn(t):
        m.params["conv2.kernel"] = t
        try:
            return T.adjusted_loss(m, x, y, cfg, lambda_interp=1.5,
                                   rng=np.random.default_rng(31), saliency_grad="detached")
        finally:
            m.params["conv2.kernel"] = kernel

    assert ad.finite_diff_check(loss_fn, kernel, h=1e-5) < 1e-4


def test_detached_vs_full_losses_equal_gradients_differ(f64, rng):
    m = micro_model(8)
    x = rng.normal(size=(2, 1, 8, 8))
    y = np.array([1, 0])
    cfg = AttackConfig(epsilon=0.06, n_iters=2, random_start=False)
    dense_w = m.params["dense.weight"]

    losses, grads = {}, {}
    for mode in ("detached", "full"):
        loss = T.adjusted_loss(m, x, y, cfg, lambda_interp=2.0, saliency_grad=mode)
        losses[mode] = loss.item()
        grads[mode] = ad.grad(loss, [dense_w])[0].data.copy()
    assert losses["detached"] == pytest.approx(losses["full"], rel=1e-12)
    assert np.max(np.abs(grads["detached"] - grads["full"])) > 1e-9


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------

def fast_cfg(**kw):
    base = dict(regime="normal", max_epochs=30, early_stop_patience=30,
                lr_plateau_patience=30, batch_size=16, seed=1)
    base.update(kw)
    return T.RegimeConfig(**base)


def test_fit_reaches_high_accuracy_on_separable_toy():
    with ad.checked(False):
        x, y = toy_problem(n=200)
        m = micro_model(1)
        cfg = fast_cfg(max_epochs=200, early_stop_patience=200, lr_plateau_patience=200)
        m, hist = T.fit(m, (x[:160], y[:160]), (x[160:], y[160:]), cfg)
        scores = M.predict_proba(m, x[:160]).data[:, 1]
        acc = np.mean((scores > 0.5).astype(int) == y[:160])
        assert acc >= 0.99
        assert len(hist.epochs) <= 200


def test_fit_empty_split_rejected():
    m = micro_model(1)
    x, y = toy_problem(n=8)
    with pytest.raises(ConfigError):
        T.fit(m, (x[:0], y[:0]), (x, y), fast_cfg())


def test_history_epsilon_column_follows_schedule():
    with ad.checked(False):
        x, y = toy_problem(n=64)
        cfg = fast_cfg(regime="adversarial", epsilon_train=0.2, warmup_steps=12,
                       ramp_steps=20, attack_iters=2, max_epochs=12)
        m = micro_model(2)
        _, hist = T.fit(m, (x[:48], y[:48]), (x[48:], y[48:]), cfg)
        sched = EpsilonSchedule(0.2, 12, 20)
        for rec in hist.steps:
            assert rec.epsilon == epsilon_at(rec.step, sched)
        assert hist.steps[-1].epsilon == 0.2  # reached full strength


def test_history_epsilon_under_default_schedule_is_zero_before_400():
    with ad.checked(False):
        x, y = toy_problem(n=32)
        cfg = fast_cfg(regime="adversarial", epsilon_train=0.1, max_epochs=5)
        m = micro_model(2)
        _, hist = T.fit(m, (x[:24], y[:24]), (x[24:], y[24:]), cfg)
        assert all(r.epsilon == 0.0 for r in hist.steps)  # 10 steps < 400 warmup


def test_lr_plateau_drops_by_exact_factor():
    with ad.checked(False):
        x, y = toy_problem(n=32, separation=0.0)  # unlearnable: val loss plateaus
        cfg = fast_cfg(max_epochs=26, lr_plateau_patience=5, early_stop_patience=100,
                       min_improvement=10.0)  # improvement threshold never met
        m = micro_model(3)
        _, hist = T.fit(m, (x[:24], y[:24]), (x[24:], y[24:]), cfg)
        lrs = [r.lr for r in hist.epochs]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        distinct = sorted(set(lrs), reverse=True)
        assert len(distinct) >= 3
        for hi, lo in zip(distinct, distinct[1:]):
            assert lo / hi == pytest.approx(0.8, rel=1e-9)


def test_early_stopping_returns_best_epoch_params():
    with ad.checked(False):
        x, y = toy_problem(n=96)
        cfg = fast_cfg(max_epochs=60, early_stop_patience=8, lr_plateau_patience=4)
        m = micro_model(4)
        m, hist = T.fit(m, (x[:64], y[:64]), (x[64:], y[64:]), cfg)
        val = T._validation_ce(m, x[64:], y[64:], 16)
        assert val <= hist.epochs[-1].val_loss + 1e-9
        assert hist.best_epoch >= 0
        assert val == pytest.approx(hist.epochs[hist.best_epoch].val_loss, abs=1e-8)


def test_interp_lambda_zero_degenerates_to_adversarial_stepwise():
    with ad.checked(False):
        x, y = toy_problem(n=48)
        kw = dict(epsilon_train=0.15, warmup_steps=6, ramp_steps=12, attack_iters=2,
                  attack_random_start=False, max_epochs=10)
        runs = {}
        for regime in ("adversarial", "interp_aware"):
            m = micro_model(5)
            cfg = fast_cfg(regime=regime, lambda_interp=0.0, **kw)
            _, hist = T.fit(m, (x[:32], y[:32]), (x[32:], y[32:]), cfg)
            runs[regime] = [r.loss for r in hist.steps]
        a, b = runs["adversarial"], runs["interp_aware"]
        assert len(a) == len(b)
        assert max(abs(u - v) for u, v in zip(a, b)) < 1e-6


def test_adversarial_at_zero_eps_matches_normal_stepwise():
    with ad.checked(False):
        x, y = toy_problem(n=48)
        runs = {}
        for regime in ("normal", "adversarial"):
            m = micro_model(6)
            cfg = fast_cfg(regime=regime, epsilon_train=0.0, warmup_steps=4, ramp_steps=8,
                           attack_random_start=False, max_epochs=8)
            _, hist = T.fit(m, (x[:32], y[:32]), (x[32:], y[32:]), cfg)
            runs[regime] = [r.loss for r in hist.steps]
        diffs = [abs(u - v) for u, v in zip(runs["normal"], runs["adversarial"])]
        assert max(diffs) < 1e-6


def test_step_log_decomposition():
    with ad.checked(False):
        x, y = toy_problem(n=48)
        lam = 2.5
        cfg = fast_cfg(regime="interp_aware", lambda_interp=lam, epsilon_train=0.2,
                       warmup_steps=4, ramp_steps=8, attack_iters=2, max_epochs=10)
        m = micro_model(7)
        _, hist = T.fit(m, (x[:32], y[:32]), (x[32:], y[32:]), cfg)
        attacked = [r for r in hist.steps if r.epsilon > 0]
        assert attacked
        for r in attacked:
            assert r.objective - lam * r.discrepancy == pytest.approx(r.adv_loss, abs=1e-6)


def test_history_csv_columns(tmp_path):
    with ad.checked(False):
        x, y = toy_problem(n=32)
        m = micro_model(8)
        _, hist = T.fit(m, (x[:24], y[:24]), (x[24:], y[24:]), fast_cfg(max_epochs=3))
        path = tmp_path / "hist.csv"
        hist.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,epsilon,discrepancy"
        assert len(lines) == 4


def test_lambda_pressure_reduces_discrepancy():
    # stronger saliency-consistency pressure -> lower post-training map drift
    # under a fixed input perturbation (median over 5 seeds)
    with ad.checked(False):
        x, y = toy_problem(n=64, seed=3)
        probe_rng = np.random.default_rng(123)
        delta = probe_rng.uniform(-0.2, 0.2, size=(16, 1, 8, 8)).astype(np.float32)
        results = {}
        for lam in (0.0, 1.0, 10.0):
            per_seed = []
            for seed in range(5):
                m = micro_model(40 + seed)
                cfg = fast_cfg(regime="interp_aware", lambda_interp=lam,
                               epsilon_train=0.2, warmup_steps=8, ramp_steps=16,
                               attack_iters=2, max_epochs=18, seed=100 + seed)
                m, _ = T.fit(m, (x[:48], y[:48]), (x[48:], y[48:]), cfg)
                fa = forward(m, x[:16])
                fb = forward(m, x[:16] + delta)
                per_seed.append(T.interpretation_discrepancy(fa, fb).item())
            results[lam] = float(np.median(per_seed))
        assert results[1.0] <= results[0.0] + 1e-9
        assert results[10.0] <= results[1.0] + 1e-9
