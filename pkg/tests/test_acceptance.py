"""End-to-end acceptance gates.

One test per gate, named test_criterion_N_*, each printing its measured
numbers. The two desk-scale models train once per session and are shared;
the determinism gate retrains from scratch and byte-compares the emitted
CSV reports.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats

import blindspot.autodiff as ad
from blindspot.attacks import (
    CwOptions,
    attack_success,
    attack_suite,
    cw_linf_attack,
    cw_linf_attack_batch,
    pgd_min_distortion,
    pgd_min_distortion_batch,
)
from blindspot.data import Dataset, mnist_dataset
from blindspot.geometry import kde_fit, kl_divergence, knn_distance, knn_distances
from blindspot.harness import (
    bin_success_by_distance,
    blindspot_grid,
    pgd_attack_success_rate,
)
from blindspot.nn import Flatten, Linear, Model, build_small_cnn, extract_features_batched
from blindspot.reports import emit_report
from blindspot.training import (
    AdversarialConfig,
    TrainConfig,
    evaluate_accuracy,
    train_adversarial,
    train_natural,
)
from blindspot.transform import TransformParams

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "mnist"
ARCH = dict(conv_channels=(8, 16), fc_widths=(256,), kernel_size=3)
EPSILON = 0.3
TRAIN_SIZE = 10000
TEST_SIZE = 1000
ATTACK_SIZE = 500
SEED = 0


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def mnist_sets():
    train = mnist_dataset(DATA_DIR, "train").take(TRAIN_SIZE)
    test = mnist_dataset(DATA_DIR, "test").take(TEST_SIZE)
    return train, test


_train_minutes = {}


def _train_robust(train_set):
    model = build_small_cnn(seed=SEED, **ARCH)
    config = TrainConfig(
        epochs=10, batch_size=50, learning_rate=1e-3, optimizer="adam", seed=SEED,
        adversarial=AdversarialConfig(epsilon=EPSILON, pgd_steps=40, pgd_step_size=0.01),
    )
    started = time.perf_counter()
    train_adversarial(model, train_set, config)
    _train_minutes.setdefault("robust", (time.perf_counter() - started) / 60.0)
    return model


def _train_natural(train_set):
    model = build_small_cnn(seed=SEED, **ARCH)
    config = TrainConfig(
        epochs=10, batch_size=50, learning_rate=1e-3, optimizer="adam", seed=SEED,
    )
    train_natural(model, train_set, config)
    return model


@pytest.fixture(scope="session")
def robust_model(mnist_sets):
    return _train_robust(mnist_sets[0])


@pytest.fixture(scope="session")
def natural_model(mnist_sets):
    return _train_natural(mnist_sets[0])


def _attack_and_bin(model, train_set, test_set):
    """The distance-vs-success pipeline shared by criteria 5, 8 and 9."""
    subset = Dataset(
        test_set.images[:ATTACK_SIZE], test_set.labels[:ATTACK_SIZE], split="test"
    )
    suite = attack_suite(model, subset, [EPSILON], method="pgd")
    successes = np.array([attack_success(r, EPSILON) for r in suite.results])
    train_feats = extract_features_batched(model, train_set.images)
    test_feats = extract_features_batched(model, subset.images[suite.indices])
    return suite, successes, train_feats, test_feats


def _binned_report(train_feats, test_feats, successes, k):
    distances = knn_distances(test_feats, train_feats, k=k, p=2)
    return bin_success_by_distance(
        distances, successes, bins=20, min_bin_count=10,
        metadata={"k": k, "p": "2", "epsilon": EPSILON, "method": "pgd"},
    )


def _grid_report(model, test_set):
    subset = Dataset(
        test_set.images[:ATTACK_SIZE], test_set.labels[:ATTACK_SIZE], split="test"
    )
    return blindspot_grid(
        model, subset, "mnist", EPSILON,
        params=[TransformParams(1.0, 0.0), TransformParams(0.8, 0.1)], method="pgd",
    )


@pytest.fixture(scope="session")
def attack_outcomes(robust_model, mnist_sets):
    train_set, test_set = mnist_sets
    return _attack_and_bin(robust_model, train_set, test_set)


@pytest.fixture(scope="session")
def first_run_reports(robust_model, mnist_sets, attack_outcomes, tmp_path_factory):
    """CSVs from the first execution of the criteria 4-6 pipelines."""
    train_set, test_set = mnist_sets
    suite, successes, train_feats, test_feats = attack_outcomes
    out = tmp_path_factory.mktemp("first-run")
    suite_csv, _ = emit_report(suite, out)
    binned_csv, _ = emit_report(_binned_report(train_feats, test_feats, successes, 5), out)
    grid_csv, _ = emit_report(_grid_report(robust_model, test_set), out)
    return suite_csv, binned_csv, grid_csv


def _spearman(report):
    idx = np.flatnonzero(report.mask)
    return float(scipy.stats.spearmanr(idx, report.success_rates[idx]).statistic)


# ------------------------------------------------- criterion 1: gradients


def _max_rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


def _op_scenarios(rng):
    """One random instance per differentiable operation, kink-free inputs."""

    def away_from_zero(shape, margin=0.2):
        vals = rng.uniform(margin, 1.5, size=shape)
        return vals * rng.choice([-1.0, 1.0], size=shape)

    def distinct(shape, span=2.0):
        flat = np.linspace(-span, span, int(np.prod(shape)))
        return (flat[rng.permutation(flat.size)] + rng.normal(0, 0.01, flat.size)).reshape(shape)

    a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    m1 = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    m2 = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    bias = ad.Tensor(rng.normal(size=(5,)), requires_grad=True)
    xb = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    xr = ad.Tensor(away_from_zero((4, 4)), requires_grad=True)
    xa = ad.Tensor(away_from_zero((4, 4)), requires_grad=True)
    xs = ad.Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    xc = ad.Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    kc = ad.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    xp = ad.Tensor(distinct((2, 2, 6, 6)), requires_grad=True)
    xo = ad.Tensor(distinct((1, 1, 5, 5)), requires_grad=True)
    logits = ad.Tensor(distinct((4, 6), span=1.5), requires_grad=True)
    labels = rng.integers(0, 6, size=4)
    margins = ad.Tensor(distinct((4, 6), span=1.5), requires_grad=True)

    return [
        ("add", lambda t, u: ad.sum_all(ad.add(t, u)), (a, b)),
        ("sub", lambda t, u: ad.sum_all(ad.sub(t, u)), (a, b)),
        ("mul", lambda t, u: ad.sum_all(ad.mul(t, u)), (a, b)),
        ("scale", lambda t: ad.sum_all(ad.scale(t, 1.7)), (a,)),
        ("matmul", lambda t, u: ad.sum_all(ad.matmul(t, u)), (m1, m2)),
        ("add_bias", lambda t, u: ad.sum_all(ad.add_bias(t, u)), (xb, bias)),
        ("relu", lambda t: ad.sum_all(ad.relu(t)), (xr,)),
        ("absolute", lambda t: ad.sum_all(ad.absolute(t)), (xa,)),
        ("reshape", lambda t: ad.sum_all(ad.mul(ad.reshape(t, (3, 4)), ad.reshape(t, (3, 4)))), (xs,)),
        ("sum_all", lambda t: ad.sum_all(t), (a,)),
        ("class_margin", lambda t: ad.sum_all(ad.class_margin(t, labels)), (margins,)),
        ("conv2d", lambda t, u: ad.sum_all(ad.conv2d(t, u, stride=1, padding=1)), (xc, kc)),
        ("conv2d_strided", lambda t, u: ad.sum_all(ad.conv2d(t, u, stride=2, padding=0)), (xc, kc)),
        ("maxpool2d", lambda t: ad.sum_all(ad.maxpool2d(t, 2, 2)), (xp,)),
        ("maxpool2d_overlap", lambda t: ad.sum_all(ad.maxpool2d(t, 3, 1)), (xo,)),
        ("softmax_cross_entropy", lambda t: ad.softmax_cross_entropy(t, labels), (logits,)),
    ]


def test_criterion_1_gradients_match_finite_differences():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    probes = 0

    # operation probes: five drawn instances of every operation
    for round_idx in range(5):
        for name, fn, tensors in _op_scenarios(rng):
            with ad.Tape() as tape:
                loss = fn(*tensors)
            ad.backward(loss, tape)
            for pos, tensor in enumerate(tensors):
                others = list(tensors)

                def partial(t, _pos=pos, _others=others, _fn=fn):
                    args = list(_others)
                    args[_pos] = t
                    return _fn(*args)

                numeric = ad.finite_difference_gradient(partial, tensor, step=1e-5)
                worst = max(worst, _max_rel_err(tensor.grad, numeric.data))
                probes += 1

    # model probes: sampled parameter coordinates of a 2-conv + 2-fc net
    model = build_small_cnn(
        input_shape=(1, 12, 12), conv_channels=(4, 8), fc_widths=(32,),
        kernel_size=3, seed=SEED,
    )
    model.set_trainable(True)
    x = rng.normal(size=(3, 1, 12, 12)) * 0.2
    y = rng.integers(0, 10, size=3)

    def model_loss():
        return float(ad.softmax_cross_entropy(model.forward(x), y).data)

    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(model.forward(x), y)
    ad.backward(loss, tape)
    params = list(model.parameters())
    h = 1e-5
    for _ in range(20):
        _, tensor = params[rng.integers(0, len(params))]
        flat = tensor.data.reshape(-1)
        coord = int(rng.integers(0, flat.size))
        original = flat[coord]
        flat[coord] = original + h
        f_plus = model_loss()
        flat[coord] = original - h
        f_minus = model_loss()
        flat[coord] = original
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = tensor.grad.reshape(-1)[coord]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
        probes += 1

    elapsed = time.perf_counter() - started
    print(f"criterion 1: {probes} probes, max relative error {worst:.3e}, {elapsed:.1f}s")
    assert probes >= 100
    assert worst < 1e-4
    assert elapsed < 60.0


# -------------------------------------------- criterion 2: oracle equality


def _dyadic(rng, shape):
    """Multiples of 1/16 in [-8, 8]; sums of products stay exact in float64,
    so exact equality is independent of summation order."""
    return rng.integers(-128, 129, size=shape).astype(np.float64) / 16.0


def _knn_oracle(test_vec, train_rows, k, p):
    if p == np.inf:
        dists = np.abs(train_rows - test_vec).max(axis=1)
    elif p == 1:
        dists = np.abs(train_rows - test_vec).sum(axis=1)
    else:
        dists = np.sqrt(((train_rows - test_vec) ** 2).sum(axis=1))
    return float(np.sort(dists, kind="stable")[:k].mean())


def _conv_oracle(x, w, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for oi in range(ho):
                for oj in range(wo):
                    patch = xp[ni, :, oi * stride : oi * stride + kh,
                               oj * stride : oj * stride + kw]
                    out[ni, fi, oi, oj] = np.sum(patch * w[fi])
    return out


def _pool_oracle(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    out[ni, ci, oi, oj] = x[ni, ci, oi * stride : oi * stride + window,
                                            oj * stride : oj * stride + window].max()
    return out


def test_criterion_2_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED)

    knn_checked = 0
    for _ in range(500):
        n = int(rng.integers(1, 201))
        d = int(rng.integers(1, 21))
        k = int(rng.integers(1, min(n, 10) + 1))
        p = rng.choice([1.0, 2.0, np.inf])
        train_rows = rng.normal(size=(n, d))
        vec = rng.normal(size=d)
        got = knn_distance(vec, train_rows, k=k, p=p)
        want = _knn_oracle(vec, train_rows, k, p)
        assert got == want
        knn_checked += 1

    conv_checked = 0
    for _ in range(25):
        n, c, f = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
        h, w = rng.integers(3, 9), rng.integers(3, 9)
        kh = int(rng.integers(1, min(h, 3) + 1))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        x = _dyadic(rng, (int(n), int(c), int(h), int(w)))
        kern = _dyadic(rng, (int(f), int(c), kh, kh))
        got = ad.conv2d(ad.Tensor(x), ad.Tensor(kern), stride=stride, padding=padding)
        np.testing.assert_array_equal(got.data, _conv_oracle(x, kern, stride, padding))
        conv_checked += 1

    pool_checked = 0
    for window, stride in [(2, 2), (3, 1), (2, 3), (3, 3), (2, 1)]:
        for _ in range(5):
            n, c = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            h = int(rng.integers(window, 9))
            w = int(rng.integers(window, 9))
            x = _dyadic(rng, (n, c, h, w))
            got = ad.maxpool2d(ad.Tensor(x), window, stride)
            np.testing.assert_array_equal(got.data, _pool_oracle(x, window, stride))
            pool_checked += 1

    elapsed = time.perf_counter() - started
    print(f"criterion 2: knn {knn_checked}, conv {conv_checked}, pool {pool_checked} "
          f"instances exact, {elapsed:.1f}s")
    assert elapsed < 60.0


# -------------------------------------------- criterion 3: KDE/KL numerics


def test_criterion_3_kde_and_kl_numerics():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED)

    sample = np.concatenate([
        rng.normal(loc=(-1.0, 0.5), scale=0.6, size=(250, 2)),
        rng.normal(loc=(1.5, -0.5), scale=0.9, size=(250, 2)),
    ])
    model = kde_fit(sample)
    pad = 6.0 * model.bandwidths.max()
    lo = sample.min(axis=0) - pad
    hi = sample.max(axis=0) + pad
    grid = 512
    xs = lo[0] + (np.arange(grid) + 0.5) * (hi[0] - lo[0]) / grid
    ys = lo[1] + (np.arange(grid) + 0.5) * (hi[1] - lo[1]) / grid
    cell = (hi[0] - lo[0]) / grid * (hi[1] - lo[1]) / grid
    integral = float(model.density_grid(xs, ys).sum() * cell)

    same = kl_divergence(model, model, grid=256)

    p_sample = rng.normal(size=(5000, 2))
    q_sample = rng.normal(size=(5000, 2)) + np.array([1.0, 0.0])
    shifted = kl_divergence(kde_fit(p_sample), kde_fit(q_sample), grid=256)

    elapsed = time.perf_counter() - started
    print(f"criterion 3: integral {integral:.5f}, KL(p,p) {same:.2e}, "
          f"shifted-Gaussian KL {shifted:.4f} (closed form 0.5), {elapsed:.1f}s")
    assert abs(integral - 1.0) <= 0.01
    assert abs(same) <= 5e-3
    assert abs(shifted - 0.5) <= 0.1
    assert elapsed < 120.0


# ------------------------------- criterion 4: adversarial training efficacy


@pytest.mark.slow
def test_criterion_4_adversarial_training_efficacy(robust_model, natural_model, mnist_sets):
    _, test_set = mnist_sets
    clean_robust = evaluate_accuracy(robust_model, test_set)
    clean_natural = evaluate_accuracy(natural_model, test_set)
    success_robust = pgd_attack_success_rate(robust_model, test_set, EPSILON)
    success_natural = pgd_attack_success_rate(natural_model, test_set, EPSILON)
    minutes = _train_minutes.get("robust", float("nan"))
    print(f"criterion 4: clean accuracy robust {clean_robust:.4f} "
          f"(natural {clean_natural:.4f}); PGD-40 success robust {success_robust:.4f} "
          f"<= 0.40, natural {success_natural:.4f} >= 0.90; "
          f"adversarial training {minutes:.1f} min (target < 30)")
    assert clean_robust >= 0.95
    assert success_robust <= 0.40
    assert success_natural >= 0.90


# --------------------------- criterion 5: distance-success correlation trend


@pytest.mark.slow
def test_criterion_5_distance_success_correlation(attack_outcomes):
    _, successes, train_feats, test_feats = attack_outcomes
    report = _binned_report(train_feats, test_feats, successes, k=5)
    corr = _spearman(report)
    print(f"criterion 5: {successes.size} attacked points, "
          f"{int(report.mask.sum())} defined bins, Spearman {corr:.4f} > 0.5")
    assert corr > 0.5


# ------------------------------------------- criterion 6: blind-spot trend


@pytest.mark.slow
def test_criterion_6_blindspot_trend(robust_model, mnist_sets):
    _, test_set = mnist_sets
    grid = _grid_report(robust_model, test_set)
    base, shifted = grid.rows[0], grid.rows[1]
    assert base.error == "" and shifted.error == ""
    ratio = shifted.rate_at_strict / max(base.rate_at_strict, 1e-12)
    acc_gap = abs(shifted.accuracy - base.accuracy)
    print(f"criterion 6: strict success {base.rate_at_strict:.4f} at (1.0, 0) vs "
          f"{shifted.rate_at_strict:.4f} at (0.8, 0.1), ratio {ratio:.2f} >= 3, "
          f"accuracy gap {acc_gap * 100:.2f}pp <= 2")
    assert shifted.rate_at_strict >= 3.0 * base.rate_at_strict
    assert acc_gap <= 0.02


# ----------------------------------------------- criterion 7: attack tightness


def _linear_fixture(seed=0, target_delta=0.08):
    rng = np.random.default_rng(seed)
    w_delta = rng.uniform(0.5, 1.5, size=16) * rng.choice([-1.0, 1.0], size=16)
    x = rng.uniform(-0.3, 0.3, size=(1, 1, 4, 4))
    margin = float(w_delta @ x.reshape(-1))
    wanted = target_delta * np.abs(w_delta).sum()
    bias_delta = wanted - margin
    w = np.zeros((16, 2))
    w[:, 0] = w_delta / 2.0
    w[:, 1] = -w_delta / 2.0
    b = np.array([bias_delta / 2.0, -bias_delta / 2.0])
    params = {"fc1.weight": ad.Tensor(w), "fc1.bias": ad.Tensor(b)}
    model = Model(
        input_shape=(1, 4, 4),
        layers=[Flatten(), Linear("fc1.weight", "fc1.bias")],
        params=params, feature_taps={"fc1": 1}, arch={"kind": "linear-fixture"},
    )
    delta_star = (margin + bias_delta) / np.abs(w_delta).sum()
    return model, x, delta_star


@pytest.mark.slow
def test_criterion_7_attack_tightness(natural_model, mnist_sets):
    model, x, delta_star = _linear_fixture(seed=SEED)
    opts = CwOptions(iterations=600, tau_decay=0.97, c_doublings=2, seed=SEED)
    cw = cw_linf_attack(model, x[0], 0, opts)
    assert cw.converged
    cw_err = abs(cw.linf_distortion - delta_star) / delta_star

    pgd = pgd_min_distortion(model, x[0], 0, tol=0.002)
    assert pgd.converged
    pgd_err = abs(pgd.linf_distortion - delta_star) / delta_star

    _, test_set = mnist_sets
    preds = np.argmax(natural_model.forward(test_set.images[:200]).data, axis=1)
    correct = np.flatnonzero(preds == test_set.labels[:200])[:100]
    images = test_set.images[correct]
    labels = test_set.labels[correct]
    cw_batch = cw_linf_attack_batch(
        natural_model, images, labels,
        CwOptions(iterations=500, tau_decay=0.95, c_doublings=4, seed=SEED),
    )
    pgd_batch = pgd_min_distortion_batch(natural_model, images, labels, tol=0.01)
    tol = 0.01
    tighter = sum(
        1 for c, p in zip(cw_batch, pgd_batch)
        if c.converged and p.converged and c.linf_distortion <= p.linf_distortion + tol
    )
    print(f"criterion 7: linear C&W error {cw_err * 100:.2f}% <= 5%, "
          f"PGD error {pgd_err * 100:.2f}% <= 5%; "
          f"C&W <= PGD + tol on {tighter}/100 CNN samples >= 90")
    assert cw_err <= 0.05
    assert pgd_err <= 0.05
    assert tighter >= 90


# ------------------------------------------------ criterion 8: determinism


@pytest.mark.slow
def test_criterion_8_reports_are_reproducible(first_run_reports, mnist_sets, tmp_path):
    train_set, test_set = mnist_sets
    model = _train_robust(train_set)
    suite, successes, train_feats, test_feats = _attack_and_bin(model, train_set, test_set)
    suite_csv, _ = emit_report(suite, tmp_path)
    binned_csv, _ = emit_report(_binned_report(train_feats, test_feats, successes, 5), tmp_path)
    grid_csv, _ = emit_report(_grid_report(model, test_set), tmp_path)
    pairs = list(zip(first_run_reports, (suite_csv, binned_csv, grid_csv)))
    identical = [first.read_bytes() == second.read_bytes() for first, second in pairs]
    print(f"criterion 8: byte-identical reports on rerun: "
          f"suite={identical[0]}, binned={identical[1]}, grid={identical[2]}")
    assert all(identical)


# --------------------------------------------- criterion 9: k-robustness


@pytest.mark.slow
def test_criterion_9_correlation_robust_to_k(attack_outcomes):
    _, successes, train_feats, test_feats = attack_outcomes
    correlations = {}
    for k in (5, 10, 100):
        report = _binned_report(train_feats, test_feats, successes, k=k)
        correlations[k] = _spearman(report)
    print("criterion 9: Spearman by k: "
          + ", ".join(f"k={k}: {v:.4f}" for k, v in correlations.items()))
    for k, corr in correlations.items():
        assert corr > 0.5, f"correlation {corr:.4f} at k={k}"
