"""Minimal-distortion L-inf attacks and the success-rate harness.

The main attack minimizes c*f(x') + sum_i max(0, |x'_i - x_i| - tau)
where f is the hinge on the logit margin, so only pixels exceeding the
moving budget tau are penalized. tau is pinned to the distortion of the
first misclassifying iterate and decays by a fixed factor every time
the whole perturbation fits under it; the penalty weight c doubles when
a budget level stalls. Two starting points are tried per image, the
original plus Gaussian noise and a blank gray image, keeping the best
successful result of either.

A binary-search wrapper around the PGD perturber serves as a coarser
second opinion: it finds the smallest ball radius at which a fixed PGD
schedule still flips the prediction.

Every example evolves independently (its own penalty weight, budget,
optimizer state, and hash-derived noise seed), so batched runs give
results identical to one-at-a-time runs regardless of grouping or
ordering.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import ValidationError
from .nn import Model
from .training import _frozen, _pgd

__all__ = [
    "AttackResult",
    "CwOptions",
    "SuiteReport",
    "cw_linf_attack",
    "cw_linf_attack_batch",
    "pgd_min_distortion",
    "pgd_min_distortion_batch",
    "attack_success",
    "attack_suite",
]

_SEARCH, _REFINE, _DONE = 0, 1, 2


@dataclass
class AttackResult:
    """One attacked image; distortions are recomputed from the pixels."""

    original: np.ndarray
    adversarial: np.ndarray
    true_label: int
    original_pred: int
    adversarial_pred: int
    linf_distortion: float
    l2_distortion: float
    converged: bool

    @classmethod
    def build(cls, original, adversarial, true_label, original_pred, adversarial_pred, converged):
        original = np.asarray(original, dtype=np.float64)
        adversarial = np.asarray(adversarial, dtype=np.float64)
        if original.shape != adversarial.shape:
            raise ValidationError("original and adversarial shapes differ")
        if np.abs(adversarial).max() > 0.5:
            raise ValidationError("adversarial image leaves the valid pixel range")
        diff = adversarial - original
        return cls(
            original=original,
            adversarial=adversarial,
            true_label=int(true_label),
            original_pred=int(original_pred),
            adversarial_pred=int(adversarial_pred),
            linf_distortion=float(np.abs(diff).max()),
            l2_distortion=float(np.sqrt(np.sum(diff * diff))),
            converged=bool(converged),
        )


@dataclass(frozen=True)
class CwOptions:
    iterations: int = 1000
    initial_c: float = 1.0
    c_doublings: int = 5
    tau_decay: float = 0.9
    learning_rate: float = 5e-3
    min_tau: float = 1.0 / 256.0
    noise_std: float = 0.2
    inits: Sequence[str] = ("noise", "gray")
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be at least 1")
        if self.initial_c <= 0 or self.learning_rate <= 0 or self.min_tau <= 0:
            raise ValidationError("initial_c, learning_rate, and min_tau must be positive")
        if not 0.0 < self.tau_decay < 1.0:
            raise ValidationError("tau_decay must be in (0, 1)")
        if self.c_doublings < 0 or self.noise_std < 0:
            raise ValidationError("c_doublings and noise_std must be nonnegative")
        if not self.inits or any(s not in ("noise", "gray") for s in self.inits):
            raise ValidationError(f"inits must be drawn from noise/gray, got {self.inits!r}")


def _example_rng(image: np.ndarray, label: int, tag: str, seed: int) -> np.random.Generator:
    """Generator keyed to the example's content, not its batch position."""
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(image, dtype="<f8").tobytes())
    h.update(int(label).to_bytes(8, "little", signed=True))
    h.update(tag.encode("utf-8"))
    h.update(int(seed).to_bytes(8, "little", signed=True))
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


def _predict(model: Model, images: np.ndarray) -> np.ndarray:
    return np.argmax(model.forward(images).data, axis=1)


def _cw_scheme(model, x0, y, scheme, opts):
    """One initialization scheme over a whole batch.

    Returns (best adversarial images, best L-inf, predictions on the
    best images, success flags). Failed rows carry the original image.
    """
    n = x0.shape[0]
    if scheme == "noise":
        x = np.empty_like(x0)
        for i in range(n):
            rng = _example_rng(x0[i], y[i], "cw-noise", opts.seed)
            x[i] = np.clip(x0[i] + rng.normal(0.0, opts.noise_std, size=x0[i].shape), -0.5, 0.5)
    else:
        x = np.zeros_like(x0)

    tau = np.full(n, np.inf)
    c = np.full(n, float(opts.initial_c))
    phase = np.full(n, _SEARCH)
    iters_left = np.full(n, opts.iterations)
    doubles = np.zeros(n, dtype=np.int64)
    best = x0.copy()
    best_linf = np.full(n, np.inf)
    best_pred = y.copy()
    m = np.zeros_like(x0)
    v = np.zeros_like(x0)
    t = np.zeros(n, dtype=np.int64)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

    def reset_rows(rows):
        iters_left[rows] = opts.iterations
        m[rows] = 0.0
        v[rows] = 0.0
        t[rows] = 0

    active = np.flatnonzero(phase < _DONE)
    while active.size:
        xa = x[active]
        x0a = x0[active]
        ya = y[active]
        tau_a = tau[active]

        xt = ad.Tensor(xa, requires_grad=True)
        with ad.Tape() as tape:
            logits = model.forward(xt)
            hinge = ad.relu(ad.class_margin(logits, ya))
            margin_term = ad.sum_all(ad.mul(hinge, ad.Tensor(c[active])))
            excess = ad.sub(
                ad.absolute(ad.sub(xt, ad.Tensor(x0a))),
                ad.Tensor(np.broadcast_to(tau_a.reshape(-1, 1, 1, 1), xa.shape).copy()),
            )
            loss = ad.add(margin_term, ad.sum_all(ad.relu(excess)))
        ad.backward(loss, tape)
        grad = xt.grad

        # Bookkeeping on the current iterate, before any update.
        preds = np.argmax(logits.data, axis=1)
        linf = np.abs(xa - x0a).reshape(active.size, -1).max(axis=1)
        succ = preds != ya
        fits = succ & np.where(phase[active] == _SEARCH, True, linf <= tau_a)

        event_rows = active[fits]
        if event_rows.size:
            cur = linf[fits]
            improved = cur < best_linf[event_rows]
            upd = event_rows[improved]
            best[upd] = xa[fits][improved]
            best_linf[upd] = cur[improved]
            best_pred[upd] = preds[fits][improved]
            tau[event_rows] = opts.tau_decay * np.minimum(tau[event_rows], cur)
            phase[event_rows] = np.where(
                tau[event_rows] < opts.min_tau, _DONE, _REFINE
            )
            reset_rows(event_rows[phase[event_rows] != _DONE])

        # Gradient step for rows that neither hit an event nor finished.
        stepping = ~fits & (phase[active] != _DONE)
        rows = active[stepping]
        if rows.size:
            g = grad[stepping]
            t[rows] += 1
            m[rows] = beta1 * m[rows] + (1.0 - beta1) * g
            v[rows] = beta2 * v[rows] + (1.0 - beta2) * g * g
            bc1 = (1.0 - beta1 ** t[rows]).reshape(-1, 1, 1, 1)
            bc2 = (1.0 - beta2 ** t[rows]).reshape(-1, 1, 1, 1)
            step = opts.learning_rate * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + adam_eps)
            x[rows] = np.clip(x[rows] - step, -0.5, 0.5)
            iters_left[rows] -= 1

            exhausted = rows[iters_left[rows] == 0]
            if exhausted.size:
                doubles[exhausted] += 1
                out_of_budget = exhausted[doubles[exhausted] > opts.c_doublings]
                retry = exhausted[doubles[exhausted] <= opts.c_doublings]
                phase[out_of_budget] = _DONE
                c[retry] *= 2.0
                reset_rows(retry)

        active = np.flatnonzero(phase < _DONE)

    return best, best_linf, best_pred, np.isfinite(best_linf)


def cw_linf_attack_batch(model, images, labels, opts: Optional[CwOptions] = None):
    """Attack a batch; per-example isolation makes grouping irrelevant."""
    opts = opts or CwOptions()
    x0 = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x0.ndim != 4 or x0.shape[0] != y.shape[0]:
        raise ValidationError(f"expected (N, C, H, W) images with matching labels, got {x0.shape}")
    n = x0.shape[0]

    with _frozen(model):
        orig_pred = _predict(model, x0)
        best = x0.copy()
        best_linf = np.full(n, np.inf)
        best_pred = y.copy()
        for scheme in opts.inits:
            adv, linf, pred, ok = _cw_scheme(model, x0, y, scheme, opts)
            better = ok & (linf < best_linf)
            best[better] = adv[better]
            best_linf[better] = linf[better]
            best_pred[better] = pred[better]

    converged = np.isfinite(best_linf)
    return [
        AttackResult.build(
            x0[i], best[i], y[i], orig_pred[i],
            best_pred[i] if converged[i] else orig_pred[i], converged[i],
        )
        for i in range(n)
    ]


def cw_linf_attack(model, x, y_true, opts: Optional[CwOptions] = None) -> AttackResult:
    """Minimal-distortion attack on a single image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return cw_linf_attack_batch(model, x, np.array([y_true]), opts)[0]


def pgd_min_distortion_batch(
    model, images, labels,
    eps_lo: float = 0.0, eps_hi: float = 0.5, tol: float = 0.01,
    steps: int = 40, seed: int = 0,
):
    """Per-example binary search for the smallest radius PGD still wins at.

    The probe at each level runs the full PGD schedule with a step size
    of 2.5 * radius / steps and a content-seeded random start.
    """
    if not eps_lo < eps_hi:
        raise ValidationError(f"need eps_lo < eps_hi, got [{eps_lo}, {eps_hi}]")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    x0 = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x0.ndim != 4 or x0.shape[0] != y.shape[0]:
        raise ValidationError(f"expected (N, C, H, W) images with matching labels, got {x0.shape}")
    n = x0.shape[0]

    def probe(rows, eps_vec, tag):
        xs = x0[rows]
        ys = y[rows]
        eps = eps_vec.reshape(-1, 1, 1, 1)
        start = np.empty_like(xs)
        for j, i in enumerate(rows):
            rng = _example_rng(x0[i], y[i], tag, seed)
            start[j] = xs[j] + rng.uniform(-1.0, 1.0, size=xs[j].shape) * eps_vec[j]
        adv = _pgd(model, xs, ys, eps, 2.5 * eps / steps, steps, x_start=start)
        preds = _predict(model, adv)
        return adv, preds, preds != ys

    with _frozen(model):
        orig_pred = _predict(model, x0)
        lo = np.full(n, float(eps_lo))
        hi = np.full(n, float(eps_hi))
        best = x0.copy()
        best_pred = y.copy()

        adv, preds, succ = probe(np.arange(n), hi, "pgd-probe-hi")
        converged = succ.copy()
        best[succ] = adv[succ]
        best_pred[succ] = preds[succ]

        rounds = 0
        while True:
            active = np.flatnonzero(converged & (hi - lo > tol))
            if active.size == 0:
                break
            mid = 0.5 * (lo[active] + hi[active])
            adv, preds, succ = probe(active, mid, f"pgd-bisect-{rounds}")
            won = active[succ]
            hi[won] = mid[succ]
            best[won] = adv[succ]
            best_pred[won] = preds[succ]
            lo[active[~succ]] = mid[~succ]
            rounds += 1

    return [
        AttackResult.build(
            x0[i], best[i], y[i], orig_pred[i],
            best_pred[i] if converged[i] else orig_pred[i], converged[i],
        )
        for i in range(n)
    ]


def pgd_min_distortion(model, x, y_true, eps_lo=0.0, eps_hi=0.5, tol=0.01, steps=40, seed=0):
    """Binary-search attack on a single image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return pgd_min_distortion_batch(
        model, x, np.array([y_true]), eps_lo=eps_lo, eps_hi=eps_hi, tol=tol,
        steps=steps, seed=seed,
    )[0]


def attack_success(result: AttackResult, threshold: float) -> bool:
    """Flipped prediction with distortion strictly under the threshold."""
    return bool(
        result.converged
        and result.adversarial_pred != result.true_label
        and result.linf_distortion < threshold
    )


@dataclass
class SuiteReport:
    """Results over the correctly classified part of a subset."""

    results: list[AttackResult]
    indices: np.ndarray
    success_rates: dict[float, float]
    attacked: int
    note: str = ""


def attack_suite(
    model: Model,
    dataset: Dataset,
    thresholds: Sequence[float],
    opts: Optional[CwOptions] = None,
    method: str = "cw",
    threads: int = 1,
    pgd_tol: float = 0.01,
) -> SuiteReport:
    """Attack every correctly classified example; rate per threshold.

    Success rates are computed over the filtered set only. An empty
    filtered set yields a report with a note instead of an error.
    """
    if method not in ("cw", "pgd"):
        raise ValidationError(f"method must be cw or pgd, got {method!r}")
    if threads < 1:
        raise ValidationError("threads must be at least 1")
    thresholds = [float(tv) for tv in thresholds]

    preds = np.concatenate([
        _predict(model, dataset.images[i : i + 512]) for i in range(0, len(dataset), 512)
    ]) if len(dataset) else np.empty(0, dtype=np.int64)
    indices = np.flatnonzero(preds == dataset.labels)
    if indices.size == 0:
        return SuiteReport(
            results=[], indices=indices, success_rates={tv: 0.0 for tv in thresholds},
            attacked=0, note="no attackable examples",
        )

    images = dataset.images[indices]
    labels = dataset.labels[indices]

    def run(chunk_images, chunk_labels):
        if method == "cw":
            return cw_linf_attack_batch(model, chunk_images, chunk_labels, opts)
        return pgd_min_distortion_batch(
            model, chunk_images, chunk_labels, tol=pgd_tol,
            seed=opts.seed if opts else 0,
        )

    if threads == 1 or indices.size == 1:
        results = run(images, labels)
    else:
        bounds = np.linspace(0, indices.size, threads + 1, dtype=int)
        spans = [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            parts = pool.map(lambda s: run(images[s[0] : s[1]], labels[s[0] : s[1]]), spans)
        results = [r for part in parts for r in part]

    rates = {
        tv: float(np.mean([attack_success(r, tv) for r in results])) for tv in thresholds
    }
    return SuiteReport(
        results=results, indices=indices, success_rates=rates, attacked=int(indices.size)
    )
