"""Fast invariant checks runnable from the command line."""

from __future__ import annotations

import itertools

import numpy as np

from .calibrate import fit_isotonic_pav
from .heads import (
    head_forward,
    head_loss_and_grads,
    init_head,
    surprisal_diag,
    surprisal_lowrank,
    gaussian_nll,
)


def _fd_check(rng, density) -> float:
    d_in, d, r, n = 5, 4, 3, 3
    h = init_head(2, d_in, d, r, rng, density=density)
    h.Wxi[:] = rng.normal(size=h.Wxi.shape)
    a_prev = rng.normal(size=(n, d_in))
    a = rng.normal(size=(n, d))
    _, g, _ = head_loss_and_grads(h, a_prev, a)
    worst = 0.0
    for name in ("P", "Wmu", "bmu", "Wxi", "bxi"):
        arr = getattr(h, name)
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = np.sum(head_loss_and_grads(h, a_prev, a)[0])
            arr[idx] = old - 1e-6
            dn = np.sum(head_loss_and_grads(h, a_prev, a)[0])
            arr[idx] = old
            num[idx] = (up - dn) / 2e-6
        err = np.max(np.abs(num - g[name]) / np.maximum(1e-6, np.abs(num) + np.abs(g[name])))
        worst = max(worst, float(err))
    return worst


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    worst = max(_fd_check(rng, d) for d in ("diag", "student_t", "huber") for _ in range(3))
    return worst <= 1e-5, f"max rel err {worst:.2e}"


def check_likelihood(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        d = 16
        mu, a = rng.normal(size=d), rng.normal(size=d)
        var = np.exp(rng.uniform(-2, 2, size=d))
        out = head_forward(init_head(2, 3, d, 2, rng), np.zeros(2))
        out.mu, out.s = mu, np.log(var)
        e, _, core = surprisal_diag(a, out)
        dense = 0.5 * ((a - mu) @ np.linalg.solve(np.diag(var), a - mu)
                       + np.linalg.slogdet(np.diag(var))[1] + d * np.log(2 * np.pi))
        worst = max(worst, abs(2 * core - e - out.s.sum()), abs(gaussian_nll(a, out) - dense))
    return worst <= 1e-10, f"max deviation {worst:.2e}"


def check_affine(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    out = head_forward(init_head(2, 3, 8, 2, rng), np.zeros(2))
    for _ in range(200):
        a, mu = rng.normal(size=8), rng.normal(size=8)
        sig = np.exp(rng.uniform(-1, 1, size=8))
        sc, sh = np.exp(rng.uniform(-2, 2, size=8)), rng.normal(size=8)
        out.mu, out.s = mu, 2 * np.log(sig)
        e1 = surprisal_diag(a, out)[0]
        out.mu, out.s = sc * mu + sh, 2 * np.log(sc * sig)
        e2 = surprisal_diag(sc * a + sh, out)[0]
        worst = max(worst, abs(e1 - e2) / max(1.0, abs(e1)))
    return worst <= 1e-9, f"max rel deviation {worst:.2e}"


def check_woodbury(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, d - 1) + 1))
        out = head_forward(init_head(2, 3, d, 2, rng), np.zeros(2))
        out.mu = rng.normal(size=d)
        out.s = rng.uniform(-1, 1, size=d)
        B = rng.normal(size=(d, k))
        a = rng.normal(size=d)
        quad, logdet = surprisal_lowrank(a, out, B)
        cov = np.diag(np.exp(out.s)) + B @ B.T
        v = a - out.mu
        worst = max(worst, abs(quad - v @ np.linalg.solve(cov, v)),
                    abs(logdet - np.linalg.slogdet(cov)[1]))
        if quad > surprisal_diag(a, out)[0] + 1e-12:
            return False, "low-rank quadratic exceeded the diagonal one"
    return worst <= 1e-8, f"max deviation {worst:.2e}"


def check_pav():
    worst = 0.0
    for n in range(1, 8):
        for bits in itertools.product((0.0, 1.0), repeat=n):
            y = np.array(bits)
            f = fit_isotonic_pav(np.arange(n), y, clip=0.0)
            fit = f(np.arange(n))
            best = min(np.sum((y - np.array(c)) ** 2)
                       for c in _staircases(y))
            worst = max(worst, float(np.sum((y - fit) ** 2) - best))
            if np.any(np.diff(fit) < 0):
                return False, "non-monotone fit"
    return worst <= 1e-10, f"excess SSE {worst:.2e}"


def _staircases(y):
    """All monotone fits obtained by pooling contiguous blocks with their means."""
    n = len(y)
    for cuts in itertools.product((0, 1), repeat=n - 1):
        blocks, start = [], 0
        for i, c in enumerate(cuts, 1):
            if c:
                blocks.append((start, i))
                start = i
        blocks.append((start, n))
        vals = np.concatenate([[y[s:e].mean()] * (e - s) for s, e in blocks])
        if np.all(np.diff(vals) >= 0):
            yield vals


def check_chi_square(seed=0):
    rng = np.random.default_rng(seed)
    d, n = 64, 10_000
    mu = rng.normal(size=(n, d))
    s = rng.uniform(-1, 1, size=(n, d))
    a = mu + np.exp(0.5 * s) * rng.normal(size=(n, d))
    eb = np.sum((a - mu) ** 2 * np.exp(-s), axis=1) / d
    ok = abs(eb.mean() - 1) <= 0.05 and 1 / d <= eb.var() <= 4 / d
    return ok, f"mean {eb.mean():.4f}, var*d {eb.var() * d:.3f}"


CHECKS = {
    "gradients": check_gradients,
    "likelihood": check_likelihood,
    "affine": check_affine,
    "woodbury": check_woodbury,
    "pav": check_pav,
    "chi-square": check_chi_square,
}


def run_all(out=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        ok, detail = fn()
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
