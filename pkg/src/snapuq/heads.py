"""Tap heads: projector, Gaussian predictor and surprisal densities.

A head attached at layer ``l`` compresses the previous activation,
``z = P a_{l-1}``, and predicts ``(mu, s)`` for ``a_l`` where ``s`` is the
log-variance. Variance is parameterised as ``softplus(xi) + eps**2`` and the
log-variance is clamped to ``log_var_bounds``.

Every routine accepts a single vector or a batch (leading axis) and returns
per-example values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, InputError, NumericError

DENSITIES = ("diag", "student_t", "huber", "lowrank")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class TapHead:
    tap: int
    P: np.ndarray
    Wmu: np.ndarray
    bmu: np.ndarray
    Wxi: np.ndarray
    bxi: np.ndarray
    density: str = "diag"
    nu: float = 4.0
    delta: float = 1.0
    B: np.ndarray | None = None
    eps: float = 1e-4
    log_var_bounds: tuple = (float(np.log(1e-4)), float(np.log(1e2)))
    pool: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def rank(self) -> int:
        return self.P.shape[0]

    @property
    def d_in(self) -> int:
        return self.P.shape[1]

    @property
    def d_out(self) -> int:
        return self.Wmu.shape[0]

    def validate(self) -> None:
        r, d = self.rank, self.d_out
        if r < 1:
            raise ArgumentError("projector rank must be >= 1")
        if self.Wmu.shape != (d, r) or self.Wxi.shape != (d, r):
            raise InputError("head weight shapes disagree with projector rank")
        if self.bmu.shape != (d,) or self.bxi.shape != (d,):
            raise InputError("head bias shapes disagree with output dimension")
        if self.density not in DENSITIES:
            raise ArgumentError(f"unknown density {self.density!r}")
        if not self.eps > 0:
            raise ArgumentError("variance floor eps must be positive")
        lo, hi = self.log_var_bounds
        if not lo < hi:
            raise ArgumentError("log-variance clamp bounds must be ordered")
        if not self.nu > 0:
            raise ArgumentError("Student-t dof must be positive")
        if not self.delta > 0:
            raise ArgumentError("Huber delta must be positive")
        if self.density == "lowrank":
            if self.B is None or self.B.ndim != 2 or self.B.shape[0] != d:
                raise InputError("lowrank density needs B with shape (d, k)")
            if not self.B.shape[1] < d:
                raise ArgumentError("low-rank factor must have k < d")

    def weights(self) -> dict:
        w = {"P": self.P, "Wmu": self.Wmu, "bmu": self.bmu,
             "Wxi": self.Wxi, "bxi": self.bxi}
        if self.B is not None:
            w["B"] = self.B
        return w

    def copy(self) -> "TapHead":
        kw = {k: v.copy() for k, v in self.weights().items()}
        return replace(self, **kw)

    def astype(self, dtype) -> "TapHead":
        kw = {k: v.astype(dtype) for k, v in self.weights().items()}
        return replace(self, **kw)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.weights().values()))


@dataclass
class HeadOutput:
    z: np.ndarray
    mu: np.ndarray
    s: np.ndarray
    xi: np.ndarray
    var: np.ndarray
    s_active: np.ndarray
    xi_active: np.ndarray
    woodbury: dict | None = field(default=None, repr=False)

    @property
    def sigma2(self) -> np.ndarray:
        return np.exp(self.s)


def init_head(tap, d_in, d_out, rank, rng, density="diag", **kw) -> TapHead:
    """He-uniform projector and heads; xi bias set so that sigma^2 starts at 1."""
    lim_p = np.sqrt(6.0 / d_in)
    lim_h = np.sqrt(6.0 / rank)
    P = rng.uniform(-lim_p, lim_p, size=(rank, d_in))
    Wmu = rng.uniform(-lim_h, lim_h, size=(d_out, rank))
    Wxi = rng.uniform(-0.1 * lim_h, 0.1 * lim_h, size=(d_out, rank))
    bxi = np.full(d_out, np.log(np.expm1(1.0)))
    return TapHead(tap, P, Wmu, np.zeros(d_out), Wxi, bxi, density=density, **kw)


def _batch(v):
    v = np.asarray(v)
    return (v[None], True) if v.ndim == 1 else (v, False)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def project(head: TapHead, a_prev) -> np.ndarray:
    """``z = P a_prev``; conv maps (N, C, H, W) are average-pooled first."""
    a_prev = np.asarray(a_prev)
    if a_prev.ndim == 4 or (a_prev.ndim == 3 and head.pool):
        a_prev = a_prev.mean(axis=(-2, -1))
    a, single = _batch(a_prev)
    if a.shape[-1] != head.d_in:
        raise InputError(
            f"projector expects dimension {head.d_in}, got {a.shape[-1]}")
    z = a @ head.P.T
    return z[0] if single else z


def head_forward(head: TapHead, z, xi_clip=None) -> HeadOutput:
    """Predict mean and clamped log-variance from the projection ``z``.

    ``xi_clip`` optionally clips the pre-softplus activations (training-time
    stabiliser); clipped and clamped coordinates carry zero gradient.
    """
    z, single = _batch(z)
    if z.shape[-1] != head.rank:
        raise InputError(f"head expects z of length {head.rank}, got {z.shape[-1]}")
    mu = z @ head.Wmu.T + head.bmu
    xi = z @ head.Wxi.T + head.bxi
    xi_active = np.ones(xi.shape, dtype=bool)
    if xi_clip is not None:
        xi_active = np.abs(xi) <= xi_clip
        xi = np.clip(xi, -xi_clip, xi_clip)
    var = softplus(xi) + head.eps ** 2
    s_raw = np.log(var)
    lo, hi = head.log_var_bounds
    s_active = (s_raw >= lo) & (s_raw <= hi)
    s = np.clip(s_raw, lo, hi)
    out = HeadOutput(z, mu, s, xi, var, s_active, xi_active)
    if single:
        out = HeadOutput(*(x[0] for x in (z, mu, s, xi, var, s_active, xi_active)))
    return out


def _check_target(a, out):
    a = np.asarray(a)
    if a.shape != out.mu.shape:
        raise InputError(f"activation shape {a.shape} != prediction shape {out.mu.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(out.mu))
            and np.all(np.isfinite(out.s))):
        raise NumericError("nonfinite activation or head output")
    return a


def surprisal_diag(a, out: HeadOutput):
    """Standardized squared error ``e``, its per-dimension mean and the
    per-layer Gaussian loss ``0.5 * (e + sum(s))`` (no 2*pi constant)."""
    a = _check_target(a, out)
    r = a - out.mu
    e = np.sum(r * r * np.exp(-out.s), axis=-1)
    d = a.shape[-1]
    sum_s = np.sum(out.s, axis=-1)
    nll_core = 0.5 * (e + sum_s)
    if np.ndim(e) == 0:
        return float(e), float(e / d), float(nll_core)
    return e, e / d, nll_core


def gaussian_nll(a, out: HeadOutput):
    """Full diagonal-Gaussian negative log-likelihood including 2*pi."""
    _, _, core = surprisal_diag(a, out)
    return core + 0.5 * out.mu.shape[-1] * LOG_2PI


def surprisal_student_t(a, out: HeadOutput, nu: float):
    if not nu > 0:
        raise ArgumentError("Student-t dof must be positive")
    a = _check_target(a, out)
    q = (a - out.mu) ** 2 * np.exp(-out.s)
    val = np.sum(0.5 * (nu + 1.0) * np.log1p(q / nu) + 0.5 * out.s, axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def huber(u, delta):
    au = np.abs(u)
    return np.where(au <= delta, 0.5 * u * u, delta * au - 0.5 * delta * delta)


def surprisal_huber(a, out: HeadOutput, delta: float):
    if not delta > 0:
        raise ArgumentError("Huber delta must be positive")
    a = _check_target(a, out)
    u = (a - out.mu) * np.exp(-0.5 * out.s)
    val = np.sum(huber(u, delta) + 0.5 * out.s, axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def woodbury_cache(out: HeadOutput, B: np.ndarray) -> dict:
    """``M = B^T D^-1 B`` and the Cholesky factor of ``I + M``."""
    dinv = np.exp(-out.s)
    k = B.shape[1]
    M = np.einsum("ik,...i,il->...kl", B, dinv, B)
    try:
        L = np.linalg.cholesky(np.eye(k) + M)
    except np.linalg.LinAlgError as exc:
        raise NumericError("I + B^T D^-1 B is not positive definite") from exc
    return {"M": M, "L": L}


def surprisal_lowrank(a, out: HeadOutput, B):
    """Quadratic form and log-determinant under ``diag(sigma^2) + B B^T``.

    Uses the determinant lemma and the Woodbury identity, so the cost is
    O(d k + k^3) per example.
    """
    a = _check_target(a, out)
    B = np.asarray(B)
    if B.ndim != 2 or B.shape[0] != a.shape[-1]:
        raise InputError("B must have shape (d, k)")
    if out.woodbury is None:
        out.woodbury = woodbury_cache(out, B)
    L = out.woodbury["L"]
    v = a - out.mu
    dinv = np.exp(-out.s)
    e_diag = np.sum(v * v * dinv, axis=-1)
    u = (v * dinv) @ B
    w = np.linalg.solve(L, u[..., None])[..., 0]
    delta = np.sum(w * w, axis=-1)
    quad = np.maximum(e_diag - delta, 0.0)
    logdet = np.sum(out.s, axis=-1) + 2.0 * np.sum(
        np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    if np.ndim(quad) == 0:
        return float(quad), float(logdet)
    return quad, logdet


def ebar(head: TapHead, a, out: HeadOutput):
    """Per-dimension surprisal used for scoring."""
    if head.density == "lowrank":
        quad, _ = surprisal_lowrank(a, out, head.B)
        return quad / head.d_out
    return surprisal_diag(a, out)[1]


def _elementwise(density, r, s, nu, delta):
    """Per-channel loss and its partials w.r.t. mu and s."""
    inv = np.exp(-s)
    if density == "diag":
        q = r * r * inv
        return 0.5 * (q + s), -r * inv, 0.5 * (1.0 - q)
    if density == "student_t":
        q = r * r * inv
        loss = 0.5 * (nu + 1.0) * np.log1p(q / nu) + 0.5 * s
        dmu = -(nu + 1.0) * r / (nu * np.exp(s) + r * r)
        ds = 0.5 * (1.0 - (nu + 1.0) * q / (nu + q))
        return loss, dmu, ds
    if density == "huber":
        rs = np.exp(-0.5 * s)
        u = r * rs
        psi = np.clip(u, -delta, delta)
        return huber(u, delta) + 0.5 * s, -psi * rs, 0.5 - 0.5 * psi * u
    raise ArgumentError(f"no closed-form gradient for density {density!r}")


def head_loss_and_grads(head: TapHead, a_prev, a, coef=1.0, xi_clip=None,
                        density=None):
    """Per-layer loss and exact gradients for a batch.

    The returned gradients are for ``sum_n coef * loss_n``; ``coef`` folds in
    layer weight, dimension normalisation and the batch mean. Keys: ``mu``,
    ``s``, ``xi``, ``z``, ``a`` (target), ``a_prev`` and one per weight.
    """
    density = density or head.density
    a_prev_b, single = _batch(a_prev)
    a_b, _ = _batch(a)
    z = a_prev_b @ head.P.T
    out = head_forward(head, z, xi_clip=xi_clip)
    a_b = _check_target(a_b, out)
    r = a_b - out.mu
    loss_el, dmu, ds = _elementwise(density, r, out.s, head.nu, head.delta)
    loss = np.sum(loss_el, axis=-1)
    dmu = coef * dmu
    ds = coef * ds
    dxi = ds * out.s_active * out.xi_active * sigmoid(out.xi) / out.var
    dz = dmu @ head.Wmu + dxi @ head.Wxi
    grads = {
        "mu": dmu,
        "s": ds,
        "xi": dxi,
        "z": dz,
        "a": -dmu,
        "a_prev": dz @ head.P,
        "Wmu": dmu.T @ z,
        "bmu": dmu.sum(axis=0),
        "Wxi": dxi.T @ z,
        "bxi": dxi.sum(axis=0),
        "P": dz.T @ a_prev_b,
    }
    if single:
        for k in ("mu", "s", "xi", "z", "a", "a_prev"):
            grads[k] = grads[k][0]
        loss = float(loss[0])
    return loss, grads, out


def head_gradients(head: TapHead, a_prev, a, xi_clip=None, density=None) -> dict:
    """Closed-form gradients of the per-layer loss (see
    :func:`head_loss_and_grads`) for unit coefficient."""
    return head_loss_and_grads(head, a_prev, a, xi_clip=xi_clip, density=density)[1]
