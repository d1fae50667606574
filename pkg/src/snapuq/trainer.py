"""Joint training of backbone and tap heads.

The total objective is ``L_clf + lambda_ss * L_ss + lambda_reg * R`` where
``L_ss`` is the dimension-normalised, layer-weighted Gaussian loss of the tap
heads and ``R = alpha_var * sum|s| + alpha_wd * ||theta_heads||^2``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, NumericError
from .heads import head_forward, head_loss_and_grads, sigmoid, surprisal_diag
from .model import SnapModel
from .nnet import backward, cross_entropy, forward_collect

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_ss: float = 5e-3
    lambda_reg: float = 1e-4
    alpha_var: float = 1e-4
    alpha_wd: float = 5e-4
    omega: tuple = ()
    omega_mode: str = "uniform"
    density: str = "diag"
    detach: str = "off"
    detach_after: int = 10
    detach_patience: int = 3
    balance: str = "off"
    rho_target: float = 0.1
    lambda_min: float = 1e-4
    lambda_max: float = 1e-2
    ema: float = 0.05
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_min: float = 1e-5
    momentum: float = 0.9
    warmup_frac: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    clip_norm: float = 1.0
    xi_clip: float = 8.0
    seed: int = 13

    def validate(self) -> None:
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.detach not in ("off", "on", "auto"):
            raise ConfigError("detach must be off, on or auto")
        if self.balance not in ("off", "adaptive"):
            raise ConfigError("balance must be off or adaptive")
        if self.omega_mode not in ("uniform", "inverse_variance"):
            raise ConfigError("omega_mode must be uniform or inverse_variance")
        if any(w < 0 for w in self.omega):
            raise ConfigError("layer weights omega must be nonnegative")
        if self.lambda_ss < 0 or self.lambda_reg < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.balance == "adaptive":
            if not 0 < self.lambda_min <= self.lambda_max:
                raise ConfigError("need 0 < lambda_min <= lambda_max")
            if not self.lambda_min <= self.lambda_ss <= self.lambda_max:
                raise ConfigError("lambda_ss must start inside [lambda_min, lambda_max]")
        if not 0 < self.ema <= 1:
            raise ConfigError("ema must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    clf_loss: float
    ss_loss: float
    reg: float
    ebar_mean: list
    ebar_var: list
    lambda_ss: float
    rho: float
    lr: float
    detached: bool
    val_nll: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    """Mutable optimisation state carried across steps."""

    lam: float
    step: int = 0
    total_steps: int = 1
    rho_ema: float = 0.0
    detached: bool = False
    opt: dict = field(default_factory=dict)
    ebar_ema: dict = field(default_factory=dict)


# ----------------------------------------------------------------- losses

def layer_weights(cfg: TrainConfig, n_taps: int) -> np.ndarray:
    if cfg.omega:
        if len(cfg.omega) != n_taps:
            raise ConfigError("omega needs one weight per tap")
        w = np.asarray(cfg.omega, dtype=float)
        return w * n_taps / w.sum()
    return np.ones(n_taps)


def ss_loss(trace, heads, omega) -> float:
    """Batch mean of ``sum_l omega_l / d_l * 0.5 * (e_l + sum s_l)``."""
    total = 0.0
    for h, w in zip(heads, omega):
        out = head_forward(h, trace.vector(h.tap - 1) @ h.P.T)
        _, _, core = surprisal_diag(trace.vector(h.tap), out)
        total += w / h.d_out * np.mean(core)
    return float(total)


def regularizer(heads, s_list, alpha_var=1e-4, alpha_wd=5e-4) -> float:
    """``alpha_var * mean_n sum|s| + alpha_wd * sum(theta^2)`` over head weights.

    ``s_list`` holds one (N, d) or (d,) log-variance array per head.
    """
    r_var = 0.0
    for s in s_list:
        s = np.atleast_2d(s)
        r_var += float(np.mean(np.sum(np.abs(s), axis=-1)))
    r_wd = 0.0
    for h in heads:
        for name in ("P", "Wmu", "Wxi", "B"):
            arr = getattr(h, name)
            if arr is not None:
                r_wd += float(np.sum(arr * arr))
    return alpha_var * r_var + alpha_wd * r_wd


def balance_lambda(lam, rho_hat, target=0.1, lam_min=1e-4, lam_max=1e-2) -> float:
    """Multiplicative update toward the target gradient-norm ratio, clipped."""
    if not rho_hat > 0:
        return lam
    return float(np.clip(lam * target / rho_hat, lam_min, lam_max))


def fit_layer_weights(ebars):
    """Inverse-variance layer weights from dev-set per-tap ``ebar`` values.

    ``ebars`` has shape (N, n_taps). Returns ``(omega, w, uniform_fallback)``
    where omega sums to the number of taps and w sums to one.
    """
    ebars = np.asarray(ebars, dtype=float)
    if ebars.ndim == 1:
        ebars = ebars[:, None]
    if ebars.shape[0] < 2:
        raise ArgumentError("need at least two dev examples per tap")
    k = ebars.shape[1]
    var = np.var(ebars, axis=0, ddof=1)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        log.warning("zero or nonfinite tap variance; using uniform layer weights")
        return np.ones(k), np.full(k, 1.0 / k), True
    inv = 1.0 / var
    return inv * k / inv.sum(), inv / inv.sum(), False


# ------------------------------------------------------------- optimisers

def _lr_at(cfg: TrainConfig, state: TrainState) -> float:
    warm = max(1, math.ceil(cfg.warmup_frac * state.total_steps))
    t = state.step
    if t < warm:
        return cfg.lr * (t + 1) / warm
    frac = (t - warm) / max(1, state.total_steps - warm)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def _ramp(cfg: TrainConfig, state: TrainState) -> float:
    warm = max(1, math.ceil(cfg.warmup_frac * state.total_steps))
    return min(1.0, (state.step + 1) / warm)


def _apply_update(params: dict, grads: dict, cfg: TrainConfig, state: TrainState, lr):
    if cfg.optimizer == "adam":
        b1, b2, eps = 0.9, 0.999, 1e-8
        t = state.step + 1
        for name, p in params.items():
            g = grads[name]
            m, v = state.opt.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)
    else:
        for name, p in params.items():
            buf = state.opt.setdefault(name, np.zeros_like(p))
            buf *= cfg.momentum
            buf += grads[name]
            p -= lr * buf


def clip_gradients(grads: dict, max_norm: float):
    """Scale all gradients jointly so the global L2 norm is <= max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _norm(grads: dict, keys) -> float:
    return math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in keys))


# ------------------------------------------------------------------ steps

def compute_gradients(model: SnapModel, xb, yb, cfg: TrainConfig, lam: float,
                      detach: bool, omega=None, separate=False, include_clf=True):
    """Loss terms and gradients of the total objective for one batch.

    Returns ``(terms, grads, extras)``. ``terms`` has clf/ss/reg/total,
    ``grads`` maps every parameter name to dL/dparam. With ``separate`` the
    backbone gradients of the classification and auxiliary parts are also
    returned in ``extras`` (needed for gradient-norm balancing).
    ``include_clf=False`` drops the classification term.
    """
    bb = model.backbone
    n = len(yb)
    omega = layer_weights(cfg, len(model.heads)) if omega is None else omega
    trace, post = forward_collect(bb, xb)
    clf = cross_entropy(post, yb)
    dlogits = post.copy()
    dlogits[np.arange(n), yb] -= 1.0
    dlogits /= n
    if not include_clf:
        dlogits[:] = 0.0
        clf = 0.0

    ss = 0.0
    reg = 0.0
    head_grads = {}
    act_grads = {}
    ebar_batch = []
    s_list = []
    for h, w in zip(model.heads, omega):
        a_prev = trace.vector(h.tap - 1)
        a = trace.vector(h.tap)
        coef = w / (h.d_out * n)
        loss, g, out = head_loss_and_grads(h, a_prev, a, coef=coef,
                                           xi_clip=cfg.xi_clip, density=cfg.density)
        ss += w / h.d_out * float(np.mean(loss))
        e = np.sum((a - out.mu) ** 2 * np.exp(-out.s), axis=-1) / h.d_out
        ebar_batch.append(e)
        s_list.append(out.s)
        pre = f"tap{h.tap}."
        for name in ("P", "Wmu", "bmu", "Wxi", "bxi"):
            head_grads[pre + name] = lam * g[name]
        if h.B is not None:
            head_grads[pre + "B"] = np.zeros_like(h.B)
        if cfg.lambda_reg > 0:
            # scale-control term; activations are constants here
            ds = cfg.alpha_var * np.sign(out.s) / n
            dxi = ds * out.s_active * out.xi_active * sigmoid(out.xi) / out.var
            dz = dxi @ h.Wxi
            head_grads[pre + "Wxi"] += cfg.lambda_reg * (dxi.T @ out.z)
            head_grads[pre + "bxi"] += cfg.lambda_reg * dxi.sum(axis=0)
            head_grads[pre + "P"] += cfg.lambda_reg * (dz.T @ a_prev)
            for name in ("P", "Wmu", "Wxi", "B"):
                arr = getattr(h, name)
                if arr is not None:
                    head_grads[pre + name] += cfg.lambda_reg * 2.0 * cfg.alpha_wd * arr
        if lam > 0 and not detach:
            act_grads[h.tap] = act_grads.get(h.tap, 0.0) + g["a"]
            act_grads[h.tap - 1] = act_grads.get(h.tap - 1, 0.0) + g["a_prev"]
    reg = regularizer(model.heads, s_list, cfg.alpha_var, cfg.alpha_wd)

    extras = {"ebar": ebar_batch, "trace": trace}
    act_grads.pop(0, None)
    if separate:
        g_clf = backward(bb, trace, dlogits)
        g_ss = backward(bb, trace, None, act_grads) if act_grads else \
            {k: np.zeros_like(v) for k, v in g_clf.items()}
        bb_grads = {k: g_clf[k] + lam * g_ss[k] for k in g_clf} if act_grads else g_clf
        extras["clf_norm"] = _norm(g_clf, g_clf.keys())
        extras["ss_norm"] = lam * _norm(g_ss, g_ss.keys())
    elif act_grads:
        bb_grads = backward(bb, trace, dlogits, {k: lam * v for k, v in act_grads.items()})
    else:
        bb_grads = backward(bb, trace, dlogits)

    grads = dict(bb_grads)
    for h in model.heads:
        pre = f"tap{h.tap}."
        for name in h.weights():
            grads[pre + name] = head_grads.get(pre + name, np.zeros_like(getattr(h, name)))
    total = clf + lam * ss + cfg.lambda_reg * reg
    terms = {"clf": clf, "ss": ss, "reg": reg, "total": total}
    return terms, grads, extras


def train_step(model: SnapModel, xb, yb, cfg: TrainConfig, state: TrainState,
               omega=None) -> dict:
    """One stabilised optimisation step, in place. Returns step diagnostics."""
    lam = state.lam * _ramp(cfg, state)
    separate = cfg.balance == "adaptive"
    def diagnostics(**extra):
        return {"step": state.step, "lambda": lam, **extra,
                "param_norms": {k: float(np.linalg.norm(v))
                                for k, v in model.param_dict().items()}}

    try:
        terms, grads, extras = compute_gradients(
            model, xb, yb, cfg, lam, detach=state.detached or cfg.detach == "on",
            omega=omega, separate=separate)
    except NumericError as exc:
        raise NumericError(str(exc), diagnostics=diagnostics()) from exc
    if not math.isfinite(terms["total"]):
        raise NumericError("nonfinite training loss", diagnostics=diagnostics(
            **{k: float(v) for k, v in terms.items()}))
    params = model.param_dict()
    grads = {k: grads[k] for k in params}
    pre_norm = clip_gradients(grads, cfg.clip_norm)
    lr = _lr_at(cfg, state)
    _apply_update(params, grads, cfg, state, lr)

    if separate and extras["clf_norm"] > 0:
        rho = extras["ss_norm"] / extras["clf_norm"]
        state.rho_ema = rho if state.step == 0 else \
            (1 - cfg.ema) * state.rho_ema + cfg.ema * rho
        state.lam = balance_lambda(state.lam, state.rho_ema, cfg.rho_target,
                                   cfg.lambda_min, cfg.lambda_max)
    for i, e in enumerate(extras["ebar"]):
        m, v = float(np.mean(e)), float(np.var(e))
        if i not in state.ebar_ema:
            state.ebar_ema[i] = [m, v]
        else:
            em = state.ebar_ema[i]
            em[0] = (1 - cfg.ema) * em[0] + cfg.ema * m
            em[1] = (1 - cfg.ema) * em[1] + cfg.ema * v
    state.step += 1
    return {**terms, "lambda": lam, "grad_norm": pre_norm, "lr": lr, "rho": state.rho_ema}


def train(model: SnapModel, x, y, cfg: TrainConfig, dev=None, log_path=None):
    """Minibatch training in place. Returns the list of epoch records.

    ``dev`` is an optional ``(x, y)`` pair used for validation NLL (the
    automatic detach rule) and inverse-variance layer weights.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    n = len(y)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    state = TrainState(lam=cfg.lambda_ss, total_steps=steps_per_epoch * cfg.epochs,
                       detached=cfg.detach == "on")
    omega = layer_weights(cfg, len(model.heads))
    records = []
    best_nll, stall = math.inf, 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            sums = {"clf": 0.0, "ss": 0.0, "reg": 0.0}
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                diag = train_step(model, x[idx], y[idx], cfg, state, omega=omega)
                for k in sums:
                    sums[k] += diag[k] * len(idx) / n
            val_nll = None
            if dev is not None:
                _, post = forward_collect(model.backbone, dev[0])
                val_nll = cross_entropy(post, dev[1])
                if cfg.omega_mode == "inverse_variance" and len(model.heads) > 1:
                    omega = fit_layer_weights(dev_ebars(model, dev[0]))[0]
                if cfg.detach == "auto" and not state.detached:
                    if val_nll < best_nll - 1e-6:
                        best_nll, stall = val_nll, 0
                    else:
                        stall += 1
                    if epoch + 1 >= cfg.detach_after and stall >= cfg.detach_patience:
                        state.detached = True
                        log.info("detaching auxiliary loss after epoch %d", epoch + 1)
            rec = EpochRecord(
                epoch=epoch + 1, clf_loss=sums["clf"], ss_loss=sums["ss"], reg=sums["reg"],
                ebar_mean=[state.ebar_ema[i][0] for i in sorted(state.ebar_ema)],
                ebar_var=[state.ebar_ema[i][1] for i in sorted(state.ebar_ema)],
                lambda_ss=state.lam * _ramp(cfg, state), rho=state.rho_ema,
                lr=_lr_at(cfg, state), detached=state.detached, val_nll=val_nll)
            records.append(rec)
            if fh:
                fh.write(rec.to_json() + "\n")
    finally:
        if fh:
            fh.close()
    return records


def dev_ebars(model: SnapModel, x, batch=512) -> np.ndarray:
    """Per-tap ``ebar`` on a dataset, shape (N, n_taps)."""
    rows = []
    for i in range(0, len(x), batch):
        trace, _ = forward_collect(model.backbone, x[i:i + batch])
        cols = []
        for h in model.heads:
            out = head_forward(h, trace.vector(h.tap - 1) @ h.P.T)
            cols.append(surprisal_diag(trace.vector(h.tap), out)[1])
        rows.append(np.stack(cols, axis=1))
    return np.concatenate(rows)


def fit_head_on_pairs(head, a_prev, a, cfg: TrainConfig, return_losses=True):
    """Train a single head on fixed ``(a_prev, a)`` pairs (backbone absent).

    Used for synthetic linear-Gaussian dynamics. Returns per-epoch mean loss.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = len(a)
    steps = math.ceil(n / cfg.batch_size)
    state = TrainState(lam=1.0, total_steps=steps * cfg.epochs)
    params = {f"tap{head.tap}.{k}": v for k, v in head.weights().items() if k != "B"}
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for b in range(steps):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            m = len(idx)
            loss, g, out = head_loss_and_grads(head, a_prev[idx], a[idx],
                                               coef=1.0 / (head.d_out * m),
                                               xi_clip=cfg.xi_clip, density=cfg.density)
            tot += float(np.sum(loss)) / (head.d_out * n)
            grads = {f"tap{head.tap}.{k}": g[k] for k in ("P", "Wmu", "bmu", "Wxi", "bxi")}
            clip_gradients(grads, cfg.clip_norm)
            _apply_update(params, grads, cfg, state, _lr_at(cfg, state))
            state.step += 1
        losses.append(tot)
    return losses
