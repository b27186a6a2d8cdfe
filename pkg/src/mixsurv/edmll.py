"""Mixture-of-experts survival head built from log-logistic components.

Each of ``E`` experts owns ``K`` log-logistic components whose scales and
shapes are softplus projections of two shared anchor vectors.  A gating
softmax weighs experts and a per-expert softmax weighs components, both
conditioned on the slide embedding.  All likelihood terms are evaluated in
log space; with ``u = log(t / alpha)``::

    log pdf      = log(beta / alpha) + (beta - 1) u - 2 softplus(beta u)
    log (1 - F)  = -softplus(beta u)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import DomainError, Tensor, _sigmoid_np, _softplus_np

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


# ---------------------------------------------------------------------------
# closed-form log-logistic law


def _check_params(alpha, beta) -> None:
    if np.any(np.asarray(alpha) <= 0) or np.any(np.asarray(beta) <= 0):
        raise DomainError("log-logistic alpha and beta must be positive")


def lld_logpdf(t, alpha, beta):
    t, alpha, beta = np.asarray(t, float), np.asarray(alpha, float), np.asarray(beta, float)
    _check_params(alpha, beta)
    if np.any(t <= 0):
        raise DomainError("log-logistic density needs t > 0")
    u = np.log(t) - np.log(alpha)
    return np.log(beta) - np.log(alpha) + (beta - 1.0) * u - 2.0 * _softplus_np(beta * u)


def lld_pdf(t, alpha, beta):
    """(beta/alpha)(t/alpha)^(beta-1) / (1 + (t/alpha)^beta)^2."""
    return np.exp(lld_logpdf(t, alpha, beta))


def lld_cdf(t, alpha, beta):
    """(t/alpha)^beta / (1 + (t/alpha)^beta), with F(0) = 0."""
    t, alpha, beta = np.asarray(t, float), np.asarray(alpha, float), np.asarray(beta, float)
    _check_params(alpha, beta)
    if np.any(t < 0):
        raise DomainError("log-logistic CDF needs t >= 0")
    with np.errstate(divide="ignore"):
        u = np.log(t) - np.log(alpha)
    out = _sigmoid_np(beta * u)
    return np.where(t > 0, out, 0.0)


def lld_survival(t, alpha, beta):
    t, alpha, beta = np.asarray(t, float), np.asarray(alpha, float), np.asarray(beta, float)
    _check_params(alpha, beta)
    with np.errstate(divide="ignore"):
        u = np.log(t) - np.log(alpha)
    return np.where(t > 0, _sigmoid_np(-beta * u), 1.0)


# ---------------------------------------------------------------------------
# learnable head


class SurvivalHead:
    def __init__(self, d: int, experts: int = 5, components: int = 100,
                 rng: np.random.Generator | None = None):
        if experts < 1 or components < 1:
            raise ValueError("experts and components must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.E, self.K = d, experts, components
        E, K = experts, components
        self.p_alpha = T.parameter(rng.uniform(-1.0, 1.0, K), name="head.p_alpha")
        self.p_beta = T.parameter(rng.uniform(-1.0, 1.0, K), name="head.p_beta")
        self.w_alpha = T.uniform_init(rng, (E, K, K), K, name="head.w_alpha")
        self.w_beta = T.uniform_init(rng, (E, K, K), K, name="head.w_beta")
        self.lam_w = T.uniform_init(rng, (E, d, K), d, name="head.lam_w")
        self.lam_b = T.zeros_param((E, K), name="head.lam_b")
        self.gate_w = T.uniform_init(rng, (d, E), d, name="head.gate_w")
        self.gate_b = T.zeros_param((E,), name="head.gate_b")

    def named_parameters(self):
        ps = (self.p_alpha, self.p_beta, self.w_alpha, self.w_beta,
              self.lam_w, self.lam_b, self.gate_w, self.gate_b)
        return [(p.name, p) for p in ps]


class HeadOutput(NamedTuple):
    gate: Tensor       # (E,)
    log_gate: Tensor   # (E,)
    log_lam: Tensor    # (E, K)
    alpha: Tensor      # (E, K)
    beta: Tensor       # (E, K)

    def curve(self, time_scale: float = 1.0) -> SurvivalCurve:
        return SurvivalCurve(
            gate=self.gate.data.copy(),
            lam=np.exp(self.log_lam.data),
            alpha=self.alpha.data.copy(),
            beta=self.beta.data.copy(),
            time_scale=time_scale,
        )


def _check_z(head: SurvivalHead, z: Tensor) -> Tensor:
    z = T.as_tensor(z)
    if z.shape != (head.d,):
        raise T.ShapeError(f"head expects an embedding of width {head.d}, got {z.shape}")
    return z


def project_anchors(head: SurvivalHead, e: int | None = None) -> tuple[Tensor, Tensor]:
    """softplus(W_alpha P_alpha), softplus(W_beta P_beta) for expert ``e`` (all if None)."""
    a = T.softplus((head.w_alpha @ head.p_alpha.reshape(head.K, 1)).reshape(head.E, head.K))
    b = T.softplus((head.w_beta @ head.p_beta.reshape(head.K, 1)).reshape(head.E, head.K))
    if e is None:
        return a, b
    return a[e], b[e]


def gate(head: SurvivalHead, z) -> Tensor:
    z = _check_z(head, z)
    return T.softmax(z.reshape(1, -1) @ head.gate_w + head.gate_b, axis=-1).reshape(-1)


def _lambda_logits(head: SurvivalHead, z: Tensor) -> Tensor:
    # (E, 1, d) @ (E, d, K) -> (E, 1, K)
    zz = z.reshape(1, 1, head.d)
    return (zz @ head.lam_w).reshape(head.E, head.K) + head.lam_b


def mixture_weights(head: SurvivalHead, e: int, z) -> Tensor:
    z = _check_z(head, z)
    return T.softmax(_lambda_logits(head, z), axis=-1)[e]


def head_forward(head: SurvivalHead, z) -> HeadOutput:
    z = _check_z(head, z)
    gl = z.reshape(1, -1) @ head.gate_w + head.gate_b
    log_gate = T.log_softmax(gl, axis=-1).reshape(-1)
    gate_p = T.softmax(gl, axis=-1).reshape(-1)
    log_lam = T.log_softmax(_lambda_logits(head, z), axis=-1)
    alpha, beta = project_anchors(head)
    return HeadOutput(gate_p, log_gate, log_lam, alpha, beta)


def _log_weights(out: HeadOutput) -> Tensor:
    return out.log_gate.reshape(-1, 1) + out.log_lam


def _log_u(out: HeadOutput, t: float) -> tuple[Tensor, Tensor]:
    log_alpha = T.log(out.alpha)
    return math.log(t) - log_alpha, log_alpha


def log_tpdf(out: HeadOutput, t: float) -> Tensor:
    if not t > 0:
        raise DomainError(f"density needs t > 0, got {t}")
    u, log_alpha = _log_u(out, t)
    bu = out.beta * u
    logpdf = T.log(out.beta) - log_alpha + (out.beta - 1.0) * u - 2.0 * T.softplus(bu)
    return T.logsumexp(_log_weights(out) + logpdf)


def log_spf(out: HeadOutput, t: float) -> Tensor:
    if t < 0:
        raise DomainError(f"survival needs t >= 0, got {t}")
    if t == 0:
        return T.Tensor(0.0)
    u, _ = _log_u(out, t)
    return T.logsumexp(_log_weights(out) - T.softplus(out.beta * u))


def tpdf(head: SurvivalHead, z, t: float) -> Tensor:
    return T.exp(log_tpdf(head_forward(head, z), t))


def spf(head: SurvivalHead, z, t: float) -> Tensor:
    return T.exp(log_spf(head_forward(head, z), t))


def nll_from_output(out: HeadOutput, t: float, c: int) -> Tensor:
    if c not in (0, 1):
        raise ValueError(f"censor flag must be 0 or 1, got {c}")
    if c == 1:
        return -T.clamp_min(log_tpdf(out, t), LOG_FLOOR)
    return -T.clamp_min(log_spf(out, t), LOG_FLOOR)


def nll_loss(head: SurvivalHead, z, t: float, c: int) -> Tensor:
    """-c log TPDF(t) - (1 - c) log SPF(t), probabilities floored at 1e-12."""
    return nll_from_output(head_forward(head, z), t, c)


def entropy(g) -> Tensor:
    """Shannon entropy of a probability vector with 0 log 0 = 0."""
    g = T.as_tensor(g)
    return -(g * T.log(T.clamp_min(g, 1e-300))).sum()


def total_loss(head: SurvivalHead, z, t: float, c: int, lambda_ent: float = 0.01,
               sign: int = -1, out: HeadOutput | None = None) -> Tensor:
    if lambda_ent < 0:
        raise ValueError("lambda_ent must be non-negative")
    if sign not in (1, -1):
        raise ValueError("entropy sign must be +1 or -1")
    out = out if out is not None else head_forward(head, z)
    nll = nll_from_output(out, t, c)
    if lambda_ent == 0:
        return nll
    return nll + (sign * lambda_ent) * entropy(out.gate)


# ---------------------------------------------------------------------------
# frozen per-slide curves


@dataclass
class SurvivalCurve:
    """Snapshot of one slide's predicted mixture, evaluated in months.

    The head works in normalized time ``t / time_scale``; density values are
    rescaled accordingly.
    """

    gate: np.ndarray    # (E,)
    lam: np.ndarray     # (E, K)
    alpha: np.ndarray   # (E, K), normalized time units
    beta: np.ndarray    # (E, K)
    time_scale: float = 1.0

    @property
    def weights(self) -> np.ndarray:
        return self.gate[:, None] * self.lam

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        tn = t[..., None, None] / self.time_scale
        s = (self.weights * lld_survival(np.maximum(tn, 0.0), self.alpha, self.beta)).sum((-1, -2))
        return np.where(t <= 0, 1.0, s)

    def density(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise DomainError("density needs t > 0")
        tn = t[..., None, None] / self.time_scale
        return (self.weights * lld_pdf(tn, self.alpha, self.beta)).sum((-1, -2)) / self.time_scale

    def median(self, rtol: float = 1e-13, t_max: float = 1e12) -> float:
        """Time t* with S(t*) = 0.5 by bracketing then geometric bisection."""
        lo = hi = self.time_scale
        while self.survival(lo) < 0.5:
            lo *= 0.5
            if lo < 1e-300:
                raise ArithmeticError("median bracket underflow")
        while self.survival(hi) > 0.5:
            hi *= 2.0
            if hi > t_max * self.time_scale:
                raise ArithmeticError(f"median bracket not found below {t_max:g}")
        for _ in range(400):
            mid = math.sqrt(lo * hi)
            s = float(self.survival(mid))
            if s == 0.5:
                return mid
            if s > 0.5:
                lo = mid
            else:
                hi = mid
            if hi / lo - 1.0 <= rtol:
                break
        return math.sqrt(lo * hi)


def predicted_median(head: SurvivalHead, z, time_scale: float = 1.0) -> float:
    with T.no_grad():
        return head_forward(head, z).curve(time_scale).median()
