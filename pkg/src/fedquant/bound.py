"""Convergence-error bound and step-size/weight feasibility.

The bound is the weighted average of the expected squared gradient norm at
the recovered global models; its seven terms separate the initial-loss decay,
mini-batch variance, and the uplink/downlink quantization errors.  Level
counts are accepted as reals so the optimizer can evaluate the relaxation;
integer inputs agree exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .quantizer import quant_constants

TERM_LABELS = (
    "initial_gap",
    "local_drift_variance",
    "aggregation_variance",
    "server_quant_variance",
    "worker_quant_variance",
    "server_quant_range",
    "worker_quant_range",
)


@dataclass(frozen=True)
class BoundInputs:
    """Everything Eq.-style bound evaluation needs; arrays indexed like elsewhere.

    K, W cover workers only; s_tilde, s, delta cover server (index 0) plus
    workers.  gamma is the full per-global-iteration step sequence.
    """

    K: np.ndarray
    B: float
    gamma: np.ndarray
    W: np.ndarray
    s_tilde: np.ndarray
    s: np.ndarray
    delta: np.ndarray
    L: float
    sigma: float
    f_init: float
    f_star_lower: float
    dim: int

    def __post_init__(self):
        for name in ("K", "gamma", "W", "s_tilde", "s", "delta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.K.size
        if self.W.size != n or self.s_tilde.size != n + 1 or self.s.size != n + 1 or self.delta.size != n + 1:
            raise ValueError("inconsistent array lengths")


def step_feasible(gamma, K, W, s, L, N, D):
    """Margin of the per-worker step-size condition; feasible iff margin >= 0.

    Returns (feasible, min_margin, per-worker margins) for
    1 - L^2 g^2 K_n - L g (1+q_{s0})(N+q_{sn}) W_n K_n.
    """
    K = np.asarray(K, dtype=float)
    W = np.asarray(W, dtype=float)
    s = np.asarray(s, dtype=float)
    q0 = quant_constants(1.0, s[0], D).q_s
    qn = np.array([quant_constants(1.0, sv, D).q_s for sv in s[1:]])
    margins = 1.0 - L**2 * gamma**2 * K - L * gamma * (1.0 + q0) * (N + qn) * W * K
    m = float(np.min(margins))
    return m >= 0.0, m, margins


def critical_gamma(K, W, s, L, N, D):
    """Largest feasible constant step: min over workers of the positive root."""
    K = np.asarray(K, dtype=float)
    W = np.asarray(W, dtype=float)
    s = np.asarray(s, dtype=float)
    q0 = quant_constants(1.0, s[0], D).q_s
    qn = np.array([quant_constants(1.0, sv, D).q_s for sv in s[1:]])
    a = L**2 * K
    b = L * (1.0 + q0) * (N + qn) * W * K
    roots = (-b + np.sqrt(b**2 + 4.0 * a)) / (2.0 * a)
    return float(np.min(roots))


def convergence_bound(inputs: BoundInputs):
    """Evaluate the seven-term bound; returns (total, per-term array)."""
    K, W = inputs.K, inputs.W
    gam = inputs.gamma
    B, L, sig = float(inputs.B), inputs.L, inputs.sigma
    N = K.size
    D = inputs.dim

    sum_g = float(np.sum(gam))
    sum_g2 = float(np.sum(gam**2))
    sum_g3 = float(np.sum(gam**3))
    sum_wk = float(np.sum(W * K))
    if sum_wk <= 0 or sum_g <= 0:
        raise ValueError("need positive sum of weights*iterations and step sizes")

    q0 = quant_constants(inputs.s_tilde[0], inputs.s[0], D)
    qn = [quant_constants(inputs.s_tilde[i + 1], inputs.s[i + 1], D) for i in range(N)]
    qs_n = np.array([c.q_s for c in qn])
    qts_n = np.array([c.q_tilde_s_s for c in qn])
    d0, dn = inputs.delta[0], inputs.delta[1:]

    terms = np.empty(7)
    terms[0] = 2.0 * (inputs.f_init - inputs.f_star_lower) / (sum_wk * sum_g)
    terms[1] = L**2 * sig**2 * np.sum(W * K * (K + 1.0)) * sum_g3 / (2.0 * B * sum_wk * sum_g)
    terms[2] = L * sig**2 * N * np.sum(W**2 * K) * sum_g2 / (B * sum_wk * sum_g)
    terms[3] = L * sig**2 * N * q0.q_s * np.sum(W**2 * K) * sum_g2 / (B * sum_wk * sum_g)
    terms[4] = L * sig**2 * (1.0 + q0.q_s) * np.sum(qs_n * W**2 * K) * sum_g2 / (B * sum_wk * sum_g)
    terms[5] = L * q0.q_tilde_s_s * d0**2 * sum_wk * sum_g2 / sum_g
    terms[6] = L * (1.0 + q0.q_s) * np.sum(qts_n * W**2 * K**2 * dn**2) * sum_g2 / (sum_wk * sum_g)
    return float(terms.sum()), terms


def constant_step_from_sum(S: float, K0: int) -> np.ndarray:
    """The constant step sequence with a given sum; the optimal one for fixed sum."""
    if S <= 0 or K0 < 1:
        raise ValueError("need S > 0 and K0 >= 1")
    return np.full(K0, S / K0)


def terms_to_csv(terms: np.ndarray) -> str:
    """Labeled term breakdown, one row per term, for plotting."""
    buf = io.StringIO()
    buf.write("term,value\n")
    for label, value in zip(TERM_LABELS, terms):
        buf.write(f"{label},{float(value)!r}\n")
    return buf.getvalue()
