"""Time and energy cost of one algorithm configuration on a system profile.

Conventions: index 0 of every per-node array is the server, 1..N the workers.
Units are fixed (seconds, joules, bits, cycles); all formulas accept
real-valued iteration/batch/level counts so the optimizer can work on the
continuous relaxation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .quantizer import message_bits


@dataclass(frozen=True)
class SystemProfile:
    """Per-node compute/communication constants plus the run budgets."""

    F: np.ndarray       # CPU frequencies, cycles/s
    p: np.ndarray       # transmit powers, W
    r: np.ndarray       # average rates, b/s
    C: np.ndarray       # cycles per sample gradient (workers) / per update (server)
    alpha: np.ndarray   # switched-capacitance factors
    T_max: float
    E_max: float

    def __post_init__(self):
        for name in ("F", "p", "r", "C", "alpha"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or arr.size < 2:
                raise ValueError(f"{name} must cover the server and >=1 worker")
            if np.any(arr <= 0):
                raise ValueError(f"{name} entries must be strictly positive")
        if not (self.T_max > 0 and self.E_max > 0):
            raise ValueError("budgets must be positive")

    @property
    def n_workers(self) -> int:
        return self.F.size - 1

    def with_budgets(self, T_max=None, E_max=None) -> "SystemProfile":
        return SystemProfile(self.F, self.p, self.r, self.C, self.alpha,
                             self.T_max if T_max is None else float(T_max),
                             self.E_max if E_max is None else float(E_max))


def comm_time(K0, s_tilde, s, D, profile: SystemProfile):
    """K0 * (slowest worker upload + server broadcast)."""
    m = message_bits(s_tilde, s, D)
    return K0 * (np.max(m[1:] / profile.r[1:]) + m[0] / profile.r[0])


def comm_energy(K0, s_tilde, s, D, profile: SystemProfile):
    m = message_bits(s_tilde, s, D)
    return K0 * float(np.sum(profile.p * m / profile.r))


def comp_time(K, B, profile: SystemProfile):
    """K = (K0, K1..KN); per global iteration the slowest worker gates."""
    K = np.asarray(K, dtype=float)
    return K[0] * (B * np.max(profile.C[1:] / profile.F[1:] * K[1:]) + profile.C[0] / profile.F[0])


def comp_energy(K, B, profile: SystemProfile):
    K = np.asarray(K, dtype=float)
    worker = B * np.sum(profile.alpha[1:] * profile.C[1:] * profile.F[1:] ** 2 * K[1:])
    server = profile.alpha[0] * profile.C[0] * profile.F[0] ** 2
    return K[0] * (worker + server)


def total_time(K, B, s_tilde, s, D, profile: SystemProfile):
    K = np.asarray(K, dtype=float)
    return comm_time(K[0], s_tilde, s, D, profile) + comp_time(K, B, profile)


def total_energy(K, B, s_tilde, s, D, profile: SystemProfile):
    K = np.asarray(K, dtype=float)
    return comm_energy(K[0], s_tilde, s, D, profile) + comp_energy(K, B, profile)


# ---------------------------------------------------------------------------
# presets and config I/O
# ---------------------------------------------------------------------------

PRESETS = ("homo", "comm_hetero", "comp_hetero")

_MEAN_F = 1e9
_MEAN_R = 2.8e6
_RATIOS = {"homo": (1.0, 1.0), "comm_hetero": (1.0, 2.5), "comp_hetero": (10.0, 1.0)}


def preset(name: str, n_workers: int = 10, T_max: float = 60.0, E_max: float = 500.0) -> SystemProfile:
    """Two-class worker population; the first half is the fast class.

    Class means are fixed (F mean 1e9 cycles/s, r mean 2.8e6 b/s) and the
    class ratios select homogeneous / communication- / computing-heterogeneous
    systems.
    """
    if name not in _RATIOS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    f_ratio, r_ratio = _RATIOS[name]
    f2 = 2 * _MEAN_F / (1 + f_ratio)
    r2 = 2 * _MEAN_R / (1 + r_ratio)
    half = n_workers // 2
    F = np.array([3e9] + [f_ratio * f2] * half + [f2] * (n_workers - half))
    r = np.array([7.5e7] + [r_ratio * r2] * half + [r2] * (n_workers - half))
    p = np.array([20.0] + [1.5] * n_workers)
    C = np.array([100.0] + [1e6] * n_workers)
    alpha = np.full(n_workers + 1, 2e-28)
    return SystemProfile(F, p, r, C, alpha, T_max, E_max)


def save_profile(profile: SystemProfile, path):
    with open(path, "w") as fh:
        json.dump(
            {
                "F": profile.F.tolist(),
                "p": profile.p.tolist(),
                "r": profile.r.tolist(),
                "C": profile.C.tolist(),
                "alpha": profile.alpha.tolist(),
                "T_max": profile.T_max,
                "E_max": profile.E_max,
            },
            fh,
            indent=2,
        )


def load_profile(path) -> SystemProfile:
    with open(path) as fh:
        raw = json.load(fh)
    return SystemProfile(
        np.asarray(raw["F"], dtype=float),
        np.asarray(raw["p"], dtype=float),
        np.asarray(raw["r"], dtype=float),
        np.asarray(raw["C"], dtype=float),
        np.asarray(raw["alpha"], dtype=float),
        float(raw["T_max"]),
        float(raw["E_max"]),
    )
