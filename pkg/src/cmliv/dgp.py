"""Simulation designs, estimand formulas and oracle nuisance functions.

Latent index ``delta``, baseline outcome ``eps`` and effect ``tau`` are jointly
normal. The binary covariate ``X1`` is either ``1(delta >= 0)`` ("threshold",
defiers allowed in the ``X1 = 0`` cell) or identically one ("degenerate",
compliers only). A second covariate ``X2`` is pure noise.

Three estimand evaluations are offered:

* :func:`closed_form_estimands` evaluates the published closed-form
  expressions verbatim.
* :func:`exact_estimands` integrates the same weighted ratios exactly, using
  truncated-normal moments of the latent index.
* :func:`mc_estimand_oracle` computes them by brute-force simulation of the
  potential treatments.

The published expressions take the complier effect in a cell to equal
``E[tau | X1]``, which ignores the dependence between ``tau`` and the
compliance region of ``delta``. They therefore disagree with the other two
whenever ``rho_dt != 0``; the package keeps both so the gap stays visible.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Literal, Optional

import numpy as np
from scipy.special import ndtr, ndtri

from cmliv.core import FloatArray, IvDataset
from cmliv.errors import InvalidConfigurationError

PHI0 = 0.5  # standard normal cdf at 0
PDF0 = 1.0 / math.sqrt(2.0 * math.pi)
PSD_TOL = 1e-10


def _pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * np.where(np.isfinite(x), x, 0.0) ** 2) / math.sqrt(2.0 * math.pi)
    return np.where(np.isfinite(x), out, 0.0)


def _xpdf(x):
    # x * phi(x), with the limit 0 at +-inf
    x = np.asarray(x, dtype=float)
    fx = np.where(np.isfinite(x), x, 0.0)
    return fx * _pdf(fx) * np.isfinite(x)


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the latent-index simulation design."""

    sigma_tau: float = 1.0
    rho_dt: float = 0.5
    rho_de: float = 0.5
    rho_te: float = 1.0
    alpha: float = 0.0
    sigma_x: float = 2.0
    alpha_z: float = 0.0
    beta_xz: float = 0.5
    s1: float = 0.2
    s2: float = 0.4
    x1_mode: Literal["threshold", "degenerate"] = "threshold"
    name: str = "custom"

    def __post_init__(self):
        problems = []
        if not self.sigma_tau > 0:
            problems.append("sigma_tau must be > 0")
        for key in ("rho_dt", "rho_de", "rho_te"):
            if not -1.0 <= getattr(self, key) <= 1.0:
                problems.append(f"{key} must lie in [-1, 1]")
        if not (0 < self.s1 < 1 and 0 < self.s2 < 1):
            problems.append("s1 and s2 must lie in (0, 1)")
        elif not 1 - self.s1 > self.s2:
            problems.append("need 1 - s1 > s2")
        if not self.sigma_x >= 0:
            problems.append("sigma_x must be >= 0")
        if self.x1_mode not in ("threshold", "degenerate"):
            problems.append(f"unknown x1_mode {self.x1_mode!r}")
        if not problems and np.linalg.eigvalsh(self.sigma()).min() < -PSD_TOL:
            problems.append("latent covariance is not positive semidefinite")
        if problems:
            raise InvalidConfigurationError("; ".join(problems))

    def sigma(self) -> FloatArray:
        """Covariance of ``(delta, eps, tau)``."""
        st = self.sigma_tau
        return np.array([
            [1.0, self.rho_de, self.rho_dt * st],
            [self.rho_de, 1.0, self.rho_te * st],
            [self.rho_dt * st, self.rho_te * st, st * st],
        ])

    def factor(self) -> FloatArray:
        """Matrix ``F`` with ``F @ F.T == sigma()``, tolerant of rank deficiency."""
        w, v = np.linalg.eigh(self.sigma())
        w = np.where(w < PSD_TOL, 0.0, w)
        return v * np.sqrt(w)

    def instrument_prob(self, x1):
        """``P(Z1 = 1 | X1)`` from the probit index."""
        return ndtr(self.alpha_z + self.beta_xz * np.asarray(x1, dtype=float))

    def cells(self) -> tuple[int, ...]:
        return (0, 1) if self.x1_mode == "threshold" else (1,)

    def to_dict(self) -> dict:
        return asdict(self)


_COMMON = dict(sigma_tau=1.0, rho_dt=0.5, rho_de=0.5, rho_te=1.0, alpha=0.0,
               sigma_x=2.0, alpha_z=0.0, s1=0.2, s2=0.4)

PRESETS: dict[str, DgpConfig] = {
    "dgp1": DgpConfig(**_COMMON, x1_mode="threshold", beta_xz=0.5, name="dgp1"),
    "dgp2": DgpConfig(**_COMMON, x1_mode="threshold", beta_xz=0.001, name="dgp2"),
    "dgp3": DgpConfig(**_COMMON, x1_mode="degenerate", beta_xz=0.5, name="dgp3"),
    "dgp4": DgpConfig(**_COMMON, x1_mode="degenerate", beta_xz=0.001, name="dgp4"),
}


def preset(name: str) -> DgpConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidConfigurationError(
            f"unknown preset {name!r}; choose from {', '.join(PRESETS)}"
        ) from None


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class Latents:
    """Unobserved draws behind a simulated sample. Testing use only."""

    delta: FloatArray
    eps: FloatArray
    tau: FloatArray
    d0: FloatArray
    d1: FloatArray


def _potential_treatments(cfg: DgpConfig, delta, x1):
    u = ndtr(delta)
    d0 = (u > x1 * (1 - cfg.s1) + (1 - x1) * cfg.s2).astype(float)
    d1 = (u > x1 * cfg.s2 + (1 - x1) * (1 - cfg.s1)).astype(float)
    return d0, d1


def _simulate(cfg: DgpConfig, n: int, seed) -> tuple[IvDataset, Latents]:
    if n < 1:
        raise InvalidConfigurationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lat = rng.standard_normal((n, 3)) @ cfg.factor().T
    delta, eps, tau = lat[:, 0].copy(), lat[:, 1].copy(), lat[:, 2].copy()
    if cfg.x1_mode == "threshold":
        x1 = (delta >= 0).astype(float)
    else:
        x1 = np.ones(n)
    d0, d1 = _potential_treatments(cfg, delta, x1)
    x2 = rng.normal(0.0, cfg.sigma_x, n)
    z1 = (rng.random(n) < cfg.instrument_prob(x1)).astype(float)
    d = d0 * (1 - z1) + d1 * z1
    y = d * tau + (1 + cfg.alpha * delta) * eps
    ds = IvDataset(y=y, d=d, z1=z1, x=np.column_stack([x1, x2]))
    return ds, Latents(delta=delta, eps=eps, tau=tau, d0=d0, d1=d1)


def draw_sample(cfg: DgpConfig, n: int, seed) -> IvDataset:
    """Draw ``n`` observations ``(y, d, z1, x1, x2)``; deterministic in ``seed``."""
    return _simulate(cfg, n, seed)[0]


def draw_sample_with_latents(cfg: DgpConfig, n: int, seed) -> tuple[IvDataset, Latents]:
    """Like :func:`draw_sample`, also returning the latent draws.

    Meant for tests and estimand oracles only; estimators never see latents.
    """
    return _simulate(cfg, n, seed)


# ---------------------------------------------------------------------------
# analytic cell quantities

def _cell_region(cfg: DgpConfig, x1: int) -> tuple[float, float]:
    if cfg.x1_mode == "degenerate":
        return (-math.inf, math.inf) if x1 == 1 else (math.nan, math.nan)
    return (0.0, math.inf) if x1 == 1 else (-math.inf, 0.0)


def _m0(a, b):
    return float(ndtr(b) - ndtr(a)) if a < b else 0.0


def _m1(a, b):
    # E[delta 1(a < delta < b)]
    return float(_pdf(a) - _pdf(b)) if a < b else 0.0


def _m2(a, b):
    # E[delta^2 1(a < delta < b)]
    return float(ndtr(b) - ndtr(a) + _xpdf(a) - _xpdf(b)) if a < b else 0.0


@dataclass(frozen=True)
class CellMoments:
    """Exact population quantities within one ``X1`` cell."""

    x1: int
    prob: float      # P(X1 = x1)
    q: float         # P(Z1 = 1 | x1)
    p0: float        # E[D | Z1 = 0, x1]
    p1: float        # E[D | Z1 = 1, x1]
    ey0: float       # E[Y | Z1 = 0, x1]
    ey1: float       # E[Y | Z1 = 1, x1]

    @property
    def eta_d(self) -> float:
        return self.q * self.p1 + (1 - self.q) * self.p0

    @property
    def eta_y(self) -> float:
        return self.q * self.ey1 + (1 - self.q) * self.ey0

    @property
    def var_z(self) -> float:
        return self.q * (1 - self.q)

    @property
    def first_stage(self) -> float:
        """``p1 - p0``; its sign is ``c(x1)`` and its magnitude ``pi(x1)``."""
        return self.p1 - self.p0

    @property
    def wald(self) -> float:
        fs = self.first_stage
        return (self.ey1 - self.ey0) / fs if fs != 0 else math.nan


def cell_moments(cfg: DgpConfig, x1: int) -> CellMoments:
    lo, hi = _cell_region(cfg, x1)
    if math.isnan(lo):
        nan = math.nan
        return CellMoments(x1, 0.0, nan, nan, nan, nan, nan)
    prob = _m0(lo, hi)
    cut0 = float(ndtri(x1 * (1 - cfg.s1) + (1 - x1) * cfg.s2))
    cut1 = float(ndtri(x1 * cfg.s2 + (1 - x1) * (1 - cfg.s1)))
    slope_tau = cfg.rho_dt * cfg.sigma_tau
    base = cfg.rho_de * (_m1(lo, hi) + cfg.alpha * _m2(lo, hi)) / prob
    p, ey = [], []
    for cut in (cut0, cut1):
        a = max(cut, lo)
        p.append(_m0(a, hi) / prob)
        ey.append(slope_tau * _m1(a, hi) / prob + base)
    q = float(cfg.instrument_prob(x1))
    return CellMoments(x1=x1, prob=prob, q=q, p0=p[0], p1=p[1], ey0=ey[0], ey1=ey[1])


class OracleNuisances:
    """True conditional expectations of a design, as functions of ``(z1, x1)``.

    ``X2`` is independent noise, so every nuisance is constant within an
    ``X1`` cell. Inputs with an ``x1`` value the design cannot produce map to
    NaN.
    """

    def __init__(self, cfg: DgpConfig):
        self.cfg = cfg
        self._cells = {c: cell_moments(cfg, c) for c in (0, 1)}

    def cell(self, x1: int) -> CellMoments:
        return self._cells[x1]

    def _lookup(self, attr: str, x1) -> FloatArray:
        x1 = np.asarray(x1, dtype=float)
        v0 = getattr(self._cells[0], attr)
        v1 = getattr(self._cells[1], attr)
        out = np.where(x1 == 1.0, v1, np.where(x1 == 0.0, v0, math.nan))
        return out.astype(float)

    def eta_y(self, x1) -> FloatArray:
        return self._lookup("eta_y", x1)

    def eta_d(self, x1) -> FloatArray:
        return self._lookup("eta_d", x1)

    def eta_z(self, x1) -> FloatArray:
        return self._lookup("q", x1)

    def p0(self, x1) -> FloatArray:
        return self._lookup("p0", x1)

    def p1(self, x1) -> FloatArray:
        return self._lookup("p1", x1)

    def pscore(self, z1, x1) -> FloatArray:
        z1 = np.asarray(z1, dtype=float)
        return z1 * self.p1(x1) + (1 - z1) * self.p0(x1)

    def instrument(self, z1, x1) -> FloatArray:
        """Population instrument ``E[D|Z1,X] - E[D|X]``."""
        return self.pscore(z1, x1) - self.eta_d(x1)


def oracle_nuisances(cfg: DgpConfig) -> OracleNuisances:
    return OracleNuisances(cfg)


# ---------------------------------------------------------------------------
# estimands

@dataclass(frozen=True)
class Estimands:
    """LATE, the compliance-weighted estimand and the DML estimand.

    ``theta_dml`` is ``None`` when its weight denominator is exactly zero.
    ``dml_denominator`` is the signed DML weight mass and
    ``dml_weight_ratio`` its size relative to the unsigned mass; values near
    zero flag a nearly unidentified DML estimand.
    """

    tau_late: float
    theta0: float
    theta_dml: Optional[float]
    dml_denominator: float
    dml_weight_ratio: float
    source: str
    se_tau_late: Optional[float] = None
    se_theta0: Optional[float] = None
    se_theta_dml: Optional[float] = None
    theta0_moment: Optional[float] = None
    se_theta0_moment: Optional[float] = None
    se_theta0_gap: Optional[float] = None

    @property
    def dml_near_zero(self) -> bool:
        return self.theta_dml is None or self.dml_weight_ratio < 1e-3

    def target(self, estimator_id: str, kind: str = "own") -> Optional[float]:
        """Target value for an estimator: its own estimand or the LATE."""
        if kind == "late":
            return self.tau_late
        if kind != "own":
            raise InvalidConfigurationError(f"unknown target kind {kind!r}")
        return self.theta_dml if estimator_id == "dml" else self.theta0


def _weighted_estimands(prob, pi, sign, var_z, tau, source) -> Estimands:
    prob, pi, sign, var_z, tau = map(np.asarray, (prob, pi, sign, var_z, tau))
    # cells with pi == 0 carry zero weight; their tau may be undefined
    tau = np.where(pi == 0, 0.0, tau)
    late = float(np.sum(prob * pi * tau) / np.sum(prob * pi))
    w0 = prob * pi ** 2 * var_z
    theta0 = float(np.sum(w0 * tau) / np.sum(w0))
    w_dml = prob * sign * pi * var_z
    den = float(np.sum(w_dml))
    mass = float(np.sum(np.abs(w_dml)))
    theta_dml = float(np.sum(w_dml * tau) / den) if den != 0 else None
    ratio = abs(den) / mass if mass > 0 else 0.0
    return Estimands(tau_late=late, theta0=theta0, theta_dml=theta_dml,
                     dml_denominator=den, dml_weight_ratio=ratio, source=source)


def closed_form_estimands(cfg: DgpConfig) -> Estimands:
    """Published closed-form expressions for the three estimands.

    Threshold mode uses ``pi(1) = (1-s1-s2)/(1-Phi(0))``,
    ``pi(0) = (1-s1-s2)/Phi(0)``, ``tau(x1) = rho_dt sigma_tau (2 x1 - 1)
    phi(0)/Phi(0)``, ``c(x1) = 2 x1 - 1`` and ``Var(Z1|x1)`` from the probit.
    Degenerate mode has ``tau = 0`` and returns ``(0, 0, 0)``.
    """
    cells = np.array(cfg.cells(), dtype=float)
    var_z = cfg.instrument_prob(cells) * (1 - cfg.instrument_prob(cells))
    share = 1 - cfg.s1 - cfg.s2
    if cfg.x1_mode == "degenerate":
        prob = np.array([1.0])
        pi = np.array([share])
        tau = np.zeros(1)
    else:
        prob = np.where(cells == 1, 1 - PHI0, PHI0)
        pi = np.where(cells == 1, share / (1 - PHI0), share / PHI0)
        ratio = PDF0 / PHI0
        tau = cfg.rho_dt * cfg.sigma_tau * (-ratio + 2 * cells * ratio)
    sign = -1 + 2 * cells
    return _weighted_estimands(prob, pi, sign, var_z, tau, source="closed-form")


def exact_estimands(cfg: DgpConfig) -> Estimands:
    """Estimands of the design integrated exactly over the latent index."""
    cm = [cell_moments(cfg, c) for c in cfg.cells()]
    prob = [c.prob for c in cm]
    fs = np.array([c.first_stage for c in cm])
    tau = [c.wald for c in cm]
    var_z = [c.var_z for c in cm]
    return _weighted_estimands(prob, np.abs(fs), np.sign(fs), var_z, tau, source="exact")


def estimands(cfg: DgpConfig, source: str = "closed-form") -> Estimands:
    if source in ("closed-form", "appendix"):
        return closed_form_estimands(cfg)
    if source == "exact":
        return exact_estimands(cfg)
    raise InvalidConfigurationError(f"unknown estimand source {source!r}")


def _brute_force(cfg, x1, z1, y, d, lat, oracle):
    """Weight-formula estimands and the moment-ratio theta0 on one batch."""
    prob, pi, sign, var_z, tau = [], [], [], [], []
    for c in cfg.cells():
        m = x1 == c
        if not m.any():
            continue
        switch = lat.d1[m] - lat.d0[m]
        fs = switch.mean()
        prob.append(m.mean())
        pi.append(abs(fs))
        sign.append(np.sign(fs))
        var_z.append(float(cfg.instrument_prob(c) * (1 - cfg.instrument_prob(c))))
        tau.append(np.mean(switch * lat.tau[m]) / fs if fs != 0 else math.nan)
    est = _weighted_estimands(prob, pi, sign, var_z, tau, source="oracle")
    xi = oracle.instrument(z1, x1)
    num = np.mean((y - oracle.eta_y(x1)) * xi)
    den = np.mean((d - oracle.eta_d(x1)) * xi)
    return est, float(num / den)


def mc_estimand_oracle(cfg: DgpConfig, n_oracle: int = 1_000_000, seed=0,
                       batches: int = 50) -> Estimands:
    """Brute-force estimands from simulated potential treatments.

    Per-cell complier shares and effects come straight from the simulated
    ``(D(0), D(1), tau)``. ``theta0`` is also computed a second way as the
    sample moment ratio ``E[Y~ xi] / E[D~ xi]`` with the true nuisances.
    Standard errors are batch-means errors over ``batches`` equal batches.
    """
    if batches < 2 or n_oracle < batches:
        raise InvalidConfigurationError("need n_oracle >= batches >= 2")
    ds, lat = draw_sample_with_latents(cfg, n_oracle, seed)
    oracle = OracleNuisances(cfg)
    x1 = ds.x[:, 0]
    full, moment = _brute_force(cfg, x1, ds.z1, ds.y, ds.d, lat, oracle)

    rows = []
    for chunk in np.array_split(np.arange(n_oracle), batches):
        sub = Latents(*(getattr(lat, f)[chunk] for f in ("delta", "eps", "tau", "d0", "d1")))
        est, mom = _brute_force(cfg, x1[chunk], ds.z1[chunk], ds.y[chunk], ds.d[chunk],
                                sub, oracle)
        dml = est.theta_dml if est.theta_dml is not None else math.nan
        rows.append((est.tau_late, est.theta0, dml, mom, est.theta0 - mom))
    rows = np.array(rows)
    se = rows.std(axis=0, ddof=1) / math.sqrt(batches)
    return replace(
        full,
        se_tau_late=float(se[0]), se_theta0=float(se[1]),
        se_theta_dml=None if full.theta_dml is None else float(se[2]),
        theta0_moment=moment, se_theta0_moment=float(se[3]), se_theta0_gap=float(se[4]),
    )
