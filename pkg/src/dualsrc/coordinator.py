"""Capacity-price coordinators: a neural price forecaster and an MPC dual-price search."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exo import WEEKS_PER_YEAR, Action, DomainError, ExoWorld, price_unit
from .policies import holiday_distance, trailing_mean
from .simulator import Observation, SimState, rollout

log = logging.getLogger(__name__)

MEAN_WINDOW = 12


@dataclass
class PricePath:
    """Capacity prices ``lambda_{t..t+L}`` forecast at week ``week``."""

    week: int
    prices: np.ndarray
    history: list = field(default_factory=list)   # earlier forecast vectors, oldest first
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        if np.any(np.asarray(ad.value(self.prices)) < 0):
            raise DomainError("capacity prices must be >= 0")


def _inv(k):
    k = np.asarray(k, dtype=float)
    return np.where(np.isfinite(k), 1.0 / np.where(np.isfinite(k), k, 1.0), 0.0)


def _limit_ratio(k_now, k_next):
    k_now, k_next = float(k_now), float(k_next)
    if np.isinf(k_next):
        return 1.0 if np.isinf(k_now) else 0.0
    return 0.0 if np.isinf(k_now) else k_now / k_next


@dataclass(frozen=True)
class CoordFeatureConfig:
    horizon: int

    @property
    def dim(self) -> int:
        L = self.horizon
        return 8 + 2 + (L + 1) + 3 + 3 + 1 + (L + 1) + L + 1


def coord_featurize(world: ExoWorld, products, week: int, state: SimState, limits,
                    cfg: CoordFeatureConfig, last_price: float = 0.0, last_forecast=None,
                    unit: float = 1.0) -> np.ndarray:
    """Population-level feature vector for the coordinator.

    Volumes are divided by the capacity limit of the week they refer to (zero
    for an unlimited week); unit counts by ``K_t / mean unit volume``. Prices
    are in multiples of ``unit``. Reads no exogenous data from ``week`` on
    except the capacity limits, which are given.
    """
    idx = np.atleast_1d(np.arange(world.num_products)[products])
    L = cfg.horizon
    limits = np.asarray(limits, dtype=float)
    k_at = lambda s: limits[min(s, limits.size - 1)]
    v = world.unit_volumes[idx]
    inv_k = float(_inv(k_at(week)))
    inv_k_units = inv_k * float(v.mean())
    onhand = np.atleast_1d(np.asarray(ad.value(state.onhand), dtype=float))
    pj = np.reshape(ad.value(state.pipeline_jit), (idx.size, -1))
    pl = np.reshape(ad.value(state.pipeline_llt), (idx.size, -1))
    if state.order_history:
        qj, ql = state.order_history[-1]
        orders = np.atleast_1d(ad.value(qj)) + np.atleast_1d(ad.value(ql))
    else:
        orders = np.zeros(idx.size)
    demand = world.demand[idx, week - 1] if week > 0 else np.zeros(idx.size)
    inbound = np.atleast_1d(np.asarray(ad.value(state.last_arrivals), dtype=float)) * np.ones(idx.size)
    feats = []
    for q in (orders, onhand, demand, inbound):
        feats += [q.sum() * inv_k_units, (v * q).sum() * inv_k]

    mean_d = trailing_mean(world.demand[idx], week, MEAN_WINDOW)
    feats += [mean_d.sum() * (L + 1) * inv_k_units, (v * mean_d).sum() * (L + 1) * inv_k]
    # expected storage volume at t+s if nothing more were ordered
    due = np.zeros(idx.size)
    for s in range(L + 1):
        if s < pj.shape[1]:
            due = due + pj[:, s]
        if s < pl.shape[1]:
            due = due + pl[:, s]
        level = np.maximum(onhand + due - mean_d * (s + 1), 0.0)
        feats.append(float((v * level).sum() * _inv(k_at(week + s))))

    woy = world.week_of_year(week)
    ang = 2.0 * np.pi * woy / WEEKS_PER_YEAR
    feats += [np.sin(ang), np.cos(ang), float(holiday_distance(woy))]
    t = min(week, world.horizon - 1)
    w = mean_d * v + 1e-9
    p = world.price[idx, t]
    feats += [float(np.sum(w * p / v) / np.sum(w)) / unit,
              float(np.sum(w * world.cost_jit[idx, t] / p) / np.sum(w)),
              float(np.sum(w * world.cost_llt[idx, t] / p) / np.sum(w))]
    feats.append(float(ad.value(last_price)) / unit)
    lf = np.zeros(L + 1) if last_forecast is None else np.asarray(ad.value(last_forecast), dtype=float)
    feats += list(lf / unit)
    feats += [_limit_ratio(k_at(week), k_at(week + s)) for s in range(1, L + 1)]
    feats.append(1.0)
    out = np.asarray(feats, dtype=float)
    if not np.all(np.isfinite(out)):
        raise DomainError("non-finite coordinator feature")
    return out


# softplus(-2) ~= 0.127 of a price unit
INIT_PRICE_BIAS = -2.0


def coordinator_network(cfg: CoordFeatureConfig, hidden=(32,), seed: int = 0, zero: bool = False) -> ad.MlpParams:
    sizes = (cfg.dim, *hidden, cfg.horizon + 1)
    if zero:
        return ad.MlpParams.zeros(sizes)
    return ad.MlpParams.init(sizes, seed=seed, scale=0.5, output_bias=np.full(cfg.horizon + 1, INIT_PRICE_BIAS))


def forecast_prices(params: ad.MlpParams, features, unit: float = 1.0, layers=None):
    """``softplus(MLP(features)) * unit``: nonnegative prices for weeks ``t..t+L``."""
    if layers is None:
        layers = params.layers()
    return ad.mul(ad.softplus(ad.mlp_apply(layers, features, params.activation)), unit)


class NeuralCoordinator:
    """Stateful per-episode wrapper: remembers its last forecast between weeks."""

    name = "neural"

    def __init__(self, params: ad.MlpParams, limits, horizon: int, unit: float = 1.0,
                 theta: ad.Var | None = None):
        self.params = params
        self.limits = np.asarray(limits, dtype=float)
        self.cfg = CoordFeatureConfig(horizon)
        self.unit = unit
        self.theta = theta
        self.layers = params.layers(theta)
        self.last_forecast = None
        self.paths: list[PricePath] = []

    def bind(self, tape: ad.Tape) -> "NeuralCoordinator":
        theta = tape.variable(self.params.flat)
        return NeuralCoordinator(self.params, self.limits, self.cfg.horizon, self.unit, theta)

    def __call__(self, obs: Observation):
        x = coord_featurize(obs.world, obs.products, obs.week, obs.state, self.limits, self.cfg,
                            obs.last_price, self.last_forecast, self.unit)
        path = forecast_prices(self.params, x, self.unit, self.layers)
        self.last_forecast = path
        self.paths.append(PricePath(obs.week, np.array(ad.value(path))))
        return path


def p3_loss(volumes, limits, forecasts, violation_weight: float = 1.0, price_weight: float = 1.0,
            mse_weight: float = 1.0, volume_scale: float = 1.0, price_scale: float = 1.0):
    """Coordinator loss summed over weeks.

    For week t: ``(vol_t - K_t)_+^2 + sum|f_t| + sum_{s=1..L} (lambda_t - f_{t-s}[s])^2``
    where ``f_t = forecasts[t]`` is the path forecast at week t, ``lambda_t =
    f_t[0]`` the price applied at t, and ``f_{t-s}[s]`` the slot of an earlier
    forecast that refers to week t. Forecast terms without history are skipped. Volumes are
    divided by ``volume_scale`` and prices by ``price_scale`` before squaring.
    Weeks with an infinite limit contribute no violation term.
    """
    limits = np.asarray(limits, dtype=float)
    T = len(volumes)
    if len(forecasts) != T or limits.shape[0] < T:
        raise DomainError("volumes, limits and forecasts must cover the same weeks")
    total = 0.0
    for t in range(T):
        if np.isfinite(limits[t]):
            excess = ad.relu(ad.mul(ad.sub(volumes[t], limits[t]), 1.0 / volume_scale))
            total = ad.add(total, ad.mul(ad.square(excess), violation_weight))
        f_t = forecasts[t]
        lam_t = ad.mul(ad.getitem(f_t, 0), 1.0 / price_scale)
        l1 = ad.sum(ad.absolute(ad.mul(f_t, 1.0 / price_scale)))
        total = ad.add(total, ad.mul(l1, price_weight))
        L = np.shape(ad.value(f_t))[0] - 1
        for s in range(1, L + 1):
            if t - s < 0:
                break
            past = ad.mul(ad.getitem(forecasts[t - s], s), 1.0 / price_scale)
            total = ad.add(total, ad.mul(ad.square(ad.sub(lam_t, past)), mse_weight))
    return total


# ---------------------------------------------------------------------------
# model predictive control

def mean_path_world(world: ExoWorld, week: int, horizon: int) -> ExoWorld:
    """Replace weeks ``week..week+horizon`` by conditional-mean forecasts.

    Demand becomes the trailing 12-week mean; arrival shares and supply caps
    the mean over all observed weeks (the current week's values when there is
    no history). Earlier weeks are kept as observed.
    """
    stop = min(world.horizon, week + horizon + 1)
    demand = np.array(world.demand)
    shares_j, shares_l = np.array(world.shares_jit), np.array(world.shares_llt)
    cap_j, cap_l = np.array(world.cap_jit), np.array(world.cap_llt)
    d = trailing_mean(world.demand, week, MEAN_WINDOW)
    demand[:, week:stop] = d[:, None]
    lo = 0 if week > 0 else week
    hi = week if week > 0 else week + 1
    for arr, src in ((shares_j, world.shares_jit), (shares_l, world.shares_llt)):
        arr[:, week:stop] = src[:, lo:hi].mean(axis=1, keepdims=True)
        arr[:, week:stop] /= arr[:, week:stop].sum(axis=-1, keepdims=True)
    for arr, src in ((cap_j, world.cap_jit), (cap_l, world.cap_llt)):
        arr[:, week:stop] = src[:, lo:hi].mean(axis=1, keepdims=True)
    return world.replace(demand=demand, shares_jit=shares_j, shares_llt=shares_l,
                         cap_jit=cap_j, cap_llt=cap_l)


@dataclass
class MpcConfig:
    step: float | None = None          # dual step; None: 0.5 * price unit / mean finite K
    tol: float = 0.01                  # max relative violation accepted
    max_iter: int = 200
    warm_start: bool = True            # start each week from last week's path, shifted


def _zero_order(obs: Observation) -> Action:
    n = np.atleast_1d(np.arange(obs.world.num_products)[obs.products]).size
    return Action(np.zeros(n), np.zeros(n))


def mpc_dual_search(world: ExoWorld, week: int, state: SimState, policy, horizon: int, limits,
                    products=slice(None), cfg: MpcConfig | None = None, last_price: float = 0.0,
                    start=None) -> PricePath:
    """Projected subgradient search for capacity prices over ``week..week+horizon``.

    Simulates ``policy`` on the conditional-mean world with candidate prices,
    then ``lambda_s <- max(0, lambda_s + step * (vol_s - K_s))``. A week whose
    volume would exceed ``K_s`` even with no further orders is held to that
    floor instead, since no price can do better. Stops when the largest
    relative violation is below ``tol``; at the iteration cap returns the
    least-violating iterate with ``converged=False``.
    """
    cfg = cfg or MpcConfig()
    limits = np.asarray(limits, dtype=float)
    stop = min(world.horizon, week + horizon + 1)
    n = stop - week
    k = limits[week:stop]
    finite = np.isfinite(k)
    if not finite.any():
        return PricePath(week, np.zeros(horizon + 1), converged=True, iterations=0)
    lam = np.zeros(horizon + 1) if start is None else np.maximum(np.array(start, dtype=float), 0.0)
    lam[:n] = np.where(finite, lam[:n], 0.0)
    step_size = cfg.step if cfg.step is not None else 0.5 * price_unit(world) / float(np.mean(k[finite]))
    mean_world = mean_path_world(world, week, horizon)
    floor = rollout(mean_world, products, _zero_order, start_state=state, end_week=stop,
                    penalize=False).volumes
    k_safe = np.where(finite, k, 1.0)
    target = np.where(finite, np.maximum(k_safe, floor + 0.5 * cfg.tol * k_safe), np.inf)
    best, best_viol = lam.copy(), np.inf
    for it in range(1, cfg.max_iter + 1):
        prices = np.zeros(world.horizon)
        prices[week:stop] = lam[:n]
        prices[stop:] = lam[n - 1]
        traj = rollout(mean_world, products, policy, prices=prices, start_state=state,
                       end_week=stop, price_horizon=horizon, penalize=False, last_price=last_price)
        excess = np.where(finite, traj.volumes - target, -np.inf)
        rel = float(np.max(excess / k_safe))
        if rel < best_viol:
            best, best_viol = lam.copy(), rel
        if rel < cfg.tol:
            return PricePath(week, lam, converged=True, iterations=it)
        lam[:n] = np.maximum(0.0, lam[:n] + step_size * excess)
    log.warning("MPC dual search hit the iteration cap at week %d (violation %.3f)", week, best_viol)
    return PricePath(week, best, converged=False, iterations=cfg.max_iter)


class MpcCoordinator:
    """Receding-horizon MPC: re-plans every week and applies the first price."""

    name = "mpc"

    def __init__(self, policy, limits, horizon: int, cfg: MpcConfig | None = None):
        self.policy = policy
        self.limits = np.asarray(limits, dtype=float)
        self.horizon = horizon
        self.cfg = cfg or MpcConfig()
        self.paths: list[PricePath] = []

    def __call__(self, obs: Observation):
        start = None
        if self.cfg.warm_start and self.paths:
            prev = self.paths[-1].prices
            start = np.append(prev[1:], prev[-1])
        path = mpc_dual_search(obs.world, obs.week, obs.state.detached(), self.policy, self.horizon,
                               self.limits, obs.products, self.cfg, obs.last_price, start)
        self.paths.append(path)
        return path.prices


def export_price_paths(paths: list[PricePath], path) -> None:
    """Rows ``week, horizon offset, lambda``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["week", "offset", "lambda"])
        for p in paths:
            for s, lam in enumerate(np.asarray(ad.value(p.prices), dtype=float)):
                w.writerow([p.week, s, repr(float(lam))])
