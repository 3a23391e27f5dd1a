"""Order-generating policies: BSHT, improved TBS and the neural dual-sourcing policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exo import HOLIDAY_WEEKS, WEEKS_PER_YEAR, Action, DomainError, ExoWorld
from .simulator import Observation, SimState

TIP_WINDOW = 12
TBS_WINDOW = 12
SCALE_WINDOW = 12
ALPHA_GRID = tuple(np.round(np.arange(0.0, 1.5001, 0.25), 2))


def trailing_mean(demand: np.ndarray, week: int, window: int) -> np.ndarray:
    """Mean of the last ``window`` observed weeks before ``week`` (0 with no history)."""
    lo = max(0, week - window)
    if week <= lo:
        return np.zeros(demand.shape[:-1])
    return demand[..., lo:week].mean(axis=-1)


def median_lead(shares: np.ndarray) -> np.ndarray:
    """Smallest offset at which the cumulative arrival share reaches one half."""
    cum = np.cumsum(shares, axis=-1)
    return np.argmax(cum >= 0.5 - 1e-12, axis=-1)


@dataclass(frozen=True)
class HorizonTip:
    level: float | np.ndarray
    lead: int | np.ndarray


def horizon_tip(world: ExoWorld, product, week: int) -> HorizonTip:
    """Order-up-to level covering demand until the median JIT arrival.

    ``level = trailing_mean_demand * (lead + 1)`` with ``lead`` the median
    offset of this week's JIT arrival shares.
    """
    lead = median_lead(world.shares_jit[product, week])
    mean = trailing_mean(world.demand[product], week, TIP_WINDOW)
    return HorizonTip(mean * (lead + 1), lead)


def order_up_to(tip, onhand, inflight):
    return np.maximum(0.0, np.asarray(tip) - np.asarray(onhand) - np.asarray(inflight))


@dataclass(frozen=True)
class TbsConfig:
    alpha: float = 1.0
    window: int = TBS_WINDOW

    def __post_init__(self):
        if self.alpha < 0:
            raise DomainError("alpha must be >= 0")


def tbs_order(world: ExoWorld, product, week: int, state: SimState, cfg: TbsConfig) -> Action:
    """Constant-rate LLT order plus a JIT order back up to the horizon tip.

    LLT: ``alpha / window * sum(d[t-window .. t-1])`` (missing weeks count as 0).
    JIT: tip minus on-hand minus everything in flight that lands within the
    median JIT lead time, floored at zero.
    """
    tip = horizon_tip(world, product, week)
    onhand = ad.value(state.onhand)
    qty_jit = order_up_to(tip.level, onhand, state.inflight(tip.lead))
    lo = max(0, week - cfg.window)
    recent = world.demand[product, lo:week] if week > 0 else np.zeros(np.shape(onhand) + (0,))
    qty_llt = cfg.alpha * np.sum(recent, axis=-1) / cfg.window
    return Action(qty_jit, np.asarray(qty_llt, dtype=float))


def bsht_order(world: ExoWorld, product, week: int, state: SimState) -> Action:
    """JIT-only base-stock to the horizon tip."""
    a = tbs_order(world, product, week, state, TbsConfig(alpha=0.0))
    return Action(a.qty_jit, np.zeros_like(a.qty_jit))


@dataclass
class TbsPolicy:
    alpha: float = 1.0
    name: str = "tbs"

    def __call__(self, obs: Observation) -> Action:
        return tbs_order(obs.world, obs.products, obs.week, obs.state, TbsConfig(self.alpha))


@dataclass
class BshtPolicy:
    name: str = "bsht"

    def __call__(self, obs: Observation) -> Action:
        return bsht_order(obs.world, obs.products, obs.week, obs.state)


# ---------------------------------------------------------------------------
# features

@dataclass(frozen=True)
class FeatureConfig:
    """Layout of the buy-policy feature vector. ``price_horizon=None`` means unpriced."""

    lead_jit: int
    lead_llt: int
    demand_window: int = 8
    action_window: int = 4
    price_horizon: int | None = None

    @property
    def dim(self) -> int:
        d = (self.demand_window + 2 * self.action_window + 1 + (self.lead_jit + 1)
             + (self.lead_llt + 1) + 3 + 3 + 2 + 1)
        if self.price_horizon is not None:
            d += self.price_horizon + 2
        return d

    def slots(self) -> dict[str, slice]:
        """Named column ranges, in order."""
        sizes = [("demand", self.demand_window), ("orders_jit", self.action_window),
                 ("orders_llt", self.action_window), ("onhand", 1),
                 ("pipeline_jit", self.lead_jit + 1), ("pipeline_llt", self.lead_llt + 1),
                 ("economics", 3), ("calendar", 3), ("static", 2)]
        if self.price_horizon is not None:
            sizes += [("prices", self.price_horizon + 1), ("last_price", 1)]
        sizes.append(("bias", 1))
        out, k = {}, 0
        for name, n in sizes:
            out[name] = slice(k, k + n)
            k += n
        return out

    @classmethod
    def for_world(cls, world: ExoWorld, priced: bool = False, **kw) -> "FeatureConfig":
        return cls(world.lead_jit, world.lead_llt, price_horizon=world.lead_llt if priced else None, **kw)


def demand_scale(world: ExoWorld, products, week: int) -> np.ndarray:
    return trailing_mean(world.demand[products], week, SCALE_WINDOW) + 1.0


def holiday_distance(week_of_year) -> np.ndarray:
    """Weeks until the next holiday week, divided by 52."""
    woy = np.asarray(week_of_year)
    d = np.min([(h - woy) % WEEKS_PER_YEAR for h in HOLIDAY_WEEKS], axis=0)
    return d / WEEKS_PER_YEAR


def _safe_ratio(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros(np.broadcast(a, b).shape), where=b > 0)


def _col(x, n):
    """Reshape a per-product quantity (scalar or Var) into an ``(n, 1)`` column."""
    v = ad.value(x)
    if np.ndim(v) == 0:
        x = ad.mul(x, np.ones(n)) if isinstance(x, ad.Var) else np.full(n, float(v))
    return ad.reshape(x, (n, 1))


def featurize(world: ExoWorld, products, week: int, state: SimState, cfg: FeatureConfig,
              prices=None, last_price=0.0):
    """Feature matrix (one row per product; a vector for a single product) and demand scale.

    Reads only data observable at the start of ``week``: demand strictly before
    ``week``, this week's prices and costs, and the endogenous state. Quantities
    are divided by the demand scale; costs by the selling price; capacity prices
    enter as ``lambda * v / p``.
    """
    single = np.ndim(products) == 0 and not isinstance(products, slice)
    idx = np.atleast_1d(np.arange(world.num_products)[products])
    n = idx.size
    scale = demand_scale(world, idx, week)
    cols = []

    d = np.zeros((n, cfg.demand_window))
    for k in range(1, cfg.demand_window + 1):
        if week - k >= 0:
            d[:, k - 1] = world.demand[idx, week - k]
    cols.append(d / scale[:, None])

    hist = state.order_history[-cfg.action_window:][::-1]
    for which in (0, 1):
        pieces = [_col(h[which], n) for h in hist]
        pad = cfg.action_window - len(pieces)
        if pad:
            pieces.append(np.zeros((n, pad)))
        cols.append(ad.div(ad.concat(pieces, axis=1), scale[:, None]))

    cols.append(ad.div(_col(state.onhand, n), scale[:, None]))
    for pipe, lead in ((state.pipeline_jit, cfg.lead_jit), (state.pipeline_llt, cfg.lead_llt)):
        pipe = ad.reshape(pipe, (n, lead + 1))
        cols.append(ad.div(pipe, scale[:, None]))

    p = world.price[idx, week]
    econ = np.stack([_safe_ratio(world.cost_jit[idx, week], p), _safe_ratio(world.cost_llt[idx, week], p),
                     _safe_ratio(world.holding_cost[idx, week], p)], axis=1)
    cols.append(econ)
    woy = world.week_of_year(week)
    ang = 2.0 * np.pi * woy / WEEKS_PER_YEAR
    cols.append(np.tile([np.sin(ang), np.cos(ang), holiday_distance(woy)], (n, 1)))
    cols.append(np.stack([np.log(world.unit_volumes[idx]), np.log(scale) / 5.0], axis=1))

    if cfg.price_horizon is not None:
        per_unit = _safe_ratio(world.unit_volumes[idx], p)[:, None]
        if prices is None:
            prices = np.zeros(cfg.price_horizon + 1)
        if isinstance(prices, ad.Var):
            cols.append(ad.mul(ad.reshape(prices, (1, cfg.price_horizon + 1)), per_unit))
        else:
            prices = np.asarray(prices, dtype=float)
            if prices.shape != (cfg.price_horizon + 1,):
                raise DomainError(f"price path must have {cfg.price_horizon + 1} entries")
            cols.append(prices[None, :] * per_unit)
        cols.append(ad.mul(_col(last_price, 1), per_unit) if isinstance(last_price, ad.Var)
                    else float(last_price) * per_unit)
    cols.append(np.ones((n, 1)))

    feats = ad.concat(cols, axis=1)
    fv = ad.value(feats)
    if not np.all(np.isfinite(fv)):
        raise DomainError("non-finite feature value")
    if single:
        return ad.getitem(feats, 0), scale[0]
    return feats, scale


def rl_order(params: ad.MlpParams, features, scale, layers=None, llt_mask: bool = False) -> Action:
    """MLP forward, softplus, times demand scale. Works on one row or a matrix."""
    if layers is None:
        layers = params.layers()
    out = ad.softplus(ad.mlp_apply(layers, features, params.activation))
    q = ad.mul(out, np.expand_dims(np.asarray(scale, dtype=float), -1))
    qj = ad.getitem(q, (Ellipsis, 0))
    if llt_mask:
        return Action(qj, np.zeros(np.shape(ad.value(qj))))
    return Action(qj, ad.getitem(q, (Ellipsis, 1)))


# softplus(-0.433) ~= 0.5, i.e. each channel starts near half the trailing mean demand
INIT_OUTPUT_BIAS = float(np.log(np.expm1(0.5)))


def policy_network(cfg: FeatureConfig, hidden=(32, 32), seed: int = 0, zero: bool = False) -> ad.MlpParams:
    sizes = (cfg.dim, *hidden, 2)
    if zero:
        return ad.MlpParams.zeros(sizes)
    return ad.MlpParams.init(sizes, seed=seed, output_bias=[INIT_OUTPUT_BIAS, INIT_OUTPUT_BIAS])


@dataclass
class NeuralPolicy:
    """Shared MLP policy over per-product features; ``llt_mask`` gives the JIT-RL variant."""

    params: ad.MlpParams
    features: FeatureConfig
    llt_mask: bool = False
    name: str = "dualsrc-rl"
    theta: ad.Var | None = None
    _layers: list | None = field(default=None, repr=False)

    def bind(self, tape: ad.Tape) -> "NeuralPolicy":
        """Copy whose parameters are a leaf on ``tape`` (see ``theta``)."""
        theta = tape.variable(self.params.flat)
        return NeuralPolicy(self.params, self.features, self.llt_mask, self.name, theta,
                            self.params.layers(theta))

    def __call__(self, obs: Observation) -> Action:
        x, scale = featurize(obs.world, obs.products, obs.week, obs.state, self.features,
                             obs.prices, obs.last_price)
        if self._layers is None:
            self._layers = self.params.layers()
        return rl_order(self.params, x, scale, self._layers, self.llt_mask)
