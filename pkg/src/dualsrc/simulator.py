"""Inventory dynamics, per-week rewards and episode rollouts.

``step`` and ``rollout`` work on one product (scalar state) or on a population
(state arrays with a leading product axis), and on tape values, so the same
code serves evaluation and gradient training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .exo import Action, DomainError, ExoProductWeek, ExoWorld, compute_arrivals

ORDER_HISTORY = 8


@dataclass(frozen=True)
class SimState:
    """Endogenous state at the start of week ``week``.

    ``pipeline_jit[..., k]`` is the quantity due to arrive ``k`` weeks from now
    from orders already placed. ``order_history`` keeps the most recent
    ``(qty_jit, qty_llt)`` pairs, newest last, for featurisation.
    """

    onhand: object
    pipeline_jit: object
    pipeline_llt: object
    week: int = 0
    order_history: tuple = ()
    last_arrivals: object = 0.0

    @classmethod
    def initial(cls, onhand, lead_jit: int, lead_llt: int, week: int = 0) -> "SimState":
        onhand = np.asarray(onhand, dtype=float)
        return cls(onhand, np.zeros(onhand.shape + (lead_jit + 1,)),
                   np.zeros(onhand.shape + (lead_llt + 1,)), week, (), np.zeros(onhand.shape))

    @classmethod
    def start_of(cls, world: ExoWorld, products=slice(None)) -> "SimState":
        return cls.initial(world.init_inventory[products], world.lead_jit, world.lead_llt)

    def inflight(self, within: int | np.ndarray | None = None):
        """Pipeline quantity due within ``within`` weeks (inclusive); all of it when None."""
        pj, pl = ad.value(self.pipeline_jit), ad.value(self.pipeline_llt)
        if within is None:
            return pj.sum(axis=-1) + pl.sum(axis=-1)
        within = np.asarray(within)
        mj = np.arange(pj.shape[-1]) <= within[..., None]
        ml = np.arange(pl.shape[-1]) <= within[..., None]
        return (pj * mj).sum(axis=-1) + (pl * ml).sum(axis=-1)

    def detached(self) -> "SimState":
        return replace(self, onhand=np.array(ad.value(self.onhand)),
                       pipeline_jit=np.array(ad.value(self.pipeline_jit)),
                       pipeline_llt=np.array(ad.value(self.pipeline_llt)),
                       order_history=tuple((np.array(ad.value(a)), np.array(ad.value(b)))
                                           for a, b in self.order_history),
                       last_arrivals=np.array(ad.value(self.last_arrivals)))


@dataclass
class StepOutcome:
    reward: object
    sales: object
    onhand_end: object
    arrivals_jit: object      # units received this week from the JIT pipeline
    arrivals_llt: object
    inflight_total: object    # pipeline quantity still outstanding after the week
    fulfilled_jit: object     # sum of arrivals generated by this week's JIT order
    fulfilled_llt: object
    demand: object = 0.0
    lam: float = 0.0


def _shift(pipe):
    zeros = np.zeros(np.shape(ad.value(pipe))[:-1] + (1,))
    return ad.concat([ad.getitem(pipe, (Ellipsis, slice(1, None))), zeros], axis=-1)


def step(state: SimState, exo: ExoProductWeek, action: Action, lam=None, unit_volume=1.0):
    """Advance one week. Returns ``(next_state, outcome)``.

    The reward charges purchase cost on the arrivals generated by this week's
    orders and, when ``lam`` is given, the capacity penalty ``lam * v * I_t``.
    """
    lj = np.shape(exo.arrival_shares_jit)[-1]
    ll = np.shape(exo.arrival_shares_llt)[-1]
    if np.shape(ad.value(state.pipeline_jit))[-1] != lj or np.shape(ad.value(state.pipeline_llt))[-1] != ll:
        raise DomainError("pipeline lengths do not match the arrival-share lengths")
    o_jit = compute_arrivals(action.qty_jit, exo.supply_cap_jit, exo.arrival_shares_jit, exo.vendor_jit)
    o_llt = compute_arrivals(action.qty_llt, exo.supply_cap_llt, exo.arrival_shares_llt, exo.vendor_llt)
    pipe_j = ad.add(state.pipeline_jit, o_jit)
    pipe_l = ad.add(state.pipeline_llt, o_llt)
    arr_j = ad.getitem(pipe_j, (Ellipsis, 0))
    arr_l = ad.getitem(pipe_l, (Ellipsis, 0))
    arrivals = ad.add(arr_j, arr_l)
    onhand_pre = ad.add(state.onhand, arrivals)
    demand = np.asarray(exo.demand, dtype=float)
    sales = ad.minimum(demand, onhand_pre)
    onhand_end = ad.relu(ad.sub(onhand_pre, demand))
    fill_j = ad.sum(o_jit, axis=-1)
    fill_l = ad.sum(o_llt, axis=-1)
    reward = (exo.price * sales - exo.cost_jit * fill_j - exo.cost_llt * fill_l
              - exo.holding_cost * onhand_end)
    lam_v = 0.0
    if lam is not None:
        reward = reward - lam * unit_volume * onhand_end
        lam_v = lam
    pipe_j, pipe_l = _shift(pipe_j), _shift(pipe_l)
    history = (state.order_history + ((action.qty_jit, action.qty_llt),))[-ORDER_HISTORY:]
    nxt = SimState(onhand_end, pipe_j, pipe_l, state.week + 1, history, arrivals)
    inflight = ad.value(pipe_j).sum(axis=-1) + ad.value(pipe_l).sum(axis=-1)
    return nxt, StepOutcome(reward, sales, onhand_end, arr_j, arr_l, inflight, fill_j, fill_l,
                            demand, lam_v)


def network_volume(onhand, unit_volumes) -> float:
    """Total storage volume ``sum_i v_i * I_i``.

    ``onhand`` may be a population SimState, a sequence of per-product states,
    or an array of on-hand quantities.
    """
    if isinstance(onhand, SimState):
        onhand = ad.value(onhand.onhand)
    elif len(onhand) and isinstance(onhand[0], SimState):
        onhand = [float(ad.value(s.onhand)) for s in onhand]
    onhand = np.asarray(onhand, dtype=float)
    unit_volumes = np.asarray(unit_volumes, dtype=float)
    if onhand.shape != unit_volumes.shape:
        raise DomainError(f"{onhand.shape[0] if onhand.ndim else 1} states vs "
                          f"{unit_volumes.shape[0] if unit_volumes.ndim else 1} unit volumes")
    return float(np.dot(onhand, unit_volumes))


@dataclass
class Observation:
    """What a policy sees at the start of ``week``: history only, never the future."""

    world: ExoWorld
    products: object
    week: int
    state: SimState
    prices: np.ndarray | None = None     # forecast path lambda_{t..t+L}
    last_price: float = 0.0
    tape: ad.Tape | None = None


class Policy(Protocol):
    def __call__(self, obs: Observation) -> Action: ...


def price_window(prices, week: int, horizon: int) -> np.ndarray:
    """``prices[week : week + horizon + 1]``, padded with the last available value."""
    prices = np.asarray(prices, dtype=float)
    out = prices[week:week + horizon + 1]
    if out.size < horizon + 1:
        pad = out[-1] if out.size else (prices[-1] if prices.size else 0.0)
        out = np.concatenate([out, np.full(horizon + 1 - out.size, pad)])
    return out


@dataclass
class Trajectory:
    outcomes: list
    discounted: object                  # per-product cumulative discounted reward
    final_state: SimState
    start_week: int
    products: object
    volumes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    forecasts: list = field(default_factory=list)
    volume_vars: list = field(default_factory=list)   # on-tape network volumes, when taped

    @property
    def total(self) -> float:
        return float(np.sum(ad.value(self.discounted)))

    def __len__(self):
        return len(self.outcomes)


def _check_orders(q, name):
    qv = np.asarray(ad.value(q), dtype=float)
    if not np.all(np.isfinite(qv)):
        raise DomainError(f"policy returned non-finite {name} order")
    if np.any(qv < 0):
        raise DomainError(f"policy returned negative {name} order")


def rollout(world: ExoWorld, products, policy: Callable[[Observation], Action], prices=None,
            start_state: SimState | None = None, end_week: int | None = None,
            coordinator=None, price_horizon: int | None = None, penalize: bool = True,
            tape: ad.Tape | None = None, discount: float | None = None,
            last_price=0.0) -> Trajectory:
    """Run ``policy`` from ``start_state.week`` to ``end_week`` (default: horizon).

    ``prices`` is a per-week capacity-price path (length = world horizon);
    ``coordinator`` instead produces a forecast path each week from the
    observation. The realised price of week t is slot 0 of the path and, with
    ``penalize``, enters the reward as ``lam * v * I_t``.
    Cumulative reward is ``sum_k gamma^k R_{start+k}``.
    """
    if isinstance(products, slice):
        products = np.arange(world.num_products)[products]
    if start_state is None:
        start_state = SimState.start_of(world, products)
    end_week = world.horizon if end_week is None else end_week
    if not 0 <= start_state.week < world.horizon or end_week > world.horizon:
        raise DomainError(f"start week {start_state.week} / end week {end_week} outside horizon {world.horizon}")
    gamma = world.discount_factor if discount is None else discount
    horizon = world.lead_llt if price_horizon is None else price_horizon
    volumes_unit = world.unit_volumes[products]
    state = start_state
    outcomes, vols, lams, forecasts, vol_vars = [], [], [], [], []
    total = 0.0
    for k, t in enumerate(range(start_state.week, end_week)):
        path = None
        if coordinator is not None:
            path = coordinator(Observation(world, products, t, state, None, last_price, tape))
        elif prices is not None:
            path = price_window(prices, t, horizon)
        obs = Observation(world, products, t, state, path, last_price, tape)
        action = policy(obs)
        _check_orders(action.qty_jit, "JIT")
        _check_orders(action.qty_llt, "LLT")
        lam = None
        if path is not None:
            lam = path[0]
            forecasts.append(path)
        state, out = step(state, world.week(products, t), action,
                          lam if penalize else None, volumes_unit)
        out.lam = float(ad.value(lam)) if lam is not None else 0.0
        last_price = lam if lam is not None else 0.0
        total = ad.add(total, ad.mul(out.reward, gamma ** k))
        outcomes.append(out)
        vols.append(float(np.dot(np.atleast_1d(ad.value(state.onhand)), np.atleast_1d(volumes_unit))))
        if tape is not None:
            vol_vars.append(ad.sum(ad.mul(state.onhand, volumes_unit)))
        lams.append(out.lam)
    return Trajectory(outcomes, total, state, start_state.week, products, np.array(vols),
                      np.array(lams), forecasts, vol_vars)


TRAJECTORY_COLUMNS = ("week", "product", "demand", "sales", "onhand", "arrivals_jit",
                      "arrivals_llt", "reward", "lambda")


def trajectory_rows(traj: Trajectory):
    products = np.atleast_1d(traj.products)
    for k, out in enumerate(traj.outcomes):
        cols = [np.atleast_1d(np.asarray(ad.value(x), dtype=float)) for x in
                (out.demand, out.sales, out.onhand_end, out.arrivals_jit, out.arrivals_llt, out.reward)]
        for j, p in enumerate(products):
            yield (traj.start_week + k, int(p), *(float(c[j]) for c in cols), out.lam)


def export_trajectory(traj: Trajectory, path) -> None:
    """Write one row per (week, product) in ``TRAJECTORY_COLUMNS``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for row in trajectory_rows(traj):
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
