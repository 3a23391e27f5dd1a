"""Exogenous world model: demand, economics, vendor constraints, arrival shares, capacity.

Everything here is independent of the buy policy. An :class:`ExoWorld` holds
the full exogenous paths for every product; an :class:`ExoProductWeek` is a
view of one week, either for one product (scalar fields) or for a population
of products (aligned arrays, leading axis = product).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

SHARE_TOL = 1e-9
WEEKS_PER_YEAR = 52
# weeks of year carrying demand spikes; the generator and the featurizers share this calendar
HOLIDAY_WEEKS = (47, 51)


class DomainError(ValueError):
    """Input outside the domain of an operation."""


@dataclass(frozen=True)
class VendorConstraints:
    """Minimum order quantity and batch size for one channel.

    ``batch_size == 0`` switches batch rounding off (continuous quantities).
    Fields may be arrays for a population of products.
    """

    min_order_qty: float | np.ndarray = 0.0
    batch_size: float | np.ndarray = 0.0

    def __post_init__(self):
        moq = np.asarray(self.min_order_qty, dtype=float)
        batch = np.asarray(self.batch_size, dtype=float)
        if np.any(moq < 0) or np.any(~np.isfinite(moq)):
            raise DomainError("min_order_qty must be finite and >= 0")
        if np.any((batch != 0) & (batch < 1)) or np.any(~np.isfinite(batch)):
            raise DomainError("batch_size must be >= 1 (or 0 for no rounding)")

    def __getitem__(self, idx) -> "VendorConstraints":
        return VendorConstraints(np.asarray(self.min_order_qty)[idx], np.asarray(self.batch_size)[idx])


TRIVIAL_VENDOR = VendorConstraints(0.0, 0.0)


def post_process(q, moq, batch) -> np.ndarray:
    """Vectorised vendor post-processor on plain arrays."""
    q = np.asarray(q, dtype=float)
    moq = np.asarray(moq, dtype=float)
    batch = np.asarray(batch, dtype=float)
    lifted = np.maximum(q, moq)
    safe = np.where(batch > 0, batch, 1.0)
    # the 1e-9 slack keeps exact multiples fixed, which makes the map idempotent
    rounded = np.where(batch > 0, np.ceil(lifted / safe - 1e-9) * safe, lifted)
    keep = (q > 0) & (q >= 0.5 * moq)
    return np.where(keep, rounded, 0.0)


def post_process_order(q: float, vc: VendorConstraints) -> float:
    """Apply the vendor's MOQ and batch constraints to an order quantity.

    Orders below half the MOQ are dropped; the rest are lifted to the MOQ and
    rounded up to a whole number of batches.

    >>> post_process_order(12, VendorConstraints(10, 5))
    15.0
    """
    if np.any(np.asarray(q) < 0):
        raise DomainError(f"order quantity must be >= 0, got {q}")
    out = post_process(q, vc.min_order_qty, vc.batch_size)
    return float(out) if out.ndim == 0 else out


def filled_quantity(q, cap, vc: VendorConstraints):
    """``min(cap, f_p(q))``; on a tape the post-processor is straight-through."""
    qv = ad.value(q)
    if np.any(np.asarray(qv) < 0):
        raise DomainError("order quantity must be >= 0")
    q_tilde = ad.straight_through(q, post_process(qv, vc.min_order_qty, vc.batch_size))
    return ad.minimum(np.asarray(cap, dtype=float), q_tilde)


def compute_arrivals(q, cap, shares, vc: VendorConstraints = TRIVIAL_VENDOR, lead: int | None = None):
    """Quantities arriving at lead offsets ``0..len(shares)-1`` for one order.

    ``shares`` may be a matrix (one row per product) when ``q`` and ``cap`` are
    vectors. Works on tape values.
    """
    shares = np.asarray(shares, dtype=float)
    if lead is not None and shares.shape[-1] != lead + 1:
        raise DomainError(f"shares have {shares.shape[-1]} offsets, lead time {lead} needs {lead + 1}")
    if np.any(np.asarray(cap) < 0):
        raise DomainError("supply cap must be >= 0")
    filled = filled_quantity(q, cap, vc)
    if shares.ndim == 1 and np.ndim(ad.value(filled)) == 0:
        return ad.mul(filled, shares)
    return ad.mul(ad.expand_dims(filled, -1), shares)


@dataclass(frozen=True)
class ExoProductWeek:
    demand: float | np.ndarray
    price: float | np.ndarray
    cost_jit: float | np.ndarray
    cost_llt: float | np.ndarray
    holding_cost: float | np.ndarray
    arrival_shares_jit: np.ndarray
    arrival_shares_llt: np.ndarray
    supply_cap_jit: float | np.ndarray = np.inf
    supply_cap_llt: float | np.ndarray = np.inf
    vendor_jit: VendorConstraints = TRIVIAL_VENDOR
    vendor_llt: VendorConstraints = TRIVIAL_VENDOR


@dataclass(frozen=True)
class Action:
    qty_jit: object
    qty_llt: object


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ExoWorld:
    """All exogenous paths. Array axes are (product, week[, lead offset]).

    Arrays are made read-only on construction so a world cannot be altered by
    anything that simulates on it.
    """

    lead_jit: int
    lead_llt: int
    init_inventory: np.ndarray
    unit_volumes: np.ndarray
    demand: np.ndarray
    price: np.ndarray
    cost_jit: np.ndarray
    cost_llt: np.ndarray
    holding_cost: np.ndarray
    shares_jit: np.ndarray
    shares_llt: np.ndarray
    cap_jit: np.ndarray
    cap_llt: np.ndarray
    moq_jit: np.ndarray
    batch_jit: np.ndarray
    moq_llt: np.ndarray
    batch_llt: np.ndarray
    capacity_limits: np.ndarray
    discount_factor: float = 0.99
    week_offset: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("init_inventory", "unit_volumes", "demand", "price", "cost_jit", "cost_llt",
                     "holding_cost", "shares_jit", "shares_llt", "cap_jit", "cap_llt", "moq_jit",
                     "batch_jit", "moq_llt", "batch_llt", "capacity_limits"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n, t = self.demand.shape
        if self.shares_jit.shape[:2] != (n, t) or self.shares_llt.shape[:2] != (n, t):
            raise DomainError("arrival share arrays must be (products, weeks, offsets)")
        if self.shares_jit.shape[2] != self.lead_jit + 1 or self.shares_llt.shape[2] != self.lead_llt + 1:
            raise DomainError("arrival share length must equal lead time + 1")
        for name in ("price", "cost_jit", "cost_llt", "holding_cost", "cap_jit", "cap_llt"):
            if getattr(self, name).shape != (n, t):
                raise DomainError(f"{name} must have shape {(n, t)}")
        for name in ("init_inventory", "unit_volumes", "moq_jit", "batch_jit", "moq_llt", "batch_llt"):
            if getattr(self, name).shape != (n,):
                raise DomainError(f"{name} must have shape {(n,)}")
        if self.capacity_limits.shape != (t,):
            raise DomainError(f"capacity_limits must have shape {(t,)}")

    @property
    def num_products(self) -> int:
        return self.demand.shape[0]

    @property
    def horizon(self) -> int:
        return self.demand.shape[1]

    def vendor(self, products=slice(None)) -> tuple[VendorConstraints, VendorConstraints]:
        return (VendorConstraints(self.moq_jit[products], self.batch_jit[products]),
                VendorConstraints(self.moq_llt[products], self.batch_llt[products]))

    def week(self, product, t: int) -> ExoProductWeek:
        """Exogenous data of week ``t``; ``product`` may be an index or an index array."""
        if not 0 <= t < self.horizon:
            raise DomainError(f"week {t} outside horizon {self.horizon}")
        p = product
        vj, vl = self.vendor(p)
        return ExoProductWeek(
            demand=self.demand[p, t], price=self.price[p, t], cost_jit=self.cost_jit[p, t],
            cost_llt=self.cost_llt[p, t], holding_cost=self.holding_cost[p, t],
            arrival_shares_jit=self.shares_jit[p, t], arrival_shares_llt=self.shares_llt[p, t],
            supply_cap_jit=self.cap_jit[p, t], supply_cap_llt=self.cap_llt[p, t],
            vendor_jit=vj, vendor_llt=vl,
        )

    def week_of_year(self, t):
        return (np.asarray(t) + self.week_offset) % WEEKS_PER_YEAR

    def replace(self, **changes) -> "ExoWorld":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ExoWorld(**fields)

    def subset(self, products) -> "ExoWorld":
        """World restricted to ``products`` (capacity limits kept as-is)."""
        p = np.asarray(products)
        return self.replace(**{k: getattr(self, k)[p] for k in _PRODUCT_FIELDS})

    def window(self, start: int, stop: int) -> "ExoWorld":
        """Weeks ``start..stop-1`` as a new world (initial inventory unchanged)."""
        changes = {k: getattr(self, k)[:, start:stop] for k in _WEEK_FIELDS}
        changes["capacity_limits"] = self.capacity_limits[start:stop]
        changes["week_offset"] = self.week_offset + start
        return self.replace(**changes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.lead_jit, self.lead_llt, self.discount_factor, self.week_offset)).encode())
        for k in _ARRAY_FIELDS:
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ExoWorld):
            return NotImplemented
        return (self.lead_jit == other.lead_jit and self.lead_llt == other.lead_llt
                and self.discount_factor == other.discount_factor
                and self.week_offset == other.week_offset and self.meta == other.meta
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in _ARRAY_FIELDS))


_WEEK_FIELDS = ("demand", "price", "cost_jit", "cost_llt", "holding_cost", "shares_jit",
                "shares_llt", "cap_jit", "cap_llt")
_PRODUCT_FIELDS = _WEEK_FIELDS + ("init_inventory", "unit_volumes", "moq_jit", "batch_jit",
                                  "moq_llt", "batch_llt")
_ARRAY_FIELDS = _PRODUCT_FIELDS + ("capacity_limits",)


@dataclass(frozen=True)
class Violation:
    rule: str
    product: int | None = None
    week: int | None = None
    detail: str = ""


def validate_world(w: ExoWorld) -> list[Violation]:
    """Every violated world invariant, with product/week coordinates. Empty means valid."""
    out: list[Violation] = []

    def per_cell(mask, rule, detail):
        for i, t in zip(*np.nonzero(mask)):
            out.append(Violation(rule, int(i), int(t), detail))

    if not w.lead_llt > w.lead_jit >= 0:
        out.append(Violation("lead_times", detail=f"need L2 > L1 >= 0, got {w.lead_jit}, {w.lead_llt}"))
    if not 0 < w.discount_factor <= 1:
        out.append(Violation("discount_factor", detail=f"{w.discount_factor} not in (0, 1]"))
    for name, shares in (("jit", w.shares_jit), ("llt", w.shares_llt)):
        per_cell(np.any(shares < 0, axis=2), f"shares_{name}_negative", "negative arrival share")
        per_cell(np.abs(shares.sum(axis=2) - 1.0) > SHARE_TOL, f"shares_{name}_sum",
                 "arrival shares do not sum to 1")
    per_cell(w.cost_llt > w.cost_jit, "llt_discount", "cost_llt exceeds cost_jit")
    for name in ("demand", "price", "cost_jit", "cost_llt", "holding_cost", "cap_jit", "cap_llt"):
        a = getattr(w, name)
        per_cell(~(a >= 0), f"{name}_nonnegative", f"{name} must be >= 0")
    for i in np.nonzero(~(w.init_inventory >= 0))[0]:
        out.append(Violation("init_inventory", int(i), None, "initial inventory must be >= 0"))
    for i in np.nonzero(~(w.unit_volumes > 0))[0]:
        out.append(Violation("unit_volume", int(i), None, "unit volume must be > 0"))
    for name in ("moq_jit", "moq_llt"):
        for i in np.nonzero(~(getattr(w, name) >= 0))[0]:
            out.append(Violation(name, int(i), None, "minimum order quantity must be >= 0"))
    for name in ("batch_jit", "batch_llt"):
        b = getattr(w, name)
        for i in np.nonzero((b != 0) & ~(b >= 1))[0]:
            out.append(Violation(name, int(i), None, "batch size must be >= 1 (or 0)"))
    for t in np.nonzero(~(w.capacity_limits > 0))[0]:
        out.append(Violation("capacity_limit", None, int(t), "capacity limit must be > 0"))
    return out


def price_unit(world: ExoWorld) -> float:
    """Currency per unit volume: median over products of price / unit volume."""
    return float(np.median(world.price[:, 0] / world.unit_volumes))
