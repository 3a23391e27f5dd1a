"""Seeded synthetic worlds and the ``world.dsw`` file format.

``world.dsw`` layout (UTF-8 text, ``\\n`` line endings)::

    #DSW <json header>
    [products]
    product,init_inventory,unit_volume,moq_jit,batch_jit,moq_llt,batch_llt
    ...one row per product...
    [capacity]
    week,limit
    ...one row per week...
    [weeks]
    product,week,demand,price,cost_jit,cost_llt,holding_cost,cap_jit,cap_llt,rho_jit_0..,rho_llt_0..
    ...one row per (product, week), product-major...
    #END

The header carries ``version``, ``num_products``, ``horizon``, ``lead_jit``,
``lead_llt``, ``discount_factor``, ``week_offset`` and ``meta`` (the generating
spec and path seed, when known). Floats are written with ``repr`` so a round
trip is exact.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass

import numpy as np

from .exo import HOLIDAY_WEEKS, WEEKS_PER_YEAR, DomainError, ExoWorld

FORMAT_VERSION = 1


class WorldFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


class WorldVersionError(WorldFormatError):
    pass


@dataclass(frozen=True)
class GenSpec:
    """Parameters of the synthetic world generator.

    Static product traits (base demand, economics, vendor terms, volumes) are
    drawn from ``seed``; the weekly paths from ``path_seed`` (defaults to
    ``seed``), so fresh exogenous samples of the same catalogue are cheap.
    """

    num_products: int = 200
    horizon: int = 124
    lead_jit: int = 2
    lead_llt: int = 6
    base_demand_median: float = 20.0
    base_demand_sigma: float = 0.6
    season_amplitude_max: float = 0.35
    noise_cv_min: float = 0.15
    noise_cv_max: float = 0.4
    holiday_lift_max: float = 0.6
    unit_cost_min: float = 4.0
    unit_cost_max: float = 12.0
    margin_min: float = 0.25
    margin_max: float = 0.6
    llt_discount_min: float = 0.7
    llt_discount_max: float = 0.95
    holding_rate: float = 0.015          # per week, fraction of JIT unit cost
    share_concentration: float = 30.0
    share_decay: float = 1.5
    cap_multiple: float = 6.0
    cap_dip_prob: float = 0.1
    cap_dip_min: float = 0.2
    cap_dip_max: float = 0.8
    moq_fraction_max: float = 0.3
    batch_choices: tuple = (1.0, 2.0, 5.0)
    unit_volume_sigma: float = 0.4
    init_cover_weeks: float = 2.0
    discount_factor: float = 0.99
    seed: int = 0

    def validate(self) -> None:
        if self.num_products < 1 or self.horizon < 1:
            raise DomainError("need at least one product and one week")
        if not self.lead_llt > self.lead_jit >= 0:
            raise DomainError("need lead_llt > lead_jit >= 0")
        if not 0 < self.llt_discount_min <= self.llt_discount_max < 1:
            raise DomainError("LLT discount range must lie in (0, 1)")
        for name in ("base_demand_median", "unit_cost_min", "unit_cost_max", "share_concentration",
                     "cap_multiple"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0")
        for name in ("base_demand_sigma", "season_amplitude_max", "noise_cv_min", "noise_cv_max",
                     "holiday_lift_max", "holding_rate", "margin_min", "cap_dip_prob",
                     "moq_fraction_max", "unit_volume_sigma", "init_cover_weeks"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if self.noise_cv_min > self.noise_cv_max or self.margin_min > self.margin_max:
            raise DomainError("min/max ranges are inverted")
        if not 0 < self.discount_factor <= 1:
            raise DomainError("discount_factor must be in (0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["batch_choices"] = list(self.batch_choices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        if "batch_choices" in d:
            d["batch_choices"] = tuple(float(b) for b in d["batch_choices"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise DomainError(f"unknown GenSpec fields: {sorted(unknown)}")
        return cls(**d)


def share_weights(lead: int, peak_lo: int, peak_hi: int, decay: float) -> np.ndarray:
    """Dirichlet mean profile over offsets ``0..lead`` peaked on ``[peak_lo, peak_hi]``."""
    j = np.arange(lead + 1)
    dist = np.maximum(peak_lo - j, 0) + np.maximum(j - peak_hi, 0)
    w = np.exp(-decay * dist)
    return w / w.sum()


def seasonality(week_of_year, amplitude) -> np.ndarray:
    """Annual multiplier ``1 + a * cos(2 pi (w - 48) / 52)``; peaks late in the year."""
    phase = 2.0 * np.pi * (np.asarray(week_of_year) - 48) / WEEKS_PER_YEAR
    return 1.0 + np.asarray(amplitude)[..., None] * np.cos(phase)


def catalogue(spec: GenSpec) -> dict[str, np.ndarray]:
    """Static per-product traits drawn from ``spec.seed``."""
    n = spec.num_products
    static = np.random.default_rng([spec.seed, 0])
    base = spec.base_demand_median * np.exp(spec.base_demand_sigma * static.standard_normal(n))
    out = {
        "base": base,
        "amplitude": static.uniform(0.0, spec.season_amplitude_max, n),
        "cv": static.uniform(spec.noise_cv_min, spec.noise_cv_max, n),
        "lift": static.uniform(0.0, spec.holiday_lift_max, n),
        "unit_cost": static.uniform(spec.unit_cost_min, spec.unit_cost_max, n),
        "margin": static.uniform(spec.margin_min, spec.margin_max, n),
        "llt_discount": static.uniform(spec.llt_discount_min, spec.llt_discount_max, n),
        "volume": np.exp(spec.unit_volume_sigma * static.standard_normal(n)),
        "moq_jit": np.round(static.uniform(0.0, spec.moq_fraction_max, n) * base, 1),
        "moq_llt": np.round(static.uniform(0.0, spec.moq_fraction_max, n) * base, 1),
    }
    out["batch_jit"] = static.choice(np.asarray(spec.batch_choices, dtype=float), n)
    out["batch_llt"] = static.choice(np.asarray(spec.batch_choices, dtype=float), n)
    return out


def generate_world(spec: GenSpec, path_seed: int | None = None) -> ExoWorld:
    spec.validate()
    n, T = spec.num_products, spec.horizon
    c = catalogue(spec)
    base, amp, cv, lift = c["base"], c["amplitude"], c["cv"], c["lift"]
    unit_cost, margin, disc, volume = c["unit_cost"], c["margin"], c["llt_discount"], c["volume"]
    moq_j, moq_l, batch_j, batch_l = c["moq_jit"], c["moq_llt"], c["batch_jit"], c["batch_llt"]

    seed = spec.seed if path_seed is None else path_seed
    # one derived stream per product keeps products independent of each other's draws
    streams = [np.random.default_rng([seed, 1, i]) for i in range(n)]
    woy = np.arange(T) % WEEKS_PER_YEAR
    level = base[:, None] * seasonality(woy, amp)
    holiday = np.isin(woy, HOLIDAY_WEEKS)
    level = level * (1.0 + lift[:, None] * holiday[None, :])
    w_j = share_weights(spec.lead_jit, spec.lead_jit, spec.lead_jit, spec.share_decay)
    w_l = share_weights(spec.lead_llt, spec.lead_llt - 1, spec.lead_llt, spec.share_decay)
    demand = np.empty((n, T))
    shares_j = np.empty((n, T, spec.lead_jit + 1))
    shares_l = np.empty((n, T, spec.lead_llt + 1))
    cap_j = np.empty((n, T))
    cap_l = np.empty((n, T))
    for i, rng in enumerate(streams):
        demand[i] = np.maximum(0.0, level[i] + cv[i] * base[i] * rng.standard_normal(T))
        shares_j[i] = rng.dirichlet(spec.share_concentration * w_j + 1e-3, T)
        shares_l[i] = rng.dirichlet(spec.share_concentration * w_l + 1e-3, T)
        for cap in (cap_j, cap_l):
            dip = rng.random(T) < spec.cap_dip_prob
            frac = rng.uniform(spec.cap_dip_min, spec.cap_dip_max, T)
            cap[i] = spec.cap_multiple * base[i] * np.where(dip, frac / spec.cap_multiple, 1.0)
    # renormalise so each share vector sums to one to machine precision
    shares_j /= shares_j.sum(axis=2, keepdims=True)
    shares_l /= shares_l.sum(axis=2, keepdims=True)

    price = np.repeat((unit_cost * (1 + margin))[:, None], T, axis=1)
    cost_j = np.repeat(unit_cost[:, None], T, axis=1)
    cost_l = np.repeat((unit_cost * disc)[:, None], T, axis=1)
    hold = np.repeat((spec.holding_rate * unit_cost)[:, None], T, axis=1)
    return ExoWorld(
        lead_jit=spec.lead_jit, lead_llt=spec.lead_llt,
        init_inventory=spec.init_cover_weeks * base, unit_volumes=volume,
        demand=demand, price=price, cost_jit=cost_j, cost_llt=cost_l, holding_cost=hold,
        shares_jit=shares_j, shares_llt=shares_l, cap_jit=cap_j, cap_llt=cap_l,
        moq_jit=moq_j, batch_jit=batch_j, moq_llt=moq_l, batch_llt=batch_l,
        capacity_limits=np.full(T, np.inf), discount_factor=spec.discount_factor,
        meta={"spec": spec.to_dict(), "path_seed": int(seed)},
    )


def resample_world(world: ExoWorld, path_seed: int) -> ExoWorld:
    """Fresh exogenous paths for the same catalogue, if ``world`` records its spec."""
    spec = world.meta.get("spec")
    if spec is None:
        raise DomainError("world does not record its generating spec")
    out = generate_world(GenSpec.from_dict(spec), path_seed=path_seed)
    return out.replace(capacity_limits=world.capacity_limits, week_offset=world.week_offset)


# ---------------------------------------------------------------------------
# file format

def _f(x: float) -> str:
    return repr(float(x))


def dumps_world(w: ExoWorld) -> str:
    header = {"version": FORMAT_VERSION, "num_products": w.num_products, "horizon": w.horizon,
              "lead_jit": w.lead_jit, "lead_llt": w.lead_llt,
              "discount_factor": w.discount_factor, "week_offset": w.week_offset, "meta": w.meta}
    buf = io.StringIO()
    buf.write("#DSW " + json.dumps(header, sort_keys=True) + "\n")
    buf.write("[products]\n")
    buf.write("product,init_inventory,unit_volume,moq_jit,batch_jit,moq_llt,batch_llt\n")
    for i in range(w.num_products):
        vals = (w.init_inventory[i], w.unit_volumes[i], w.moq_jit[i], w.batch_jit[i],
                w.moq_llt[i], w.batch_llt[i])
        buf.write(f"{i}," + ",".join(_f(v) for v in vals) + "\n")
    buf.write("[capacity]\nweek,limit\n")
    for t in range(w.horizon):
        buf.write(f"{t},{_f(w.capacity_limits[t])}\n")
    buf.write("[weeks]\n")
    cols = ["product", "week", "demand", "price", "cost_jit", "cost_llt", "holding_cost",
            "cap_jit", "cap_llt"]
    cols += [f"rho_jit_{j}" for j in range(w.lead_jit + 1)]
    cols += [f"rho_llt_{j}" for j in range(w.lead_llt + 1)]
    buf.write(",".join(cols) + "\n")
    for i in range(w.num_products):
        for t in range(w.horizon):
            vals = [w.demand[i, t], w.price[i, t], w.cost_jit[i, t], w.cost_llt[i, t],
                    w.holding_cost[i, t], w.cap_jit[i, t], w.cap_llt[i, t],
                    *w.shares_jit[i, t], *w.shares_llt[i, t]]
            buf.write(f"{i},{t}," + ",".join(_f(v) for v in vals) + "\n")
    buf.write("#END\n")
    return buf.getvalue()


def save_world(w: ExoWorld, path) -> None:
    data = dumps_world(w).encode()
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def line(self) -> tuple[str, int]:
        start = self.pos
        if start >= len(self.data):
            raise WorldFormatError("unexpected end of file", start)
        end = self.data.find(b"\n", start)
        if end < 0:
            raise WorldFormatError("truncated line (no newline)", start)
        self.pos = end + 1
        try:
            return self.data[start:end].decode(), start
        except UnicodeDecodeError:
            raise WorldFormatError("invalid UTF-8", start) from None

    def expect(self, text: str) -> None:
        got, off = self.line()
        if got != text:
            raise WorldFormatError(f"expected {text!r}, found {got[:40]!r}", off)

    def row(self, width: int) -> tuple[list[float], int]:
        text, off = self.line()
        parts = text.split(",")
        if len(parts) != width:
            raise WorldFormatError(f"expected {width} fields, found {len(parts)}", off)
        try:
            return [float(p) for p in parts], off
        except ValueError:
            raise WorldFormatError("non-numeric field", off) from None


def loads_world(data: bytes | str) -> ExoWorld:
    if isinstance(data, str):
        data = data.encode()
    r = _Reader(data)
    first, off = r.line()
    if not first.startswith("#DSW "):
        raise WorldFormatError("missing #DSW header", off)
    try:
        header = json.loads(first[5:])
    except json.JSONDecodeError:
        raise WorldFormatError("malformed JSON header", off) from None
    if header.get("version") != FORMAT_VERSION:
        raise WorldVersionError(f"unsupported world format version {header.get('version')!r}, "
                                f"this reader handles {FORMAT_VERSION}", off)
    try:
        n, T = int(header["num_products"]), int(header["horizon"])
        l1, l2 = int(header["lead_jit"]), int(header["lead_llt"])
        gamma = float(header["discount_factor"])
    except (KeyError, TypeError, ValueError) as exc:
        raise WorldFormatError(f"header missing or malformed field: {exc}", off) from None

    r.expect("[products]")
    r.line()
    prod = np.empty((n, 6))
    for i in range(n):
        vals, off = r.row(7)
        if int(vals[0]) != i:
            raise WorldFormatError(f"product rows out of order (expected {i})", off)
        prod[i] = vals[1:]
    r.expect("[capacity]")
    r.line()
    cap = np.empty(T)
    for t in range(T):
        vals, off = r.row(2)
        if int(vals[0]) != t:
            raise WorldFormatError(f"capacity rows out of order (expected {t})", off)
        cap[t] = vals[1]
    r.expect("[weeks]")
    r.line()
    width = 9 + l1 + 1 + l2 + 1
    body = np.empty((n, T, width - 2))
    for i in range(n):
        for t in range(T):
            vals, off = r.row(width)
            if int(vals[0]) != i or int(vals[1]) != t:
                raise WorldFormatError(f"week rows out of order (expected {i},{t})", off)
            body[i, t] = vals[2:]
    r.expect("#END")
    if r.pos != len(data):
        raise WorldFormatError("trailing data after #END", r.pos)
    try:
        return ExoWorld(
            lead_jit=l1, lead_llt=l2, init_inventory=prod[:, 0], unit_volumes=prod[:, 1],
            moq_jit=prod[:, 2], batch_jit=prod[:, 3], moq_llt=prod[:, 4], batch_llt=prod[:, 5],
            demand=body[..., 0], price=body[..., 1], cost_jit=body[..., 2], cost_llt=body[..., 3],
            holding_cost=body[..., 4], cap_jit=body[..., 5], cap_llt=body[..., 6],
            shares_jit=body[..., 7:8 + l1], shares_llt=body[..., 8 + l1:],
            capacity_limits=cap, discount_factor=gamma,
            week_offset=int(header.get("week_offset", 0)), meta=header.get("meta", {}),
        )
    except DomainError as exc:
        raise WorldFormatError(f"inconsistent world: {exc}") from exc


def load_world(path) -> ExoWorld:
    with open(path, "rb") as fh:
        return loads_world(fh.read())
