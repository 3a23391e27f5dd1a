"""Direct-backpropagation training of the buy policy and the neural coordinator.

Both loops roll the simulator forward on a tape, differentiate the episode
objective with respect to the network parameters and take one optimiser step
per minibatch. Randomness is drawn from generators derived from
``(seed, batch)`` so a run can be resumed from a checkpoint at any batch.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datagen import resample_world
from .exo import DomainError, ExoWorld, price_unit
from .coordinator import CoordFeatureConfig, NeuralCoordinator, coordinator_network, p3_loss
from .policies import FeatureConfig, NeuralPolicy, policy_network
from .simulator import SimState, rollout

log = logging.getLogger(__name__)

TRAIN_WEEKS = 72
BACKTEST_WEEKS = 52


@dataclass
class TrainConfig:
    batch_size: int = 64
    step_size: float = 0.003
    max_batches: int = 400
    seed: int = 0
    train_horizon: int = TRAIN_WEEKS
    optimizer: str = "adam"            # "adam" or "sgd" (literal gradient ascent)
    deterministic: bool = True
    gamma: float | None = None         # None: the world's discount factor
    mode: str = "resample"             # "resample" a new exogenous path per epoch, or "fixed"
    hidden: tuple = (32, 32)
    priced: bool = False               # train against random capacity-price paths
    llt_mask: bool = False             # JIT-RL: LLT head forced to zero
    price_max: float = 0.2             # random price paths, in units of price_unit(world)
    price_zero_prob: float = 0.3
    converge_window: int = 50
    converge_span: int = 200
    converge_tol: float = 1e-3

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.step_size < 0:
            raise DomainError("step_size must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("resample", "fixed"):
            raise DomainError(f"unknown training mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def make_optimizer(cfg: TrainConfig):
    return ad.Adam(cfg.step_size) if cfg.optimizer == "adam" else ad.Sgd(cfg.step_size)


def random_price_path(rng: np.random.Generator, horizon: int, scale: float, zero_prob: float,
                      block: int = 4) -> np.ndarray:
    """Piecewise-constant capacity prices over ``block``-week blocks."""
    n_blocks = -(-horizon // block)
    levels = rng.uniform(0.0, scale, n_blocks) * (rng.random(n_blocks) >= zero_prob)
    return np.repeat(levels, block)[:horizon]


def converged(history: list[float], cfg: TrainConfig) -> bool:
    """Moving-average objective gained less than ``converge_tol`` (relative) over the span."""
    w, span = cfg.converge_window, cfg.converge_span
    if len(history) < w + span:
        return False
    now = np.mean(history[-w:])
    then = np.mean(history[-w - span:-span])
    return bool(now - then < cfg.converge_tol * abs(then))


@dataclass
class TrainResult:
    params: ad.MlpParams
    history: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    optimizer: object = None
    batches: int = 0
    stopped: str = ""


def _world_for_epoch(world: ExoWorld, cfg: TrainConfig, epoch: int) -> ExoWorld:
    if cfg.mode == "resample" and "spec" in world.meta:
        # never the backtest path itself: offset the path seed out of the world's own range
        w = resample_world(world, path_seed=int(np.random.SeedSequence([cfg.seed, 7, epoch]).generate_state(1)[0]))
    else:
        w = world
    return w.window(0, cfg.train_horizon)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch]).permutation(n)


def batch_products(n: int, cfg: TrainConfig, b: int) -> tuple[int, np.ndarray]:
    """Epoch index and (sorted) product indices of batch ``b``."""
    m = min(cfg.batch_size, n)
    per_epoch = max(1, n // m)
    epoch, k = divmod(b, per_epoch)
    order = _epoch_order(n, cfg.seed, epoch)
    return epoch, np.sort(order[k * m:(k + 1) * m])


def buy_objective(policy: NeuralPolicy, world: ExoWorld, products, tape: ad.Tape, prices=None,
                  gamma=None):
    """Summed discounted reward of ``products`` over the whole (window) world, on ``tape``."""
    traj = rollout(world, products, policy, prices=prices, tape=tape, discount=gamma)
    return ad.sum(traj.discounted)


def train_buy_policy(world: ExoWorld, cfg: TrainConfig, params: ad.MlpParams | None = None,
                     resume: "Checkpoint | None" = None, checkpoint_path=None,
                     log_path=None) -> TrainResult:
    """Maximise the summed discounted (optionally price-penalised) reward.

    One batch: pick ``batch_size`` products, roll them out over the training
    window on a tape, ascend the gradient of the summed discounted reward.
    """
    if world.num_products < 1:
        raise DomainError("empty product set")
    if cfg.train_horizon > world.horizon:
        raise DomainError("train_horizon exceeds the world horizon")
    feats = FeatureConfig.for_world(world, priced=cfg.priced)
    if params is None:
        params = policy_network(feats, cfg.hidden, seed=cfg.seed)
    if params.sizes[0] != feats.dim:
        raise DomainError(f"network expects {params.sizes[0]} features, world gives {feats.dim}")
    opt = make_optimizer(cfg)
    result = TrainResult(params, optimizer=opt)
    start = 0
    if resume is not None:
        params = resume.params
        opt = resume.optimizer
        result = TrainResult(params, list(resume.history), list(resume.grad_norms),
                             list(resume.wall_times), opt, resume.batch)
        start = resume.batch
    unit = price_unit(world)
    theta = params.flat.copy()
    cached_epoch, train_world = None, None
    t0 = time.perf_counter()
    for b in range(start, cfg.max_batches):
        epoch, products = batch_products(world.num_products, cfg, b)
        if epoch != cached_epoch:
            train_world, cached_epoch = _world_for_epoch(world, cfg, epoch), epoch
        prices = None
        if cfg.priced:
            rng = np.random.default_rng([cfg.seed, 5, b])
            prices = random_price_path(rng, cfg.train_horizon, cfg.price_max * unit, cfg.price_zero_prob)
        tape = ad.Tape()
        policy = NeuralPolicy(params.with_flat(theta), feats, cfg.llt_mask).bind(tape)
        obj = buy_objective(policy, train_world, products, tape, prices, cfg.gamma)
        (grad,) = tape.gradient(obj, [policy.theta])
        if not np.isfinite(obj.value) or not np.all(np.isfinite(grad)):
            result.params = params.with_flat(theta)
            result.stopped = "non-finite"
            if checkpoint_path is not None:
                Checkpoint.from_result(result, cfg, b).save(checkpoint_path)
            raise ad.NumericError(f"non-finite objective or gradient at batch {b}")
        theta = opt.update(theta, grad, ascend=True)
        result.history.append(float(obj.value))
        result.grad_norms.append(float(np.linalg.norm(grad)))
        result.wall_times.append(time.perf_counter() - t0)
        result.batches = b + 1
        if b % 50 == 0:
            log.info("batch %d objective %.1f", b, obj.value)
        if converged(result.history, cfg):
            result.stopped = "converged"
            break
    else:
        result.stopped = result.stopped or "max_batches"
    result.params = params.with_flat(theta)
    result.optimizer = opt
    if checkpoint_path is not None:
        Checkpoint.from_result(result, cfg, result.batches).save(checkpoint_path)
    if log_path is not None:
        write_training_log(result, log_path)
    return result


def sample_capacity_paths(peak_volume: float, horizon: int, count: int, seed: int,
                          low: float = 0.5, high: float = 1.2, block: int = 4) -> np.ndarray:
    """``count`` capacity-limit paths, piecewise constant over ``block`` weeks.

    Each block's limit is ``peak_volume`` times a fraction drawn uniformly in
    ``[low, high]``.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    if not peak_volume > 0:
        raise DomainError("peak volume must be > 0")
    rng = np.random.default_rng([seed, 11])
    n_blocks = -(-horizon // block)
    fractions = rng.uniform(low, high, (count, n_blocks))
    return np.repeat(fractions, block, axis=1)[:, :horizon] * peak_volume


def reference_volumes(world: ExoWorld, params: ad.MlpParams, start_state: SimState | None = None,
                      end_week: int | None = None) -> np.ndarray:
    """Network volume path of the priced buy policy facing zero prices (the unconstrained run)."""
    feats = FeatureConfig.for_world(world, priced=True)
    policy = NeuralPolicy(params, feats)
    traj = rollout(world, slice(None), policy, prices=np.zeros(world.horizon), start_state=start_state,
                   end_week=end_week, penalize=False)
    return traj.volumes


@dataclass
class CoordTrainConfig:
    step_size: float = 0.003
    max_batches: int = 150
    seed: int = 0
    train_horizon: int = TRAIN_WEEKS
    mode: str = "resample"
    deterministic: bool = True
    hidden: tuple = (32,)
    violation_weight: float = 200.0    # on (relative violation)^2
    price_weight: float = 0.05         # on |lambda| in price units
    mse_weight: float = 1.0            # on forecast disagreement in price units
    fraction_low: float = 0.5
    fraction_high: float = 1.2
    optimizer: str = "adam"
    converge_window: int = 50
    converge_span: int = 200
    converge_tol: float = 1e-3

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.step_size < 0:
            raise DomainError("step_size must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("resample", "fixed"):
            raise DomainError(f"unknown training mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def coordinator_objective(coord: NeuralCoordinator, policy: NeuralPolicy, world: ExoWorld,
                          limits, tape: ad.Tape, cfg: CoordTrainConfig):
    traj = rollout(world, slice(None), policy, coordinator=coord, tape=tape, penalize=False)
    finite = limits[np.isfinite(limits)]
    scale = float(finite.mean()) if finite.size else 1.0
    return p3_loss(traj.volume_vars, limits, traj.forecasts, cfg.violation_weight, cfg.price_weight,
                   cfg.mse_weight, volume_scale=scale, price_scale=coord.unit), traj


def train_coordinator(world: ExoWorld, buy_params: ad.MlpParams, cfg: CoordTrainConfig,
                      params: ad.MlpParams | None = None, limits=None, resume: "Checkpoint | None" = None,
                      checkpoint_path=None, log_path=None) -> TrainResult:
    """Minimise the coordinator loss with the buy policy frozen.

    Each batch draws one exogenous path (resample mode) and one capacity path
    anchored to the unconstrained policy's peak volume, rolls the whole
    population out with the coordinator's prices fed to the policy, and
    descends the gradient of the loss. ``limits`` (a fixed per-week path, e.g.
    all ``inf``) overrides the sampled capacity paths.
    """
    if cfg.train_horizon > world.horizon:
        raise DomainError("train_horizon exceeds the world horizon")
    feats = FeatureConfig.for_world(world, priced=True)
    if buy_params.sizes[0] != feats.dim:
        raise DomainError("buy policy was not trained with price features")
    horizon = world.lead_llt
    ccfg = CoordFeatureConfig(horizon)
    if params is None:
        params = coordinator_network(ccfg, cfg.hidden, seed=cfg.seed)
    unit = price_unit(world)
    policy = NeuralPolicy(buy_params, feats)
    opt = ad.Adam(cfg.step_size) if cfg.optimizer == "adam" else ad.Sgd(cfg.step_size)
    result = TrainResult(params, optimizer=opt)
    start = 0
    if resume is not None:
        params, opt, start = resume.params, resume.optimizer, resume.batch
        result = TrainResult(params, list(resume.history), list(resume.grad_norms),
                             list(resume.wall_times), opt, resume.batch)
    peak = None
    if limits is None:
        peak = float(reference_volumes(world.window(0, cfg.train_horizon), buy_params).max())
    theta = params.flat.copy()
    t0 = time.perf_counter()
    for b in range(start, cfg.max_batches):
        train_world = _world_for_epoch(world, cfg, b)
        if limits is None:
            k = sample_capacity_paths(peak, cfg.train_horizon, 1, int(np.random.SeedSequence(
                [cfg.seed, 13, b]).generate_state(1)[0]), cfg.fraction_low, cfg.fraction_high)[0]
        else:
            k = np.asarray(limits, dtype=float)[:cfg.train_horizon]
        tape = ad.Tape()
        coord = NeuralCoordinator(params.with_flat(theta), k, horizon, unit).bind(tape)
        loss, _ = coordinator_objective(coord, policy, train_world, k, tape, cfg)
        (grad,) = tape.gradient(loss, [coord.theta])
        if not np.isfinite(ad.value(loss)) or not np.all(np.isfinite(grad)):
            result.params = params.with_flat(theta)
            result.stopped = "non-finite"
            if checkpoint_path is not None:
                Checkpoint.from_result(result, cfg, b, "coordinator").save(checkpoint_path)
            raise ad.NumericError(f"non-finite coordinator loss or gradient at batch {b}")
        theta = opt.update(theta, grad)
        result.history.append(float(ad.value(loss)))
        result.grad_norms.append(float(np.linalg.norm(grad)))
        result.wall_times.append(time.perf_counter() - t0)
        result.batches = b + 1
        if b % 25 == 0:
            log.info("coordinator batch %d loss %.4f", b, ad.value(loss))
        # the loss is minimised: reuse the ascent rule on its negation
        if converged([-h for h in result.history], cfg):
            result.stopped = "converged"
            break
    else:
        result.stopped = result.stopped or "max_batches"
    result.params = params.with_flat(theta)
    result.optimizer = opt
    if checkpoint_path is not None:
        Checkpoint.from_result(result, cfg, result.batches, "coordinator").save(checkpoint_path)
    if log_path is not None:
        write_training_log(result, log_path)
    return result


def write_training_log(result: TrainResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "objective", "grad_norm", "wall_time"])
        for b, (obj, gn, wt) in enumerate(zip(result.history, result.grad_norms, result.wall_times)):
            w.writerow([b, repr(obj), repr(gn), f"{wt:.3f}"])


@dataclass
class Checkpoint:
    """Parameters, optimiser moments, batch counter and loss history.

    Batch randomness is derived from ``(seed, batch)``, so ``seed`` and
    ``batch`` together are the RNG state.
    """

    params: ad.MlpParams
    optimizer: object
    batch: int
    seed: int
    history: list
    grad_norms: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    kind: str = "buy"

    @classmethod
    def from_result(cls, result: TrainResult, cfg, batch: int, kind: str = "buy") -> "Checkpoint":
        return cls(result.params, result.optimizer, batch, cfg.seed, list(result.history),
                   list(result.grad_norms), list(result.wall_times), cfg.to_dict(), kind)

    def save(self, path) -> None:
        opt = self.optimizer
        arrays = {"flat": self.params.flat}
        header = {"kind": "checkpoint", "role": self.kind, "sizes": list(self.params.sizes),
                  "activation": self.params.activation, "seed": self.seed, "batch": self.batch,
                  "rng": {"seed": self.seed, "batch": self.batch},
                  "history": self.history, "grad_norms": self.grad_norms,
                  "wall_times": self.wall_times, "config": self.config,
                  "optimizer": {"name": type(opt).__name__.lower(), "step_size": opt.step_size,
                                "t": opt.t}}
        if isinstance(opt, ad.Adam) and opt.m is not None:
            arrays["adam_m"] = opt.m
            arrays["adam_v"] = opt.v
        ad.save_arrays(path, header, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, arrays = ad.load_arrays(path)
        if header.get("kind") != "checkpoint":
            raise ValueError(f"{path}: not a checkpoint")
        params = ad.MlpParams(tuple(header["sizes"]), arrays["flat"], header["activation"], None)
        o = header["optimizer"]
        if o["name"] == "adam":
            opt = ad.Adam(o["step_size"], t=o["t"], m=arrays.get("adam_m"), v=arrays.get("adam_v"))
        else:
            opt = ad.Sgd(o["step_size"], t=o["t"])
        return cls(params, opt, header["batch"], header["seed"], header["history"],
                   header.get("grad_norms", []), header.get("wall_times", []),
                   header.get("config", {}), header.get("role", "buy"))
