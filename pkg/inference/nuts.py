"""
No-U-Turn sampler with multinomial trajectory sampling.

Each chain runs independently on its own Philox stream, so draws depend only
on (seed, chain index). Warmup follows the usual three-phase schedule: a fast
initial buffer adapting the step size only, a run of doubling slow windows
that estimate a diagonal inverse metric, and a fast terminal buffer. Step
size is tuned by dual averaging toward ``target_accept``.
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from django.conf import settings

from numerics.random import RngState

from .diagnostics import PosteriorDraws
from .exceptions import DivergenceWarning, InferenceError, InitializationError
from .model import check_gradient

logger = logging.getLogger(__name__)

INIT_BUFFER = 75
TERM_BUFFER = 50
BASE_WINDOW = 25
GRADIENT_STREAM = 0xC0FFEE


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    max_depth: int = 10
    target_accept: float = 0.8
    max_energy_error: float = 1000.0
    init_radius: float = 2.0
    init_retries: int = 100
    divergence_limit: float = 0.10
    check_gradients: bool = True
    workers: int = None

    def __post_init__(self):
        if self.chains < 1 or self.draws < 1 or self.warmup < 0:
            raise InferenceError(f"invalid sampler sizes: {self}")
        if not 0.0 < self.target_accept < 1.0:
            raise InferenceError(f"target_accept must lie in (0, 1), got {self.target_accept}")

    @classmethod
    def from_settings(cls, **overrides):
        """Defaults from ``settings.TRAFFIC_STOPS``, then ``overrides``."""
        conf = getattr(settings, 'TRAFFIC_STOPS', {})
        values = {
            'chains': conf.get('SAMPLER_CHAINS', cls.chains),
            'warmup': conf.get('SAMPLER_WARMUP', cls.warmup),
            'draws': conf.get('SAMPLER_DRAWS', cls.draws),
            'max_depth': conf.get('SAMPLER_MAX_DEPTH', cls.max_depth),
            'target_accept': conf.get('SAMPLER_TARGET_ACCEPT', cls.target_accept),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        return asdict(self)


def warmup_windows(warmup, init_buffer=INIT_BUFFER, term_buffer=TERM_BUFFER, base_window=BASE_WINDOW):
    """
    Slow adaptation windows as half-open ``(start, end)`` iteration ranges.

    >>> warmup_windows(1000)
    [(75, 100), (100, 150), (150, 250), (250, 450), (450, 950)]
    """
    if warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    last = warmup - term_buffer
    windows = []
    start, size = init_buffer, base_window
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, size * 2
    return windows


class DualAveraging:
    """Step-size adaptation by dual averaging on the acceptance statistic."""

    def __init__(self, step_size, target=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = np.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn(self, accept_stat):
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** -self.kappa
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return float(np.exp(x))

    @property
    def final(self):
        return float(np.exp(self.x_bar))


class WelfordVariance:
    def __init__(self, dimension):
        self.n = 0
        self.mean = np.zeros(dimension)
        self.m2 = np.zeros(dimension)

    def add(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized(self):
        """Sample variance shrunk toward 1e-3 (the usual small-window regularization)."""
        var = self.m2 / (self.n - 1)
        return (self.n / (self.n + 5.0)) * var + 1e-3 * (5.0 / (self.n + 5.0))


@dataclass
class _Point:
    x: np.ndarray
    p: np.ndarray
    lp: float
    grad: np.ndarray


@dataclass
class _Tree:
    minus: _Point
    plus: _Point
    sample: _Point
    log_weight: float
    rho: np.ndarray
    valid: bool = True
    divergent: bool = False
    n_leapfrog: int = 0
    sum_accept: float = 0.0


@dataclass
class ChainResult:
    draws: np.ndarray
    lp: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int = 0
    init: np.ndarray = field(default=None, repr=False)


class _Chain:
    """One NUTS chain; all randomness comes from ``rng``."""

    def __init__(self, model, config, rng):
        self.model = model
        self.config = config
        self.rng = rng
        self.inv_metric = np.ones(model.dimension)
        self.step_size = 1.0

    def kinetic(self, p):
        return 0.5 * float(p @ (self.inv_metric * p))

    def momentum(self):
        return self.rng.standard_normal(self.model.dimension) / np.sqrt(self.inv_metric)

    def leapfrog(self, point, eps):
        p = point.p + 0.5 * eps * point.grad
        x = point.x + eps * self.inv_metric * p
        lp, grad = self.model(x)
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            return _Point(x, p, -np.inf, np.zeros_like(point.grad))
        return _Point(x, p + 0.5 * eps * grad, lp, grad)

    def hamiltonian(self, point):
        if not np.isfinite(point.lp):
            return np.inf
        return -point.lp + self.kinetic(point.p)

    def no_u_turn(self, rho, p_minus, p_plus):
        return (rho @ (self.inv_metric * p_minus) > 0) and (rho @ (self.inv_metric * p_plus) > 0)

    def initialize(self):
        radius, dim = self.config.init_radius, self.model.dimension
        for attempt in range(1, self.config.init_retries + 1):
            x = self.rng.uniform(-radius, radius, dim)
            lp, grad = self.model(x)
            if np.isfinite(lp) and np.all(np.isfinite(grad)):
                if attempt > 1:
                    logger.debug(f"Found finite initial point after {attempt} attempts")
                return x, lp, grad
        raise InitializationError(
            f"no finite log density and gradient after {self.config.init_retries} random initializations"
        )

    def reasonable_step_size(self, x, lp, grad):
        """Double or halve the step until one leapfrog's acceptance crosses 0.8."""
        eps = self.step_size
        p = self.momentum()
        start = _Point(x, p, lp, grad)
        h0 = self.hamiltonian(start)
        delta = h0 - self.hamiltonian(self.leapfrog(start, eps))
        direction = 1 if delta > np.log(0.8) else -1
        while True:
            p = self.momentum()
            start = _Point(x, p, lp, grad)
            h0 = self.hamiltonian(start)
            delta = h0 - self.hamiltonian(self.leapfrog(start, eps))
            if direction == 1 and not delta > np.log(0.8):
                break
            if direction == -1 and not delta < np.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7:
                raise InferenceError("step size grew without bound; posterior is improper")
            if eps < 1e-12:
                raise InferenceError("step size collapsed to zero; density is not smooth at the start")
        return eps

    def build_tree(self, edge, direction, depth, h0):
        if depth == 0:
            point = self.leapfrog(edge, direction * self.step_size)
            h = self.hamiltonian(point)
            if np.isnan(h):
                h = np.inf
            divergent = (h - h0) > self.config.max_energy_error
            accept = 0.0 if not np.isfinite(h) else min(1.0, float(np.exp(h0 - h)))
            return _Tree(point, point, point, h0 - h, point.p.copy(), not divergent, divergent, 1, accept)

        inner = self.build_tree(edge, direction, depth - 1, h0)
        if not inner.valid:
            return inner
        outer = self.build_tree(inner.plus if direction > 0 else inner.minus, direction, depth - 1, h0)
        merged = self.merge(inner, outer, direction)
        if not outer.valid:
            merged.valid = False
            merged.divergent = outer.divergent
            return merged
        log_weight = np.logaddexp(inner.log_weight, outer.log_weight)
        if np.log(self.rng.uniform()) < outer.log_weight - log_weight:
            merged.sample = outer.sample
        merged.log_weight = log_weight
        return merged

    def merge(self, old, new, direction):
        """Join ``new`` onto ``old`` in ``direction``; U-turn checks include both sub-trees."""
        early, late = (old, new) if direction > 0 else (new, old)
        rho = early.rho + late.rho
        valid = (
            self.no_u_turn(rho, early.minus.p, late.plus.p)
            and self.no_u_turn(early.rho + late.minus.p, early.minus.p, late.minus.p)
            and self.no_u_turn(late.rho + early.plus.p, early.plus.p, late.plus.p)
        )
        return _Tree(
            early.minus, late.plus, old.sample, old.log_weight, rho, valid, False,
            old.n_leapfrog + new.n_leapfrog, old.sum_accept + new.sum_accept,
        )

    def transition(self, x, lp, grad):
        start = _Point(x, self.momentum(), lp, grad)
        h0 = self.hamiltonian(start)
        tree = _Tree(start, start, start, 0.0, start.p.copy())
        depth = 0
        divergent = False
        while depth < self.config.max_depth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            edge = tree.plus if direction > 0 else tree.minus
            subtree = self.build_tree(edge, direction, depth, h0)
            depth += 1
            if not subtree.valid:
                divergent = subtree.divergent
                tree.n_leapfrog += subtree.n_leapfrog
                tree.sum_accept += subtree.sum_accept
                break
            # biased progressive sampling favours the new sub-tree
            if np.log(self.rng.uniform()) < subtree.log_weight - tree.log_weight:
                tree.sample = subtree.sample
            merged = self.merge(tree, subtree, direction)
            merged.log_weight = np.logaddexp(tree.log_weight, subtree.log_weight)
            tree = merged
            if not tree.valid:
                break
        accept = tree.sum_accept / max(tree.n_leapfrog, 1)
        sample = tree.sample
        return sample.x, sample.lp, sample.grad, accept, depth, tree.n_leapfrog, divergent

    def run(self, warmup, draws, init=None):
        if init is None:
            x, lp, grad = self.initialize()
        else:
            x = np.asarray(init, dtype=float)
            lp, grad = self.model(x)
            if not np.isfinite(lp):
                raise InitializationError("supplied initial point has non-finite log density")
        init_point = x.copy()

        self.step_size = self.reasonable_step_size(x, lp, grad) if warmup else self.step_size
        adapter = DualAveraging(self.step_size, self.config.target_accept)
        windows = warmup_windows(warmup)
        ends = {end - 1 for _, end in windows}
        variance = WelfordVariance(self.model.dimension)
        warmup_divergences = 0

        for i in range(warmup):
            x, lp, grad, accept, _, _, divergent = self.transition(x, lp, grad)
            warmup_divergences += divergent
            self.step_size = adapter.learn(accept)
            if any(start <= i < end for start, end in windows):
                variance.add(x)
            if i in ends:
                self.inv_metric = variance.regularized()
                variance = WelfordVariance(self.model.dimension)
                self.step_size = self.reasonable_step_size(x, lp, grad)
                adapter.restart(self.step_size)
        if warmup:
            self.step_size = adapter.final

        dim = self.model.dimension
        out = ChainResult(
            draws=np.empty((draws, dim)),
            lp=np.empty(draws),
            accept_stat=np.empty(draws),
            tree_depth=np.empty(draws, dtype=np.int64),
            n_leapfrog=np.empty(draws, dtype=np.int64),
            divergent=np.zeros(draws, dtype=bool),
            step_size=self.step_size,
            inv_metric=self.inv_metric.copy(),
            warmup_divergences=warmup_divergences,
            init=init_point,
        )
        for i in range(draws):
            x, lp, grad, accept, depth, n_leapfrog, divergent = self.transition(x, lp, grad)
            out.draws[i] = x
            out.lp[i] = lp
            out.accept_stat[i] = accept
            out.tree_depth[i] = depth
            out.n_leapfrog[i] = n_leapfrog
            out.divergent[i] = divergent
        return out


def nuts_sample(model, config=None, seed=0, inits=None):
    """
    Run ``config.chains`` independent NUTS chains.

    Args:
        model (LogDensityModel): Target density.
        config (SamplerConfig): Chain counts, warmup, depth and adaptation
            target. ``SamplerConfig.from_settings()`` when omitted.
        seed (int): Base seed; chain ``k`` uses stream ``RngState(seed).child(k)``.
        inits: Optional per-chain unconstrained starting points.

    Returns:
        PosteriorDraws: Post-warmup draws on the constrained scale.

    Raises:
        GradientCheckError: Gradient disagrees with finite differences.
        InitializationError: A chain found no finite starting point.
    """
    config = config or SamplerConfig.from_settings()
    base = RngState(seed)
    if config.check_gradients:
        check_gradient(model, RngState(seed, GRADIENT_STREAM).generator())

    def run_chain(index):
        chain = _Chain(model, config, base.child(index).generator())
        init = None if inits is None else inits[index]
        logger.debug(f"Chain {index}: starting {config.warmup} warmup + {config.draws} draws")
        return chain.run(config.warmup, config.draws, init)

    with ThreadPoolExecutor(max_workers=config.workers or config.chains) as pool:
        results = list(pool.map(run_chain, range(config.chains)))

    draws = PosteriorDraws(
        params=model.constrain(np.stack([r.draws for r in results])),
        names=model.names,
        lp=np.stack([r.lp for r in results]),
        accept_stat=np.stack([r.accept_stat for r in results]),
        tree_depth=np.stack([r.tree_depth for r in results]),
        n_leapfrog=np.stack([r.n_leapfrog for r in results]),
        divergent=np.stack([r.divergent for r in results]),
        step_sizes=np.array([r.step_size for r in results]),
        inv_metric=np.stack([r.inv_metric for r in results]),
        metadata={'seed': seed, 'sampler': config.to_dict(), 'transforms': [t.value for t in model.transforms]},
    )

    rate = draws.divergence_rate
    if rate > config.divergence_limit:
        message = f"{draws.divergence_count} divergent transitions ({rate:.1%} of draws)"
        logger.warning(message)
        warnings.warn(message, DivergenceWarning, stacklevel=2)
        draws.metadata['flags'] = ['divergences']
    logger.info(
        f"NUTS finished: {config.chains} chains x {config.draws} draws, "
        f"{draws.divergence_count} divergences, step sizes {np.round(draws.step_sizes, 4).tolist()}"
    )
    return draws
