"""Training, full-image separation, evaluation and multi-seed experiments."""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .adam import Adam, DEFAULT_LR
from .layers import frobenius_norm
from .losses import LossBreakdown, LossOptions, LossWeights, loss_total
from .model import (WIDTH, BaselineWeights, ModelWeights, baseline_forward,
                    forward_graph, init_baseline, init_weights)
from .pipeline import (BATCH_SIZE, OVERLAP, PATCH_SIZE, TripleDataset, as_plane, batches,
                       extract_patches, stitch_patches)
from .tensor import GradTape, NonFiniteError, Tensor, mean

logger = logging.getLogger(__name__)

SNAPSHOT_EPOCHS = (1, 4, 10, 50, 100, 150, 200)


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value."""

    def __init__(self, msg: str, epoch: int | None = None, seed: int | None = None):
        super().__init__(msg)
        self.epoch = epoch
        self.seed = seed


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = DEFAULT_LR
    epochs: int = 200
    batch_size: int = BATCH_SIZE
    seed: int = 0
    loss_options: LossOptions = field(default_factory=LossOptions)
    snapshot_epochs: tuple[int, ...] = SNAPSHOT_EPOCHS
    width: int = WIDTH
    joint_bn: bool = False               # one BN batch per shared network instead of per call

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    weights: ModelWeights | BaselineWeights
    optimizer: Adam
    epoch: int = 0                       # completed epochs
    history: list[LossBreakdown] = field(default_factory=list)


def _batch_tensors(r1, r2, x):
    return Tensor(r1), Tensor(r2), Tensor(x)


def _average(parts: list[LossBreakdown], sizes: list[int]) -> LossBreakdown:
    w = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    vals = {k: float(sum(wi * getattr(p, k) for wi, p in zip(w, parts))) for k in LossBreakdown.FIELDS}
    return LossBreakdown(**vals)


def _run_epochs(state: TrainState, data: TripleDataset, cfg: TrainConfig, step_fn,
                until: int | None, on_epoch) -> TrainState:
    if len(data) == 0:
        raise ValueError("empty dataset")
    stop = cfg.epochs if until is None else min(until, cfg.epochs)
    for epoch in range(state.epoch, stop):
        parts, sizes = [], []
        for _, r1, r2, x in batches(data, cfg.batch_size, cfg.seed, epoch):
            try:
                with GradTape() as tape:
                    total, bd = step_fn(*_batch_tensors(r1, r2, x))
                if not np.isfinite(total.item()):
                    raise NonFiniteError(f"loss is {total.item()}")
                state.optimizer.zero_grad()
                tape.backward(total)
            except NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch + 1}, seed {cfg.seed}: {exc}",
                                      epoch + 1, cfg.seed) from exc
            state.optimizer.step()
            parts.append(bd)
            sizes.append(len(r1))
        state.history.append(_average(parts, sizes))
        state.epoch = epoch + 1
        logger.debug("epoch %d: %s", state.epoch, state.history[-1])
        if on_epoch is not None:
            on_epoch(state)
    return state


def new_state(cfg: TrainConfig) -> TrainState:
    w = init_weights(cfg.seed, cfg.width)
    return TrainState(w, Adam(w.parameters(), cfg.lr))


def train(data: TripleDataset, cfg: TrainConfig, state: TrainState | None = None,
          until: int | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Train the connected auto-encoders jointly on the composite loss.

    ``state`` resumes a previous run; ``until`` stops early after that many
    completed epochs (the run can be resumed later with identical results).
    """
    state = state or new_state(cfg)
    w = state.weights

    def step(r1, r2, x):
        out = forward_graph(r1, r2, w, train=True, joint=cfg.joint_bn)
        return loss_total(x, r1, r2, out, cfg.weights, cfg.loss_options)

    return _run_epochs(state, data, cfg, step, until, on_epoch)


def baseline_loss(x: Tensor, out: dict[str, Tensor]) -> Tensor:
    """Mean over the batch of ||x - F(r1) - F(r2)||_F."""
    return mean(frobenius_norm(x - out["x_bar"], per_sample=True))


def train_baseline(data: TripleDataset, cfg: TrainConfig, state: TrainState | None = None,
                   until: int | None = None, on_epoch=None) -> TrainState:
    """Train the single mapping network on the sum-matching objective only.

    The loss weights in ``cfg`` are ignored; the recorded breakdown puts the
    objective in both ``l3`` and ``total``.
    """
    if state is None:
        w = init_baseline(cfg.seed)
        state = TrainState(w, Adam(w.parameters(), cfg.lr))
    w = state.weights

    def step(r1, r2, x):
        loss = baseline_loss(x, baseline_forward(r1, r2, w))
        v = loss.item()
        return loss, LossBreakdown(0.0, 0.0, v, 0.0, 0.0, v)

    return _run_epochs(state, data, cfg, step, until, on_epoch)


@dataclass
class SeparationResult:
    x1_hat: np.ndarray
    x2_hat: np.ndarray
    x_bar: np.ndarray
    error_map: np.ndarray
    r1_hat: np.ndarray | None = None
    r2_hat: np.ndarray | None = None
    history: list[LossBreakdown] = field(default_factory=list)
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


def _check_sizes(r1, r2, x):
    r1, r2, x = as_plane(r1), as_plane(r2), as_plane(x)
    if not (r1.shape[1:] == r2.shape[1:] == x.shape[1:]):
        raise ValueError(f"image sizes differ: {r1.shape}, {r2.shape}, {x.shape}")
    return r1, r2, x


def _run_patches(fn, g1, g2, keys, batch_size):
    outs = {k: [] for k in keys}
    for lo in range(0, len(g1), batch_size):
        res = fn(Tensor(g1.patches[lo:lo + batch_size]), Tensor(g2.patches[lo:lo + batch_size]))
        for k in keys:
            outs[k].append(res[k].data)
    return {k: g1.with_patches(np.concatenate(v)) for k, v in outs.items()}


def separate(weights: ModelWeights, r1: np.ndarray, r2: np.ndarray, x: np.ndarray,
             p: int = PATCH_SIZE, overlap: int = OVERLAP, batch_size: int = 64) -> SeparationResult:
    """Separate a full mixed X-ray patch by patch (BN in eval mode) and stitch."""
    r1, r2, x = _check_sizes(r1, r2, x)
    g1, g2 = extract_patches(r1, p, overlap), extract_patches(r2, p, overlap)
    keys = ("x1_hat", "x2_hat", "r1_hat", "r2_hat")
    grids = _run_patches(lambda a, b: forward_graph(a, b, weights, train=False),
                         g1, g2, keys, batch_size)
    img = {k: stitch_patches(g) for k, g in grids.items()}
    x_bar = img["x1_hat"] + img["x2_hat"]
    return SeparationResult(img["x1_hat"], img["x2_hat"], x_bar, np.abs(x - x_bar),
                            img["r1_hat"], img["r2_hat"])


def separate_baseline(weights: BaselineWeights, r1, r2, x, p: int = PATCH_SIZE,
                      overlap: int = OVERLAP, batch_size: int = 64) -> SeparationResult:
    r1, r2, x = _check_sizes(r1, r2, x)
    g1, g2 = extract_patches(r1, p, overlap), extract_patches(r2, p, overlap)
    grids = _run_patches(lambda a, b: baseline_forward(a, b, weights), g1, g2,
                         ("x1_hat", "x2_hat"), batch_size)
    x1, x2 = stitch_patches(grids["x1_hat"]), stitch_patches(grids["x2_hat"])
    return SeparationResult(x1, x2, x1 + x2, np.abs(x - (x1 + x2)))


def fit_and_separate(r1, r2, x, cfg: TrainConfig, p: int = PATCH_SIZE, overlap: int = OVERLAP,
                     snapshots: bool = True) -> tuple[TrainState, SeparationResult]:
    """Train on one image triple and separate it, recording epoch snapshots."""
    data = TripleDataset.from_images(r1, r2, x, p, overlap)
    snaps: dict[int, dict[str, np.ndarray]] = {}

    def on_epoch(state):
        if snapshots and state.epoch in cfg.snapshot_epochs:
            res = separate(state.weights, r1, r2, x, p, overlap)
            snaps[state.epoch] = dict(r1hat=res.r1_hat, r2hat=res.r2_hat,
                                      x1hat=res.x1_hat, x2hat=res.x2_hat)

    state = train(data, cfg, on_epoch=on_epoch)
    result = separate(state.weights, r1, r2, x, p, overlap)
    result.history = list(state.history)
    result.snapshots = snaps
    return state, result


def _norm(a: np.ndarray, per_pixel: bool) -> float:
    n = float(np.linalg.norm(np.ravel(a)))
    return n / np.sqrt(a.size) if per_pixel else n


def mse_eval(trials: Sequence[tuple[np.ndarray, np.ndarray]], truth: tuple[np.ndarray, np.ndarray],
             raw_norm: bool = False) -> float:
    """Average separation error over trials, side 1 against truth 1 and side 2 against truth 2.

    Each Frobenius error is divided by sqrt(pixel count) (a root-mean-square
    per pixel) unless ``raw_norm`` is set.
    """
    if len(trials) < 1:
        raise ValueError("need at least one trial")
    t1, t2 = np.asarray(truth[0]), np.asarray(truth[1])
    total = 0.0
    for a, b in trials:
        a, b = np.asarray(a), np.asarray(b)
        if a.shape != t1.shape or b.shape != t2.shape:
            raise ValueError(f"trial shapes {a.shape}/{b.shape} do not match truth {t1.shape}/{t2.shape}")
        total += _norm(t1 - a, not raw_norm) + _norm(t2 - b, not raw_norm)
    return total / (2 * len(trials))


class Case(enum.Enum):
    SEPARATED = "I"
    ONE_SIDED = "II"
    LEAKAGE = "III"


@dataclass
class OutcomeCase:
    case: Case
    energy_ratio: float
    correlation: float


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    d = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / d) if d > 0 else 0.0


def classify_outcome(x1_hat: np.ndarray, x2_hat: np.ndarray, x: np.ndarray | None = None,
                     tau_energy: float = 0.15, tau_corr: float = 0.5) -> OutcomeCase:
    """Label a separation as separated (I), one-sided (II) or leaking (III)."""
    n1, n2 = float(np.linalg.norm(np.ravel(x1_hat))), float(np.linalg.norm(np.ravel(x2_hat)))
    hi = max(n1, n2)
    ratio = min(n1, n2) / hi if hi > 0 else 0.0
    corr = _corr(x1_hat, x2_hat)
    if ratio < tau_energy:
        case = Case.ONE_SIDED
    elif abs(corr) > tau_corr:
        case = Case.LEAKAGE
    else:
        case = Case.SEPARATED
    return OutcomeCase(case, ratio, corr)


@dataclass
class TrialRecord:
    seed: int
    outcome: OutcomeCase
    mse: float | None
    recombination_error: float
    final_loss: LossBreakdown
    history: list[LossBreakdown] = field(default_factory=list, repr=False)


@dataclass
class SweepEntry:
    weights: LossWeights
    trials: list[TrialRecord]
    raw_norm: bool = False

    @property
    def R(self) -> int:
        return len(self.trials)

    @property
    def mean_mse(self) -> float | None:
        vals = [t.mse for t in self.trials]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    def frequencies(self) -> dict[str, float]:
        counts = {c.value: 0 for c in Case}
        for t in self.trials:
            counts[t.outcome.case.value] += 1
        return {k: v / self.R for k, v in counts.items()}


@dataclass
class SweepReport:
    entries: list[SweepEntry]


def run_trial(r1, r2, x, cfg: TrainConfig, p: int, overlap: int,
              truth: tuple[np.ndarray, np.ndarray] | None = None, raw_norm: bool = False,
              tau_energy: float = 0.15, tau_corr: float = 0.5) -> TrialRecord:
    state, res = fit_and_separate(r1, r2, x, cfg, p, overlap, snapshots=False)
    mse = mse_eval([(res.x1_hat, res.x2_hat)], truth, raw_norm) if truth is not None else None
    return TrialRecord(cfg.seed, classify_outcome(res.x1_hat, res.x2_hat, x, tau_energy, tau_corr),
                       mse, _norm(res.error_map, not raw_norm), state.history[-1], list(state.history))


def run_trials(r1, r2, x, cfg: TrainConfig, R: int, p: int = PATCH_SIZE, overlap: int = OVERLAP,
               truth=None, raw_norm: bool = False, seeds: Iterable[int] | None = None,
               n_jobs: int = 1) -> SweepEntry:
    """Independent train+separate runs with seeds ``cfg.seed + 0 .. R-1``.

    Results are ordered by seed whatever the execution order, so the
    aggregate does not depend on scheduling.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(R)]

    def one(s):
        try:
            return run_trial(r1, r2, x, replace(cfg, seed=s), p, overlap, truth, raw_norm)
        except TrainingAborted as exc:
            exc.seed = s
            raise

    if n_jobs == 1:
        records = [one(s) for s in seeds]
    else:
        from joblib import Parallel, delayed
        records = Parallel(n_jobs=n_jobs)(delayed(one)(s) for s in seeds)
    records.sort(key=lambda t: t.seed)
    return SweepEntry(cfg.weights, records, raw_norm)


def lambda_grid(lambda1: Sequence[float], lambda2: Sequence[float], lambda3: Sequence[float],
                lambda4: Sequence[float]) -> list[LossWeights]:
    """Cartesian grid of loss weights; negative values are rejected."""
    return [LossWeights(*t) for t in itertools.product(lambda1, lambda2, lambda3, lambda4)]


def sweep(r1, r2, x, cfg: TrainConfig, grid: Sequence[LossWeights], R: int,
          p: int = PATCH_SIZE, overlap: int = OVERLAP, truth=None, raw_norm: bool = False,
          n_jobs: int = 1) -> SweepReport:
    """Run ``R`` trials at every grid point."""
    if not grid:
        raise ValueError("empty hyper-parameter grid")
    return SweepReport([run_trials(r1, r2, x, replace(cfg, weights=w), R, p, overlap, truth,
                                   raw_norm, n_jobs=n_jobs) for w in grid])


def phase1_grid(values: Sequence[float] = (0, 1, 3, 5, 10)) -> list[LossWeights]:
    """Sweep the mixed-reconstruction and recombination weights with the extra terms off."""
    return lambda_grid(values, values, [0.0], [0.0])


def phase2_grid(lambda1: float, lambda2: float, lambda3: Sequence[float],
                lambda4: Sequence[float]) -> list[LossWeights]:
    """Sweep the energy and dis-correlation weights at fixed phase-1 optimum."""
    return lambda_grid([lambda1], [lambda2], lambda3, lambda4)


def best_entry(report: SweepReport) -> SweepEntry:
    scored = [e for e in report.entries if e.mean_mse is not None]
    if not scored:
        raise ValueError("report has no MSE values (no ground truth given)")
    return min(scored, key=lambda e: e.mean_mse)
