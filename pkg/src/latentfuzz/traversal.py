"""Feedback-driven latent traversal.

Each step either exploits (mutates the highest-priority seed along a Gaussian
step shaped by the running covariance of accepted coordinates) or explores
(draws a fresh coordinate from the prior). A candidate is accepted when it
raises the objective coverage criterion, or in black-box quantization mode,
when it beats the best probability-difference fitness of its lineage.
"""

from __future__ import annotations

import heapq
import logging
import time
from decimal import Decimal
from dataclasses import asdict, dataclass, field

import numpy as np

from .coverage import CRITERIA, CoverageConfig, CoverageState, NeuronProfile
from .manifold import LatentPoint, Manifold
from .oracle import Differential, LabelConsistency, QuantDiff, evaluate, quant_fitness, validate_input
from .reporting import CampaignReport, FaultRecord
from .runtime import Model, NonFiniteError, forward, forward_trace

log = logging.getLogger(__name__)

MODES = ("graybox", "blackbox-quant")


# -- trajectory -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    """Running mean and population covariance of accepted coordinates."""

    t: int
    mu: np.ndarray
    T: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "Trajectory":
        return cls(0, np.zeros(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return len(self.mu)


def update_trajectory(traj: Trajectory, c) -> Trajectory:
    c = np.asarray(c.coords if isinstance(c, LatentPoint) else c, dtype=np.float64)
    if c.shape != traj.mu.shape:
        raise ValueError(f"coordinate has shape {c.shape}, trajectory dim is {traj.dim}")
    t = traj.t + 1
    diff = traj.mu - c
    T = (t - 1) * traj.T / t + (t - 1) * np.outer(diff, diff) / t ** 2
    mu = (1 - 1 / t) * traj.mu + c / t
    return Trajectory(t, mu, T)


def covariance_factor(T: np.ndarray, ridge: float) -> np.ndarray:
    """``L`` with ``L @ L.T == T + ridge * I`` from a symmetric eigendecomposition."""
    w, v = np.linalg.eigh(T + ridge * np.eye(len(T)))
    return v * np.sqrt(np.maximum(w, 0.0))


# -- schedule -------------------------------------------------------------------

@dataclass
class Schedule:
    delta: float = 0.0005
    Lambda: float = 0.8
    start: float = 0.0
    gains: int = 0

    def __post_init__(self):
        if not 0 <= self.start <= self.Lambda < 1:
            raise ValueError("need 0 <= lambda <= Lambda < 1")

    @property
    def lam(self) -> float:
        # decimal arithmetic on the shortest reprs, so 0.7995 + 0.0005 is exactly 0.8
        exact = Decimal(repr(self.start)) + self.gains * Decimal(repr(self.delta))
        return float(min(Decimal(repr(self.Lambda)), exact))

    def bump(self) -> float:
        if self.lam < self.Lambda:
            self.gains += 1
        return self.lam


# -- seed queue -----------------------------------------------------------------

@dataclass
class SeedEntry:
    z: LatentPoint
    priority: float
    id: int
    origin: str  # "corpus" or "accepted"
    lineage: str
    seq: int = 0


class SeedQueue:
    """Max-priority queue; FIFO among equal priorities; lazy heap invalidation."""

    def __init__(self):
        self._heap: list[tuple[float, int, int]] = []
        self._entries: dict[int, SeedEntry] = {}
        self._next_id = 0
        self._next_seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, seed_id: int) -> bool:
        return seed_id in self._entries

    def __getitem__(self, seed_id: int) -> SeedEntry:
        return self._entries[seed_id]

    def entries(self) -> list[SeedEntry]:
        return list(self._entries.values())

    def _index(self, entry: SeedEntry) -> None:
        entry.seq = self._next_seq
        self._next_seq += 1
        heapq.heappush(self._heap, (-entry.priority, entry.seq, entry.id))

    def push(self, z: LatentPoint, origin: str, lineage: str, priority: float = 1.0) -> int:
        if not 0 < priority <= 1:
            raise ValueError("priority must lie in (0, 1]")
        entry = SeedEntry(z, priority, self._next_id, origin, lineage)
        self._next_id += 1
        self._entries[entry.id] = entry
        self._index(entry)
        return entry.id

    def _valid(self, item) -> bool:
        neg, seq, sid = item
        e = self._entries.get(sid)
        return e is not None and e.seq == seq and -neg == e.priority

    def peek(self) -> SeedEntry | None:
        while self._heap and not self._valid(self._heap[0]):
            heapq.heappop(self._heap)
        return self._entries[self._heap[0][2]] if self._heap else None

    def best_other(self, seed_id: int) -> SeedEntry | None:
        for item in sorted(self._heap):
            if item[2] != seed_id and self._valid(item):
                return self._entries[item[2]]
        return None

    def pop(self) -> SeedEntry | None:
        entry = self.peek()
        if entry is not None:
            heapq.heappop(self._heap)
            del self._entries[entry.id]
        return entry

    def decay(self, seed_id: int, rho: float, p_min: float) -> bool:
        """Multiply a seed's priority by ``rho``; retire it below ``p_min``.
        Returns True when retired."""
        entry = self._entries[seed_id]
        entry.priority *= rho
        if entry.priority < p_min:
            del self._entries[seed_id]
            return True
        heapq.heappush(self._heap, (-entry.priority, entry.seq, entry.id))
        return False

    def pop_order(self) -> list[int]:
        return [item[2] for item in sorted(self._heap) if self._valid(item)]


def init_queue(corpus) -> SeedQueue:
    if not corpus:
        raise ValueError("seed corpus is empty")
    queue = SeedQueue()
    for i, z in enumerate(corpus):
        queue.push(z, "corpus", f"seed:{i}")
    return queue


# -- campaign -------------------------------------------------------------------

@dataclass
class FuzzConfig:
    objective: str = "nc"
    budget_steps: int | None = 1000
    budget_seconds: float | None = None
    try_num: int = 50
    batch_size: int = 32
    step_scale: float = 0.5
    ridge: float = 1e-6
    priority_decay: float = 0.9
    p_min: float = 0.1
    strategy: str = "trajectory"
    rng_seed: int = 0
    delta: float = 0.0005
    Lambda: float = 0.8
    explore_class: int | None = None

    def __post_init__(self):
        if self.objective not in CRITERIA:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.strategy not in ("trajectory", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.try_num < 1 or self.batch_size < 1:
            raise ValueError("try_num and batch_size must be >= 1")
        if self.step_scale <= 0 or self.ridge < 0:
            raise ValueError("step_scale must be > 0 and ridge >= 0")
        if not 0 < self.priority_decay < 1:
            raise ValueError("priority_decay must lie in (0, 1)")
        if self.budget_steps is None and self.budget_seconds is None:
            raise ValueError("a step or wall-clock budget is required")
        if self.budget_steps is not None and self.budget_steps < 0:
            raise ValueError("budget_steps must be >= 0")


@dataclass
class Bindings:
    model: Model
    profile: NeuronProfile
    manifold: Manifold
    corpus: list[LatentPoint]
    oracle: object = field(default_factory=LabelConsistency)
    coverage: CoverageConfig = field(default_factory=CoverageConfig)
    mode: str = "graybox"
    corpus_inputs: np.ndarray | None = None  # originals, used for the Init. coverage


@dataclass
class StepOutcome:
    step: int
    provenance: str  # "exploit" or "explore"
    seed_id: int | None
    lineage: str
    accepted: bool
    gained: dict[str, int]
    faults: list[int]
    lam: float
    fitness: float | None = None
    retired: bool = False
    error: str | None = None

    def key(self) -> tuple:
        return (self.step, self.provenance, self.seed_id, self.lineage, self.accepted,
                tuple(sorted(self.gained.items())), tuple(self.faults), self.lam,
                self.fitness, self.retired, self.error)


class Campaign:
    """Mutable campaign state: queue, trajectory, coverage, schedule, report."""

    def __init__(self, config: FuzzConfig, bindings: Bindings):
        self.config = config
        self.b = bindings
        self._validate()
        # separate streams for the coin flip, prior samples and mutation steps, so
        # both strategies see the same sequence of prior samples for a given seed
        decide, explore, exploit = np.random.SeedSequence(config.rng_seed).spawn(3)
        self.rng_decide = np.random.default_rng(decide)
        self.rng_explore = np.random.default_rng(explore)
        self.rng_exploit = np.random.default_rng(exploit)
        self.queue = init_queue(bindings.corpus)
        self.trajectory = Trajectory.empty(bindings.manifold.latent_dim)
        self._factor = None
        self.schedule = Schedule(config.delta, config.Lambda)
        self.coverage = CoverageState(bindings.model.neuron_counts, bindings.coverage)
        self.corpus_classes = sorted({z.class_label for z in bindings.corpus})
        self.lineage_best: dict[str, float] = {}
        self.step_index = 0
        self._active: tuple[int | None, int] = (None, 0)
        self.outcomes: list[StepOutcome] = []
        m = bindings.manifold
        self.report = CampaignReport(
            bindings.mode, _config_json(config, bindings), m.data_shape, m.valid_range,
            init_coverage={}, warnings=list(getattr(m, "warnings", [])))
        self._initialise()

    def _validate(self):
        b = self.b
        if b.mode not in MODES:
            raise ValueError(f"unknown mode {b.mode!r}")
        if not b.corpus:
            raise ValueError("seed corpus is empty")
        b.profile.check_model(b.model)
        if b.model.input_shape != b.manifold.data_shape:
            raise ValueError(f"model input {b.model.input_shape} != manifold data "
                             f"shape {b.manifold.data_shape}")
        for z in b.corpus:
            if z.dim != b.manifold.latent_dim or z.class_label not in b.manifold.classes:
                raise ValueError("corpus point does not fit the manifold")
        if b.mode == "blackbox-quant" and not isinstance(b.oracle, QuantDiff):
            raise ValueError("blackbox-quant mode needs a quantized-differential oracle")
        if isinstance(b.oracle, (Differential, QuantDiff)):
            primary = b.oracle.models[0] if isinstance(b.oracle, Differential) else b.oracle.original
            if primary is not b.model:
                raise ValueError("the traced model must be the oracle's primary model")
        if self.config.explore_class is not None and self.config.explore_class not in b.manifold.classes:
            raise ValueError("explore_class is not a manifold class")

    def _initialise(self):
        b = self.b
        seeds = b.corpus_inputs if b.corpus_inputs is not None else [b.manifold.decode(z) for z in b.corpus]
        for x in seeds:
            _, trace = forward_trace(b.model, x)
            self.coverage.update_all(trace, b.profile, self.config.objective)
        if b.mode == "blackbox-quant":
            for entry in self.queue.entries():
                x = b.manifold.decode(entry.z)
                fit, _ = quant_fitness(forward(b.oracle.original, x), forward(b.oracle.quantized, x))
                self.lineage_best[entry.lineage] = fit
                self.report.lineage_best[entry.lineage] = [(0, fit)]
        values = self.coverage.values()
        self.report.init_coverage = dict(values)
        self.report.curve.append((0,) + tuple(values[c] for c in CRITERIA))

    @property
    def lam(self) -> float:
        return self.schedule.lam

    # one candidate ----------------------------------------------------------

    def _select_seed(self) -> SeedEntry:
        top = self.queue.peek()
        active, count = self._active
        if top.id == active and count >= self.config.try_num:
            other = self.queue.best_other(top.id)
            if other is not None:
                top, count = other, 0
        elif top.id != active:
            count = 0
        self._active = (top.id, count + 1)
        return top

    def propose(self):
        """Returns (candidate, provenance, seed entry or None, lineage)."""
        cfg = self.config
        u = self.rng_decide.random()
        exploit = cfg.strategy == "trajectory" and len(self.queue) > 0 and u < self.lam
        if exploit:
            seed = self._select_seed()
            if self._factor is None:
                self._factor = covariance_factor(self.trajectory.T, cfg.ridge)
            step = self._factor @ self.rng_exploit.standard_normal(self.trajectory.dim)
            z = LatentPoint(seed.z.coords + cfg.step_scale * step, seed.z.class_label)
            return z, "exploit", seed, seed.lineage
        if cfg.explore_class is not None:
            label = cfg.explore_class
        else:
            label = self.corpus_classes[int(self.rng_explore.integers(len(self.corpus_classes)))]
        z = self.b.manifold.sample_prior(self.rng_explore, label)
        return z, "explore", None, f"prior:{label}"

    def step(self) -> StepOutcome:
        b, cfg = self.b, self.config
        self.step_index += 1
        n = self.step_index
        z, provenance, seed, lineage = self.propose()
        if provenance == "exploit":
            self.report.exploited += 1
        else:
            self.report.explored += 1
        try:
            x, raw = b.manifold.decode_pair(z)
            probs, trace = forward_trace(b.model, x)
            verdict = evaluate(b.oracle, x, probs, z.class_label)
        except (NonFiniteError, ValueError, FloatingPointError) as exc:
            msg = f"step {n}: candidate skipped: {exc}"
            self.report.diagnostics.append(msg)
            log.warning(msg)
            outcome = StepOutcome(n, provenance, seed and seed.id, lineage, False,
                                  {c: 0 for c in CRITERIA}, [], self.lam, error=str(exc))
            self._record(outcome)
            return outcome
        gain = self.coverage.update_all(trace, b.profile, cfg.objective)
        fitness = verdict.fitness
        if b.mode == "blackbox-quant":
            accepted = fitness > self.lineage_best.get(lineage, -np.inf)
        else:
            accepted = gain.objective_gained
        fault_ids = []
        if verdict.is_fault and validate_input(x, b.manifold.valid_range):
            fault_ids.append(self._add_fault(n, z, x, raw, lineage, verdict))
        retired = False
        if accepted:
            self.queue.push(z, "accepted", lineage)
            self.trajectory = update_trajectory(self.trajectory, z)
            self._factor = None
            self.schedule.bump()
            self.report.accepted += 1
            if b.mode == "blackbox-quant":
                self.lineage_best[lineage] = fitness
                self.report.lineage_best.setdefault(lineage, []).append((n, fitness))
        elif seed is not None:
            retired = self.queue.decay(seed.id, cfg.priority_decay, cfg.p_min)
            self.report.retired += int(retired)
        outcome = StepOutcome(n, provenance, seed and seed.id, lineage, accepted, gain.gained,
                              fault_ids, self.lam, fitness, retired)
        self._record(outcome)
        return outcome

    def _add_fault(self, n, z, x, raw, lineage, verdict) -> int:
        preds = verdict.details.get("predictions", [])
        kind = self.b.oracle.kind
        if kind == "label":
            error_label = preds[0]
        elif preds:
            error_label = next((p for p in preds[1:] if p != preds[0]), None)
        else:
            error_label = None
        record = FaultRecord(
            id=len(self.report.faults), step=n, coords=z.coords.copy(), input=x, raw_input=raw,
            class_label=z.class_label, lineage=lineage, oracle=kind, predictions=list(preds),
            probabilities=verdict.details.get("probabilities", []), error_label=error_label,
            fitness=verdict.fitness)
        self.report.faults.append(record)
        return record.id

    def _record(self, outcome: StepOutcome):
        self.outcomes.append(outcome)
        self.report.steps = outcome.step
        self.report.lambda_history.append((outcome.step, outcome.lam, int(outcome.accepted)))
        if outcome.step % self.config.batch_size == 0:
            self._curve_row()

    def _curve_row(self):
        values = self.coverage.values()
        row = (self.step_index,) + tuple(values[c] for c in CRITERIA)
        if self.report.curve[-1][0] != self.step_index:
            self.report.curve.append(row)

    def run(self) -> CampaignReport:
        cfg = self.config
        deadline = None if cfg.budget_seconds is None else time.monotonic() + cfg.budget_seconds
        while True:
            if cfg.budget_steps is not None and self.step_index >= cfg.budget_steps:
                break
            if deadline is not None and time.monotonic() >= deadline:
                break
            self.step()
        return self.finish()

    def finish(self) -> CampaignReport:
        self._curve_row()
        self.report.final_coverage = dict(self.coverage.values())
        return self.report


def run_campaign(config: FuzzConfig, bindings: Bindings) -> CampaignReport:
    return Campaign(config, bindings).run()


def _config_json(config: FuzzConfig, bindings: Bindings) -> dict:
    out = asdict(config)
    out["coverage"] = asdict(bindings.coverage)
    out["oracle"] = bindings.oracle.kind
    out["corpus_size"] = len(bindings.corpus)
    out["latent_dim"] = bindings.manifold.latent_dim
    return out
