"""Differential Evolution over sign tensors.

Searches the {-1,+1}^m space of gradient-sign hypotheses for a fixed base
image: candidates are turned into perturbed images, scored through the
classifier, and evolved by rand/1/bin-style mutation, binomial crossover, and
greedy per-index selection. All randomness is drawn serially from one stream
before any evaluation runs, so results are independent of evaluation
parallelism.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import BudgetExceeded, ContractViolation
from .models import PredictionVector
from .tensors import ImageTensor, RngStream, SignCandidate, perturb, random_sign_tensor


@dataclass(frozen=True)
class DEParams:
    """size: population N; generations: DE rounds G; scale_factor: differential
    weight DR; cross_prob: crossover probability CR."""

    size: int
    generations: int
    scale_factor: float = 1.0
    cross_prob: float = 0.9
    force_jrand: bool = False  # classic rand/1/bin guaranteed index; off by default

    def __post_init__(self):
        if self.size < 4:
            raise ContractViolation(f"population needs >= 4 members, got {self.size}")
        if self.generations < 0:
            raise ContractViolation(f"generations must be >= 0, got {self.generations}")
        if not 0.0 <= self.cross_prob <= 1.0:
            raise ContractViolation(f"cross_prob must be in [0, 1], got {self.cross_prob}")


@dataclass(frozen=True)
class FitnessSpec:
    """untargeted(y): suppress the true label's margin over the runner-up.
    targeted(y, q): lift label q above every other label.
    score_only(y): minimize the tracked label's raw score (sparse remote mode).
    """

    mode: str
    y: int
    q: int = None

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted", "score_only"):
            raise ContractViolation(f"unknown fitness mode {self.mode!r}")
        if self.mode == "targeted":
            if self.q is None or self.q == self.y:
                raise ContractViolation("targeted mode needs a target label q != y")

    def key(self):
        return (self.mode, self.y, self.q)


@dataclass(frozen=True)
class Population:
    """N sign candidates plus a fitness cache valid for one (base, step, spec)."""

    members: tuple
    fitness: np.ndarray = None
    cache_key: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.fitness is not None:
            fit = np.asarray(self.fitness, dtype=np.float64)
            if fit.shape != (len(self.members),):
                raise ContractViolation("fitness cache length mismatch")
            fit.flags.writeable = False
            object.__setattr__(self, "fitness", fit)

    def __len__(self):
        return len(self.members)

    def valid_for(self, key):
        return self.fitness is not None and self.cache_key == key

    def best_index(self):
        if self.fitness is None:
            raise ContractViolation("population has no evaluated fitness")
        return int(np.argmin(self.fitness))

    def invalidated(self):
        return Population(self.members, None, None)


class EvalResult(NamedTuple):
    fitness: np.ndarray
    predictions: list


def cache_key(base: ImageTensor, step, spec: FitnessSpec):
    return (base.digest(), float(step), spec.key())


def init_population(shape, params: DEParams, rng: RngStream) -> Population:
    """N candidates of independent fair +/-1 draws; fitness cache invalid."""
    return Population(tuple(random_sign_tensor(shape, rng) for _ in range(params.size)))


def _distinct_indices(n, exclude, rng: RngStream):
    # partial Fisher-Yates over the n-1 indices != exclude; 3 draws
    pool = [j for j in range(n) if j != exclude]
    for k in range(3):
        j = k + rng.integer(len(pool) - k)
        pool[k], pool[j] = pool[j], pool[k]
    return pool[0], pool[1], pool[2]


def mutate(pop: Population, i, params: DEParams, rng: RngStream) -> SignCandidate:
    """Donor sign(x_r1 + DR * (x_r2 - x_r3)) from three distinct members != i.
    sign(0) is defined as +1 (unreachable at DR=1 on sign inputs)."""
    n = len(pop)
    if n < 4:
        raise ContractViolation(f"mutation needs population >= 4, got {n}")
    r1, r2, r3 = _distinct_indices(n, i, rng)
    dr = np.float32(params.scale_factor)
    donor = pop.members[r1].data + dr * (pop.members[r2].data - pop.members[r3].data)
    return SignCandidate(np.where(donor < 0.0, np.float32(-1.0), np.float32(1.0)))


def crossover(parent: SignCandidate, mutant: SignCandidate, params: DEParams,
              rng: RngStream) -> SignCandidate:
    """Binomial recombination: each element takes the mutant value with
    probability CR, else the parent's."""
    if parent.shape != mutant.shape:
        raise ContractViolation(f"shape mismatch: {parent.shape} vs {mutant.shape}")
    m = parent.data.size
    mask = (rng.uniform(m) < params.cross_prob).reshape(parent.shape)
    if params.force_jrand:
        j = rng.integer(m)
        mask = mask.copy()
        mask.flat[j] = True
    return SignCandidate(np.where(mask, mutant.data, parent.data))


def fitness(pred: PredictionVector, spec: FitnessSpec) -> float:
    """Lower is fitter. Untargeted: F_y - max_{i!=y} F_i. Targeted:
    max_{i!=q} F_i - F_q. score_only: F_y (0 when the label is absent)."""
    s = pred.scores
    n = s.size
    if spec.mode == "score_only":
        return float(s[spec.y]) if spec.y < n else 0.0
    if not 0 <= spec.y < n:
        raise ContractViolation(f"label {spec.y} out of range [0, {n})")
    if n < 2:
        raise ContractViolation("margin fitness needs at least 2 labels")
    if spec.mode == "untargeted":
        others = np.delete(s, spec.y)
        return float(s[spec.y] - others.max())
    if not 0 <= spec.q < n:
        raise ContractViolation(f"target {spec.q} out of range [0, {n})")
    others = np.delete(s, spec.q)
    return float(others.max() - s[spec.q])


def evaluate(candidates, base: ImageTensor, step, spec: FitnessSpec, classifier,
             workers=1) -> EvalResult:
    """Fitness of perturb(base, c, step) for each candidate, one budget unit
    per candidate, results independent of evaluation order."""
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}")
    images = [perturb(base, c, step) for c in candidates]
    if hasattr(classifier, "classify_batch"):
        preds = classifier.classify_batch(images)
    elif workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(classifier.classify, images))
    else:
        preds = [classifier.classify(img) for img in images]
    fits = np.array([fitness(p, spec) for p in preds], dtype=np.float64)
    return EvalResult(fits, preds)


def select(pop: Population, children, child_fitness, expected_key=None) -> Population:
    """Position-wise greedy selection; the child survives on ties."""
    if pop.fitness is None:
        raise ContractViolation("parent fitness cache is missing")
    if expected_key is not None and pop.cache_key != expected_key:
        raise ContractViolation("parent fitness cache is stale for this base image")
    child_fitness = np.asarray(child_fitness, dtype=np.float64)
    if len(children) != len(pop) or child_fitness.shape != (len(pop),):
        raise ContractViolation("children/fitness length mismatch")
    members = list(pop.members)
    fits = pop.fitness.copy()
    for i in range(len(pop)):
        if child_fitness[i] <= fits[i]:
            members[i] = children[i]
            fits[i] = child_fitness[i]
    return Population(tuple(members), fits, pop.cache_key)


class ApproxResult(NamedTuple):
    population: Population
    partial: bool  # budget ran out; population is the last completed generation
    generation_best: list  # best fitness after initial eval and each generation


def approx_gradient_signs(base: ImageTensor, pop: Population, step, params: DEParams,
                          spec: FitnessSpec, classifier, rng: RngStream,
                          workers=1) -> ApproxResult:
    """Evolve the population for `params.generations` rounds against a fixed
    base image at exploration distance `step`.

    Budget use: N per generation, plus N up front when the fitness cache does
    not match (base, step, spec). On exhaustion the population of the last
    completed generation is returned with partial=True.
    """
    key = cache_key(base, step, spec)
    trace = []
    if not pop.valid_for(key):
        try:
            fits, _ = evaluate(pop.members, base, step, spec, classifier, workers)
        except BudgetExceeded:
            return ApproxResult(pop, True, trace)
        pop = Population(pop.members, fits, key)
    trace.append(float(pop.fitness.min()))

    for _ in range(params.generations):
        children = []
        for i in range(len(pop)):  # all draws serial, before any evaluation
            donor = mutate(pop, i, params, rng)
            children.append(crossover(pop.members[i], donor, params, rng))
        try:
            child_fits, _ = evaluate(children, base, step, spec, classifier, workers)
        except BudgetExceeded:
            return ApproxResult(pop, True, trace)
        pop = select(pop, children, child_fits, expected_key=key)
        trace.append(float(pop.fitness.min()))
    return ApproxResult(pop, False, trace)
