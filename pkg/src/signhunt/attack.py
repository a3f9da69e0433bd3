"""Iterative sign-step attack driver plus reference baselines.

The driver alternates two phases per outer iteration: evolve a population of
sign hypotheses against the current iterate at a wide exploration step, then
commit the best hypothesis at the small permanent step. The exploration step
shrinks as the committed distance grows (alpha + t*beta = epsilon), and the
best hypotheses survive into the next iteration's population.

Baselines: a white-box momentum sign attack driven by finite-difference
gradients (small models only), and a random-sign prober.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .de import (DEParams, FitnessSpec, Population, approx_gradient_signs,
                 evaluate, init_population)
from .errors import BudgetExceeded, ContractViolation
from .models import (Model, PredictionVector, QueryBudget, UNLIMITED,
                     in_top_k, numeric_gradient, top_label)
from .tensors import (ImageTensor, RngStream, linf_distance, perturb,
                      random_sign_tensor)

SUCCESS_RULES = ("top1", "top5")


@dataclass(frozen=True)
class AttackConfig:
    """epsilon: overall L-inf bound; iterations: outer steps T; keep_rate: KR,
    fraction of the population surviving between iterations.

    double_step=False freezes the exploration step at beta (ablation arm);
    keep_rate=0 disables candidate survival (ablation arm)."""

    epsilon: float
    iterations: int
    de: DEParams
    spec: FitnessSpec
    keep_rate: float = 0.2
    success_rule: str = "top1"
    early_return: bool = True
    double_step: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractViolation(f"epsilon must be > 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ContractViolation(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.keep_rate <= 1.0:
            raise ContractViolation(f"keep_rate must be in [0, 1], got {self.keep_rate}")
        if self.success_rule not in SUCCESS_RULES:
            raise ContractViolation(f"success_rule must be one of {SUCCESS_RULES}")

    @property
    def beta(self):
        return self.epsilon / self.iterations

    def to_dict(self):
        return {
            "epsilon": self.epsilon, "iterations": self.iterations,
            "population": self.de.size, "generations": self.de.generations,
            "scale_factor": self.de.scale_factor, "cross_prob": self.de.cross_prob,
            "force_jrand": self.de.force_jrand, "keep_rate": self.keep_rate,
            "mode": self.spec.mode, "label": self.spec.y, "target": self.spec.q,
            "success_rule": self.success_rule, "early_return": self.early_return,
            "double_step": self.double_step,
        }


@dataclass(frozen=True)
class StepState:
    """Step sizes in force while outer iteration t runs."""

    alpha: float
    beta: float
    t: int

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ContractViolation(f"bad step state ({self.alpha}, {self.beta})")

    def ledger_error(self, epsilon):
        """|alpha + t*beta - epsilon|; zero (to 1e-9) under the shrinking
        schedule."""
        return abs(self.alpha + self.t * self.beta - epsilon)


@dataclass(frozen=True)
class IterationRecord:
    t: int
    best_fitness: float  # fitness of the committed candidate at the beta step
    true_conf: float  # tracked label's score on the new iterate
    label: int  # top label of the new iterate
    adversarial: bool

    def to_dict(self):
        return {"t": self.t, "best_fitness": self.best_fitness,
                "true_conf": self.true_conf, "label": self.label,
                "adversarial": self.adversarial}


@dataclass
class AttackResult:
    image: ImageTensor
    success: bool
    final_label: int  # -1 when no iteration completed
    queries: int
    linf: float
    iterations_run: int
    trace: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    budget_exhausted: bool = False
    early_stop: bool = False
    wall_time: float = 0.0

    def to_dict(self):
        return {
            "success": self.success, "final_label": self.final_label,
            "queries": self.queries, "linf": self.linf,
            "iterations_run": self.iterations_run,
            "budget_exhausted": self.budget_exhausted,
            "early_stop": self.early_stop, "wall_time": self.wall_time,
            "trace": [r.to_dict() for r in self.trace],
            "ledger": [[s.t, s.alpha, s.beta] for s in self.ledger],
        }


def is_adversarial(pred: PredictionVector, spec: FitnessSpec, rule="top1") -> bool:
    """Has the prediction left the ground truth (or reached the target)?"""
    if rule not in SUCCESS_RULES:
        raise ContractViolation(f"unknown success rule {rule!r}")
    n = len(pred)
    if spec.mode == "targeted":
        if not 0 <= spec.q < n:
            raise ContractViolation(f"target {spec.q} out of range [0, {n})")
        return top_label(pred) == spec.q
    if spec.y >= n:  # sparse remote vector that no longer carries the label
        return True
    if rule == "top5":
        return not in_top_k(pred, spec.y, min(5, n))
    return top_label(pred) != spec.y


def _tracked_conf(pred: PredictionVector, spec: FitnessSpec) -> float:
    return float(pred.scores[spec.y]) if spec.y < len(pred) else 0.0


def kept_count(keep_rate, size) -> int:
    # round before ceil so keep_rate*size lands exactly on integers (0.2*100)
    return math.ceil(round(keep_rate * size, 9))


def reuse_candidates(pop: Population, keep_rate, rng: RngStream) -> Population:
    """Survivors by fitness rank (ties to the lower index, original order
    preserved); the rest re-drawn fresh. Cache invalidated — the base image
    changes before the next evaluation."""
    if pop.fitness is None:
        raise ContractViolation("candidate reuse needs an evaluated population")
    n = len(pop)
    keep = kept_count(keep_rate, n)
    order = np.argsort(pop.fitness, kind="stable")
    kept_idx = np.sort(order[:keep])
    shape = pop.members[0].shape if n else None
    members = [pop.members[i] for i in kept_idx]
    members += [random_sign_tensor(shape, rng) for _ in range(n - keep)]
    return Population(tuple(members))


def bmi_fgsm(base: ImageTensor, config: AttackConfig, classifier,
             rng: RngStream, workers=1) -> AttackResult:
    """Run the full attack from a valid base image.

    The classifier carries its own budget; on exhaustion the last fully
    completed iterate is reported (or an earlier adversarial iterate, if one
    was found and early_return was off). The committed candidate's prediction
    doubles as the success check, so no iteration costs extra queries.
    """
    if not base.is_valid_image():
        raise ContractViolation("attack needs a valid [0,1] base image")
    start = time.perf_counter()
    used0 = classifier.budget.used
    beta = config.beta
    spec = config.spec
    pop = init_population(base.shape, config.de, rng)
    current = base
    last_pred = None
    best_adv = None  # (fitness, image, pred, t) over adversarial iterates
    trace, ledger = [], []
    exhausted = False
    early = False

    for t in range(config.iterations):
        alpha = config.epsilon - t * beta if config.double_step else beta
        ledger.append(StepState(alpha, beta, t))

        approx = approx_gradient_signs(current, pop, alpha, config.de, spec,
                                       classifier, rng, workers=workers)
        if approx.partial:
            exhausted = True
            break
        pop = approx.population

        try:
            fits, preds = evaluate(pop.members, current, beta, spec,
                                   classifier, workers=workers)
        except BudgetExceeded:
            exhausted = True
            break
        j = int(np.argmin(fits))
        current = perturb(current, pop.members[j], beta)
        last_pred = preds[j]
        adv = is_adversarial(last_pred, spec, config.success_rule)
        trace.append(IterationRecord(t, float(fits[j]),
                                     _tracked_conf(last_pred, spec),
                                     top_label(last_pred), adv))
        if adv and (best_adv is None or fits[j] < best_adv[0]):
            best_adv = (float(fits[j]), current, last_pred, t)
        if adv and config.early_return:
            early = True
            break

        ranked = Population(pop.members, fits)  # survival ranked by beta-step fitness
        pop = reuse_candidates(ranked, config.keep_rate, rng)

    if exhausted and best_adv is not None:
        image, pred = best_adv[1], best_adv[2]
    else:
        image, pred = current, last_pred
    success = pred is not None and is_adversarial(pred, spec, config.success_rule)
    return AttackResult(
        image=image, success=success,
        final_label=top_label(pred) if pred is not None else -1,
        queries=classifier.budget.used - used0,
        linf=linf_distance(image, base), iterations_run=len(trace),
        trace=trace, ledger=ledger, budget_exhausted=exhausted,
        early_stop=early, wall_time=time.perf_counter() - start)


@dataclass(frozen=True)
class MIFGSMConfig:
    """White-box momentum baseline: epsilon bound, T iterations, decay mu."""

    epsilon: float
    iterations: int
    decay: float = 1.0
    h: float = 1e-4

    def __post_init__(self):
        if self.epsilon <= 0 or self.iterations < 1:
            raise ContractViolation("epsilon must be > 0 and iterations >= 1")
        if self.decay < 0:
            raise ContractViolation(f"decay must be >= 0, got {self.decay}")


def mi_fgsm_reference(base: ImageTensor, config: MIFGSMConfig, model: Model,
                      spec: FitnessSpec, budget: QueryBudget = None) -> AttackResult:
    """Momentum iterative sign attack with finite-difference gradients.

    Accumulates g <- decay*g + grad/||grad||_1 and steps epsilon/T along
    sign(g): up the true label's loss (untargeted) or down the target's
    (targeted). Affordable only on small models: 2m+1 queries per iteration.
    """
    if budget is None:
        budget = QueryBudget(UNLIMITED)
    start = time.perf_counter()
    used0 = budget.used
    step = config.epsilon / config.iterations
    loss_label = spec.q if spec.mode == "targeted" else spec.y
    direction = -1.0 if spec.mode == "targeted" else 1.0
    g = np.zeros(base.shape, dtype=np.float64)
    current = base
    trace = []
    pred = None
    exhausted = False

    for t in range(config.iterations):
        try:
            grad = numeric_gradient(model, current, loss_label, h=config.h,
                                    budget=budget)
            norm = float(np.abs(grad).sum())
            g = config.decay * g + (grad / norm if norm > 0.0 else 0.0)
            moved = current.data.astype(np.float64) + direction * step * np.sign(g)
            current = ImageTensor(np.clip(moved, 0.0, 1.0))
            budget.charge()
        except BudgetExceeded:
            exhausted = True
            break
        pred = PredictionVector(model.forward(current.data))
        adv = is_adversarial(pred, spec)
        trace.append(IterationRecord(t, float("nan"), _tracked_conf(pred, spec),
                                     top_label(pred), adv))
        if adv:
            break

    return AttackResult(
        image=current, success=pred is not None and is_adversarial(pred, spec),
        final_label=top_label(pred) if pred is not None else -1,
        queries=budget.used - used0, linf=linf_distance(current, base),
        iterations_run=len(trace), trace=trace, budget_exhausted=exhausted,
        wall_time=time.perf_counter() - start)


def random_sign_attack(base: ImageTensor, epsilon, tries, spec: FitnessSpec,
                       classifier, rng: RngStream, rule="top1") -> AttackResult:
    """Probe clip(base + epsilon*s) for fresh random sign tensors s."""
    if tries < 1:
        raise ContractViolation(f"tries must be >= 1, got {tries}")
    if epsilon <= 0:
        raise ContractViolation(f"epsilon must be > 0, got {epsilon}")
    start = time.perf_counter()
    used0 = classifier.budget.used
    current, pred = base, None
    exhausted = False
    trace = []
    for t in range(tries):
        candidate = perturb(base, random_sign_tensor(base.shape, rng), epsilon)
        try:
            pred = classifier.classify(candidate)
        except BudgetExceeded:
            exhausted = True
            break
        adv = is_adversarial(pred, spec, rule)
        trace.append(IterationRecord(t, float("nan"), _tracked_conf(pred, spec),
                                     top_label(pred), adv))
        if adv:
            current = candidate
            break
    success = bool(trace) and trace[-1].adversarial
    return AttackResult(
        image=current, success=success,
        final_label=trace[-1].label if trace else -1,
        queries=classifier.budget.used - used0,
        linf=linf_distance(current, base), iterations_run=len(trace),
        trace=trace, budget_exhausted=exhausted,
        wall_time=time.perf_counter() - start)
