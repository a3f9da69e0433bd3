"""DE engine: operators against enumeration oracles, the analytic hidden-sign
surrogate, and the evaluation/budget contract."""

import itertools

import numpy as np
import pytest

from signhunt.de import (DEParams, FitnessSpec, Population, approx_gradient_signs,
                         cache_key, crossover, evaluate, fitness,
                         init_population, mutate, select)
from signhunt.errors import BudgetExceeded, ContractViolation
from signhunt.models import PredictionVector, QueryBudget, UNLIMITED
from signhunt.tensors import ImageTensor, RngStream, SignCandidate, random_sign_tensor

from support import SurrogateClassifier, surrogate_setup

PARAMS = DEParams(size=4, generations=1)


def sc(values):
    return SignCandidate(np.float32(values).reshape(1, 1, -1))


class ScriptedRng:
    """Feeds a fixed queue of integer draws; uniforms come from a real stream."""

    def __init__(self, integers, seed=0):
        self.queue = list(integers)
        self._real = RngStream(seed)

    def integer(self, n):
        return self.queue.pop(0)

    def uniform(self, n):
        return self._real.uniform(n)

    def sign_array(self, shape):
        return self._real.sign_array(shape)


# --- init ---------------------------------------------------------------------

def test_init_population_counts_and_domain():
    pop = init_population((1, 2, 2), PARAMS, RngStream(1))
    assert len(pop) == 4
    for c in pop.members:
        assert set(np.unique(c.data)) <= {-1.0, 1.0}
    assert pop.fitness is None


def test_init_population_deterministic():
    a = init_population((1, 2, 2), PARAMS, RngStream(9))
    b = init_population((1, 2, 2), PARAMS, RngStream(9))
    assert all(x.data.tobytes() == y.data.tobytes()
               for x, y in zip(a.members, b.members))


def test_init_population_element_mean_near_zero():
    pop = init_population((1, 8, 8), DEParams(size=1000, generations=1), RngStream(3))
    stacked = np.stack([c.data for c in pop.members])
    assert abs(stacked.mean()) < 0.05


# --- mutate ---------------------------------------------------------------------

def test_mutate_direct_arithmetic():
    members = (sc([1, 1]), sc([1, -1]), sc([1, 1]), sc([-1, 1]))
    pop = Population(members)
    # scripted draws pick r1=1, r2=2, r3=3
    donor = mutate(pop, 0, DEParams(size=4, generations=1), ScriptedRng([0, 0, 0]))
    assert donor.data.ravel().tolist() == [1.0, -1.0]  # sign([3, -1])


def test_mutate_zero_differential_returns_r1():
    members = (sc([1, -1]), sc([-1, 1]), sc([1, 1]), sc([1, 1]))
    pop = Population(members)
    donor = mutate(pop, 0, DEParams(size=4, generations=1), ScriptedRng([0, 0, 0]))
    assert donor.data.tobytes() == members[1].data.tobytes()


def test_mutate_presign_values_never_zero_at_unit_scale():
    # enumerate all 8 sign triples: x1 + (x2 - x3) lands in {-3,-1,1,3}
    for x1, x2, x3 in itertools.product((-1.0, 1.0), repeat=3):
        val = x1 + 1.0 * (x2 - x3)
        assert val in (-3.0, -1.0, 1.0, 3.0)
        assert val != 0.0


def test_mutate_indices_pairwise_distinct():
    pop = init_population((1, 2, 2), DEParams(size=6, generations=1), RngStream(2))
    from signhunt.de import _distinct_indices
    rng = RngStream(5)
    seen = set()
    for _ in range(500):
        i = rng.integer(6)
        r1, r2, r3 = _distinct_indices(6, i, rng)
        assert len({i, r1, r2, r3}) == 4
        seen.update((r1, r2, r3))
    assert seen == set(range(6))  # every index reachable


def test_mutate_needs_four_members():
    small = Population((sc([1]), sc([1]), sc([-1])))
    with pytest.raises(ContractViolation):
        mutate(small, 0, DEParams(size=4, generations=1), RngStream(0))


def test_mutate_sign_zero_convention_plus_one():
    # DR=0.5 can produce exact zeros: x1=-1, x2=+1, x3=-1 -> -1 + 0.5*2 = 0
    members = (sc([1]), sc([-1]), sc([1]), sc([-1]))
    pop = Population(members)
    donor = mutate(pop, 0, DEParams(size=4, generations=1, scale_factor=0.5),
                   ScriptedRng([0, 0, 0]))
    assert donor.data.ravel().tolist() == [1.0]


# --- crossover --------------------------------------------------------------------

def test_crossover_cr_one_yields_mutant():
    p, m = sc([1, 1, 1, 1]), sc([-1, -1, -1, -1])
    child = crossover(p, m, DEParams(size=4, generations=1, cross_prob=1.0), RngStream(1))
    assert child.data.tobytes() == m.data.tobytes()


def test_crossover_cr_zero_yields_parent():
    p, m = sc([1, 1, 1, 1]), sc([-1, -1, -1, -1])
    child = crossover(p, m, DEParams(size=4, generations=1, cross_prob=0.0), RngStream(1))
    assert child.data.tobytes() == p.data.tobytes()


def test_crossover_inheritance_fraction_tracks_cr():
    shape = (1, 100, 100)
    p = SignCandidate(np.full(shape, 1.0, dtype=np.float32))
    m = SignCandidate(np.full(shape, -1.0, dtype=np.float32))
    child = crossover(p, m, DEParams(size=4, generations=1, cross_prob=0.9), RngStream(8))
    frac = float((child.data == -1.0).mean())
    assert 0.88 <= frac <= 0.92


def test_crossover_force_jrand_guarantees_one_mutant_position():
    p, m = sc([1, 1, 1, 1]), sc([-1, -1, -1, -1])
    params = DEParams(size=4, generations=1, cross_prob=0.0, force_jrand=True)
    child = crossover(p, m, params, RngStream(2))
    assert (child.data == -1.0).sum() == 1


# --- fitness ------------------------------------------------------------------------

def test_fitness_untargeted_direct():
    pred = PredictionVector([0.7, 0.2, 0.1])
    assert fitness(pred, FitnessSpec("untargeted", 0)) == pytest.approx(0.5)


def test_fitness_targeted_direct():
    pred = PredictionVector([0.7, 0.2, 0.1])
    assert fitness(pred, FitnessSpec("targeted", 0, 2)) == pytest.approx(0.6)


def test_fitness_uniform_is_zero_any_label():
    pred = PredictionVector([0.25] * 4)
    for y in range(4):
        assert fitness(pred, FitnessSpec("untargeted", y)) == pytest.approx(0.0)


def test_fitness_sign_agrees_with_top1():
    gen = np.random.default_rng(3)
    from signhunt.models import top_label
    for _ in range(200):
        scores = gen.random(5)
        pred = PredictionVector(scores / scores.sum())
        y = int(gen.integers(0, 5))
        f = fitness(pred, FitnessSpec("untargeted", y))
        if f < 0:
            assert top_label(pred) != y
        elif f > 0:
            assert top_label(pred) == y


def test_fitness_score_only_mode():
    pred = PredictionVector([0.3, 0.9], kind="raw-scores")
    assert fitness(pred, FitnessSpec("score_only", 1)) == pytest.approx(0.9)
    assert fitness(pred, FitnessSpec("score_only", 7)) == 0.0  # label absent


def test_fitness_spec_validation():
    with pytest.raises(ContractViolation):
        FitnessSpec("targeted", 2, 2)  # q == y
    with pytest.raises(ContractViolation):
        FitnessSpec("sideways", 0)


# --- evaluate ------------------------------------------------------------------------

def test_evaluate_zero_step_all_identical():
    shape, star, base, clf = surrogate_setup()
    pop = init_population(shape, DEParams(size=6, generations=1), RngStream(1))
    fits, _ = evaluate(pop.members, base, 0.0, FitnessSpec("untargeted", 0), clf)
    assert np.unique(fits).size == 1


def test_evaluate_matches_manual_composition():
    from signhunt.tensors import perturb
    shape, star, base, clf = surrogate_setup()
    cand = random_sign_tensor(shape, RngStream(4))
    spec = FitnessSpec("untargeted", 0)
    fits, preds = evaluate([cand], base, 0.25, spec, clf)
    manual = fitness(clf.classify(perturb(base, cand, 0.25)), spec)
    assert fits[0] == pytest.approx(manual, abs=1e-12)


def test_evaluate_worker_count_does_not_change_results():
    shape, star, base, _ = surrogate_setup(m=16, seed=5)
    pop = init_population(shape, DEParams(size=8, generations=1), RngStream(2))
    spec = FitnessSpec("untargeted", 0)
    serial, _ = evaluate(pop.members, base, 0.25, spec, SurrogateClassifier(star))
    threaded, _ = evaluate(pop.members, base, 0.25, spec, SurrogateClassifier(star),
                           workers=8)
    assert np.array_equal(serial, threaded)


def test_evaluate_charges_one_unit_per_candidate():
    shape, star, base, clf = surrogate_setup()
    pop = init_population(shape, DEParams(size=7, generations=1), RngStream(3))
    evaluate(pop.members, base, 0.25, FitnessSpec("untargeted", 0), clf)
    assert clf.budget.used == 7


# --- select -------------------------------------------------------------------------

def ranked_population(members, fits, key=("k",)):
    return Population(tuple(members), np.asarray(fits, float), key)


def test_select_all_children_worse_keeps_parents():
    members = [sc([1, 1]), sc([-1, 1])]
    pop = ranked_population(members, [0.1, 0.2])
    children = [sc([-1, -1]), sc([1, -1])]
    out = select(pop, children, [0.5, 0.9])
    assert [m.data.tobytes() for m in out.members] == [m.data.tobytes() for m in members]
    assert out.fitness.tolist() == [0.1, 0.2]


def test_select_all_children_fitter_takes_children():
    pop = ranked_population([sc([1, 1]), sc([-1, 1])], [0.5, 0.9])
    children = [sc([-1, -1]), sc([1, -1])]
    out = select(pop, children, [0.1, 0.2])
    assert [m.data.tobytes() for m in out.members] == [c.data.tobytes() for c in children]


def test_select_tie_prefers_child():
    pop = ranked_population([sc([1, 1])], [0.3])
    child = sc([-1, -1])
    out = select(pop, [child], [0.3])
    assert out.members[0].data.tobytes() == child.data.tobytes()


def test_select_matches_elementwise_min_oracle():
    gen = np.random.default_rng(12)
    for _ in range(50):
        n = 6
        parents = [sc([1, -1]) for _ in range(n)]
        children = [sc([-1, 1]) for _ in range(n)]
        pf, cf = gen.random(n), gen.random(n)
        out = select(ranked_population(parents, pf), children, cf)
        assert np.array_equal(out.fitness, np.minimum(pf, cf))


def test_select_stale_cache_rejected():
    pop = ranked_population([sc([1]), sc([-1])], [0.1, 0.2], key=("old",))
    with pytest.raises(ContractViolation):
        select(pop, [sc([1]), sc([1])], [0.0, 0.0], expected_key=("new",))
    bare = Population((sc([1]), sc([-1])))
    with pytest.raises(ContractViolation):
        select(bare, [sc([1]), sc([1])], [0.0, 0.0])


# --- approx_gradient_signs ------------------------------------------------------------

def test_approx_zero_generations_returns_evaluated_population():
    shape, star, base, clf = surrogate_setup()
    params = DEParams(size=5, generations=0)
    pop = init_population(shape, params, RngStream(1))
    res = approx_gradient_signs(base, pop, 0.25, params, FitnessSpec("untargeted", 0),
                                clf, RngStream(2))
    assert not res.partial
    assert res.population.fitness is not None
    assert clf.budget.used == 5  # N * (0 + cache fill)


def test_approx_best_trace_non_increasing():
    for seed in (0, 1, 2, 3, 4):
        shape, star, base, clf = surrogate_setup(m=16, seed=seed)
        params = DEParams(size=8, generations=12)
        pop = init_population(shape, params, RngStream(seed))
        res = approx_gradient_signs(base, pop, 0.25, params,
                                    FitnessSpec("untargeted", 0), clf,
                                    RngStream(seed + 100))
        trace = res.generation_best
        assert len(trace) == 13
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_approx_budget_formula_cold_and_warm_cache():
    shape, star, base, clf = surrogate_setup()
    params = DEParams(size=6, generations=3)
    spec = FitnessSpec("untargeted", 0)
    pop = init_population(shape, params, RngStream(1))
    res = approx_gradient_signs(base, pop, 0.25, params, spec, clf, RngStream(2))
    assert clf.budget.used == 6 * (3 + 1)  # cold cache: N*(G+1)
    # warm cache: reuse the returned population at the same (base, step, spec)
    res2 = approx_gradient_signs(base, res.population, 0.25, params, spec, clf,
                                 RngStream(3))
    assert clf.budget.used == 6 * (3 + 1) + 6 * 3  # + N*G only
    assert not res2.partial


def test_approx_partial_on_budget_exhaustion():
    shape, star, base, _ = surrogate_setup()
    params = DEParams(size=6, generations=10)
    spec = FitnessSpec("untargeted", 0)
    clf = SurrogateClassifier(star, limit=6 * (2 + 1) + 3)  # dies inside gen 3
    pop = init_population(shape, params, RngStream(1))
    res = approx_gradient_signs(base, pop, 0.25, params, spec, clf, RngStream(2))
    assert res.partial
    assert res.population.fitness is not None  # last completed generation
    assert len(res.generation_best) == 3  # initial eval + 2 full generations
    assert clf.budget.used == clf.budget.limit


def test_approx_candidates_stay_sign_closed():
    shape, star, base, clf = surrogate_setup()
    params = DEParams(size=6, generations=5)
    pop = init_population(shape, params, RngStream(7))
    res = approx_gradient_signs(base, pop, 0.25, params, FitnessSpec("untargeted", 0),
                                clf, RngStream(8))
    for c in res.population.members:
        assert set(np.unique(c.data)) <= {-1.0, 1.0}


def test_surrogate_recovery_smoke():
    # the 20-seed quantitative version lives in the acceptance suite
    shape, star, base, clf = surrogate_setup(m=16, seed=11)
    params = DEParams(size=20, generations=30)
    pop = init_population(shape, params, RngStream(11))
    res = approx_gradient_signs(base, pop, 0.25, params, FitnessSpec("untargeted", 0),
                                clf, RngStream(111))
    best = res.population.members[res.population.best_index()]
    matches = int((best.data.ravel() == star.ravel()).sum())
    assert matches >= 14
