"""
What the two tricks buy you
===========================

The attack leans on two mechanisms: a split step size (explore at a wide
radius alpha, commit small permanent beta-steps) and candidate reuse (carry
the best sign patterns into the next iteration). Disable each and watch the
cost under a hard query budget.
"""

import numpy as np

from signhunt import (AttackConfig, DEParams, FitnessSpec, LocalClassifier,
                      QueryBudget, RngStream, UNLIMITED, bmi_fgsm, classify,
                      derive_seed, pattern_dataset, top_label, train_toy)

# same subject as single_attack.py
dataset = pattern_dataset(3, (1, 8, 8), 20, noise=0.08, rng=RngStream(7))
model = train_toy(dataset, hidden=(32,), epochs=100, lr=0.1, rng=RngStream(1)).model

items = [(i, dataset.item(i), int(dataset.labels[i])) for i in range(len(dataset))
         if top_label(classify(model, dataset.item(i), QueryBudget(UNLIMITED)))
         == dataset.labels[i]][:12]
print(f"attacking {len(items)} correctly-classified items, "
      f"budget 14000 queries each\n")

ARMS = {
    "full strategy": dict(keep_rate=0.2, double_step=True),
    "fixed step size": dict(keep_rate=0.2, double_step=False),
    "no candidate reuse": dict(keep_rate=0.0, double_step=True),
}

print(f"{'arm':20s} {'success':>8s} {'mean queries':>13s} {'mean iterations':>16s}")
for arm, knobs in ARMS.items():
    wins, queries, iters = 0, [], []
    for i, image, label in items:
        config = AttackConfig(epsilon=0.3, iterations=20,
                              de=DEParams(size=40, generations=30),
                              spec=FitnessSpec("untargeted", label), **knobs)
        classifier = LocalClassifier(model, QueryBudget(14000))
        result = bmi_fgsm(image, config, classifier,
                          RngStream(derive_seed(0, f"item{i}")))
        wins += result.success
        queries.append(result.queries)
        iters.append(result.iterations_run)
    print(f"{arm:20s} {wins:>5d}/{len(items)} {np.mean(queries):>13.0f} "
          f"{np.mean(iters):>16.1f}")

print("""
Reading the table: without candidate reuse each iteration restarts its sign
search from scratch, needs more iterations to find a flip, and usually starves
before the budget runs out. The split step size is success-neutral at this
scale; run with early_return=False and compare final confidences to see it
dig deeper per iteration (the library's test suite pins that ordering).""")
