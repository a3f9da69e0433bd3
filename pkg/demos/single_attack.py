"""
Fooling a classifier you can only query
=======================================

Train a small image classifier, then flip one of its predictions without
touching its weights: the attacker sees nothing but prediction scores, and
every pixel of the crafted sample stays within +-0.3 of the original.
"""

import numpy as np

from signhunt import (AttackConfig, DEParams, FitnessSpec, LocalClassifier,
                      QueryBudget, RngStream, UNLIMITED, bmi_fgsm, classify,
                      linf_distance, pattern_dataset, save_png, top_label,
                      train_toy)

# ---- a test subject: 3-class 8x8 striped/checkered patterns ------------------

dataset = pattern_dataset(3, (1, 8, 8), 20, noise=0.08, rng=RngStream(7))
trained = train_toy(dataset, hidden=(32,), epochs=100, lr=0.1, rng=RngStream(1))
model = trained.model
print(f"subject model: train accuracy {trained.accuracy:.1%} on {len(dataset)} items")

# pick the first item the model gets right
index = next(i for i in range(len(dataset))
             if top_label(classify(model, dataset.item(i), QueryBudget(UNLIMITED)))
             == dataset.labels[i])
image, label = dataset.item(index), int(dataset.labels[index])
clean = classify(model, image, QueryBudget(UNLIMITED))
print(f"item {dataset.ids[index]}: true label {label}, "
      f"clean confidence {clean.scores[label]:.3f}")

# ---- the attack: evolve gradient-sign guesses, step, repeat -------------------

# epsilon bounds the max per-pixel change; T splits it into per-iteration steps;
# each iteration evolves N sign patterns for G generations before committing.
config = AttackConfig(
    epsilon=0.3, iterations=20,
    de=DEParams(size=40, generations=30),
    spec=FitnessSpec("untargeted", label),
)
classifier = LocalClassifier(model, QueryBudget(UNLIMITED))
result = bmi_fgsm(image, config, classifier, RngStream(42))

print(f"\nsuccess={result.success} after {result.iterations_run} iterations "
      f"and {result.queries} queries")
print(f"final label {result.final_label}, "
      f"max pixel change {result.linf:.4f} (bound 0.3)")

# ---- how the true label's confidence decayed ----------------------------------

print("\niter  true-label confidence")
for rec in result.trace:
    bar = "#" * int(40 * rec.true_conf)
    print(f"{rec.t:4d}  {rec.true_conf:.4f} {bar}")

# the sample is an ordinary image: save both and diff them yourself
save_png(image, "clean.png")
save_png(result.image, "adversarial.png")
delta = np.abs(result.image.data - image.data)
print(f"\nwrote clean.png and adversarial.png; "
      f"mean |delta| {delta.mean():.4f}, max {delta.max():.4f} "
      f"(= {linf_distance(result.image, image):.4f})")
