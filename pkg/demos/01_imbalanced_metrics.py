# Why pixel F1 and not accuracy or AUROC when anomalies are tiny.
# Run: python3 demos/01_imbalanced_metrics.py

import numpy as np

from scenead.metrics import evaluate_maps, imbalance_demo, optimal_f1_sweep, pixel_auroc, pixel_f1

rng = np.random.default_rng(0)

# a 100x100 map with 22 anomalous pixels (0.22%)
truth = np.zeros((100, 100), dtype=np.uint8)
truth[40:42, 50:61] = 1
print("anomalous fraction:", truth.mean())

# "everything is normal" is 99.78% accurate and useless
pred_nothing = np.zeros(truth.size)
print("all-negative accuracy:", 1 - truth.mean())
print("all-negative F1:", pixel_f1(pred_nothing, truth.ravel(), 0.5)["f1"])

# a detector that ranks anomalies high but also lights up a wide halo
scores = rng.normal(0, 1, truth.shape)
scores[30:52, 40:71] += 4.0  # halo
scores[truth == 1] += 0.5
print("AUROC:", round(pixel_auroc(scores.ravel(), truth.ravel()), 4))
best = optimal_f1_sweep(scores.ravel(), truth.ravel())
print("best F1:", round(best["f1_max"], 4), "at threshold", round(best["threshold"], 3))

# the report flags this combination
report = evaluate_maps([scores], [truth], ["demo"])
print(imbalance_demo(report))

# F1 keeps its optimum under any strictly increasing rescaling of the scores
print("F1 after exp():", round(optimal_f1_sweep(np.exp(scores).ravel(), truth.ravel())["f1_max"], 4))
