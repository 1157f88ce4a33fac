"""How the sample weights react to the click model's confidence.

Feeds a stream of click predictions into the threshold tracker, then prints the
weights A (on conversions) and B (on non-conversions) across the probability range.
Run: python3 demos/curse_escaper.py
"""
import numpy as np

from cstwa.nn import make_rng
from cstwa.objective import CurseConfig, ThresholdTracker, curse_weights

rng = make_rng(0, "demo")
tracker = ThresholdTracker()
# click predictions look like a skewed low-rate distribution
tracker.push(rng.beta(0.6, 9.0, 20_000))
pos, neg, active = tracker.thresholds()
print(f"window {tracker.fill} predictions, 99th pct {pos:.4f}, 10th pct {neg:.5f}, active {active}")

grid = np.array([1e-4, 5e-4, 1e-3, neg, 0.05, 0.2, pos, 0.6, 0.8, 0.95])
for gamma in (1.0, 3.0):
    a, b = curse_weights(grid, pos, neg, CurseConfig(gamma=gamma))
    print(f"\ngamma = {gamma:g}")
    print("  y_hat       A      B")
    for y, wa, wb in zip(grid, a, b):
        print(f"  {y:8.5f}  {wa:5.3f}  {wb:5.3f}")
