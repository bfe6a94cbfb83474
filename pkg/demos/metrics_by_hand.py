"""The three energy metrics on a toy prediction set.

Run: python3 demos/metrics_by_hand.py
"""
import numpy as np

from voxcal.metrics import MetricsReport, mae, maeom_from, mape

gt = np.array([100.0, 100.0])
pred = np.array([110.0, 90.0])
print(f"MAE {mae(pred, gt):.2f} kCal, MAPE {mape(pred, gt):.2f}%")

# a reference pair: an MAE of 40.05 kCal on dishes averaging 253.48 kCal
print(f"MAEoM for 40.05 / 253.48: {maeom_from(40.05, 253.48):.2f}%")

rng = np.random.default_rng(0)
gt = rng.uniform(50, 500, 20)
print(MetricsReport.compute(gt * rng.uniform(0.8, 1.2, 20), gt))
