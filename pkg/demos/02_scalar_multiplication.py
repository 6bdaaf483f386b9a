"""Scalar products on PCM devices and the K^-1/2 averaging law.

Run with ``python demos/02_scalar_multiplication.py``.
"""

import numpy as np

from mpimc.crossbar import scalar_multiply_batch
from mpimc.experiments import ExperimentConfig, run_scalar_mult
from mpimc.pcm_device import NoiseModel

rng = np.random.default_rng(0)
beta, gamma = rng.uniform(0, 1, 1024), rng.uniform(0, 1, 1024)
theta = scalar_multiply_batch(beta, gamma, 1, NoiseModel(seed=0), np.random.default_rng(1))
print(f"K = 1: error std {np.std(theta - beta * gamma):.4f} over 1024 (beta, gamma) pairs")

report = run_scalar_mult(ExperimentConfig.default("scalar-mult", seed=0, problem={"repeats": 3}))
print(" K   std of error")
for k, s in zip(report["k_values"], report["std"]):
    print(f"{k:2d}   {s:.5f}")
print(f"log-log slope: {report['slope']:.3f} (ideal averaging gives -0.5)")
