"""Single-device behaviour: program-and-verify, nonlinear reads and drift.

Run with ``python demos/01_device_model.py``.
"""

import numpy as np

from mpimc import NoiseModel, apply_drift, program_and_verify, read_current

model = NoiseModel(sigma_prog=1.0, seed=1)

# Program one device to 25 uS and look at the verify loop's outcome.
dev = program_and_verify(25.0, model=model, rng_stream=0)
print(f"target 25 uS -> stored {dev.g_programmed:.3f} uS after {dev.iterations} pulse(s), "
      f"verify read {dev.verify_read:.3f} uS, converged={dev.converged}")

# A very noisy programming step sometimes exhausts the 20-pulse budget.
noisy = NoiseModel(sigma_prog=10.0, seed=2)
fails = sum(not program_and_verify(25.0, model=noisy, rng_stream=s).converged for s in range(2000))
print(f"sigma_prog = 10 uS: {fails / 2000:.1%} of 2000 devices did not converge")

# The current is nonlinear in the read voltage; f is pinned at 0.2 V.
clean = model.without_noise()
for v in (0.1, 0.2, 0.3):
    i = read_current(dev, v, 0.0, clean)
    print(f"  V = {v:.1f} V: I = {i:7.3f} uA, I/V = {i / v:6.2f} uS")

# Drift: conductance decays as a power law of time since programming.
for t in (25.0, 250.0, 2500.0, 25000.0):
    print(f"  t = {t:7.0f} s: G = {apply_drift(40.0, t, 25.0, 0.05):.2f} uS")

# Reads at the same index are reproducible; different indices give fresh noise.
reads = [read_current(dev, 0.2, 0.0, model, read_index=k) for k in range(5)]
print("five reads at 0.2 V:", np.round(reads, 3))
