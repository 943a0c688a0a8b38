"""Newton + PCR forward pass of a deep ReLU MLP versus the plain rollout.

Run: python3 demos/forward_pass.py
"""

import time

import numpy as np

from deeppcr.newton import NewtonConfig, newton_solve
from deeppcr.nn import init_params
from deeppcr.sequences import first_layer_copy_guess, mlp_forward_sequence, rollout

L, w = 1024, 4
params = init_params([w] + [w] * (L + 1), "relu", seed=0, scheme="fan_in")
seq = mlp_forward_sequence(params, np.random.default_rng(0).standard_normal(w))

t0 = time.perf_counter()
ref = rollout(seq)
t_seq = time.perf_counter() - t0

t0 = time.perf_counter()
z, report = newton_solve(seq, first_layer_copy_guess(seq), NewtonConfig.forward_pass())
t_pcr = time.perf_counter() - t0

print(f"L={L} w={w}: {report.iterations} Newton iterations ({report.stop_reason}), "
      f"{report.barriers} PCR barriers in total")
for k, r in enumerate(report.residual_history):
    print(f"  residual after {k} updates: {r:.3e}")
print(f"output error vs rollout: {np.linalg.norm(z[-1] - ref[-1]):.2e}")
print(f"wall clock: rollout {t_seq * 1e3:.1f} ms, newton+pcr {t_pcr * 1e3:.1f} ms "
      "(one core; the barrier count, not this ratio, is what parallel hardware rewards)")
