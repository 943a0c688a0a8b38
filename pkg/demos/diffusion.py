"""Denoising a random diffusion chain with Newton + PCR on a shared noise tape.

Run: python3 demos/diffusion.py
"""

import numpy as np

from deeppcr.newton import NewtonConfig, newton_solve
from deeppcr.sequences import NoiseSchedule, NoiseTape, anchor_guess, diffusion_sequence, init_denoiser, rollout

d, L = 16, 512
seq = diffusion_sequence(init_denoiser(d, seed=0), NoiseSchedule.linear(L), NoiseTape.sample(L, d, seed=0),
                         np.random.default_rng(0).standard_normal(d))
ref = rollout(seq)
z, report = newton_solve(seq, anchor_guess(seq), NewtonConfig.diffusion())
print(f"d={d} L={L}: {report.iterations} Newton iterations, "
      f"L-inf error vs sequential sampling {np.max(np.abs(z[-1] - ref[-1])):.2e}")
