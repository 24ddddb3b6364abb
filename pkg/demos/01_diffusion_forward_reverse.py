"""Walk through the diffusion machinery on a synthetic slice.

Builds the linear noise schedule, corrupts a phantom slice to a few
depths with the closed-form forward jump, checks the chain/jump
consistency empirically, and runs the reverse sampler with a stub
predictor. Writes a PGM strip you can open with any image viewer.
"""

import os

import numpy as np

from diffseg import (
    PhantomSpec,
    RngStream,
    corpus_intensity_stats,
    gen_phantom,
    make_schedule,
    normalize_intensity,
    q_sample,
    q_step,
    sample_loop,
    slice_and_resize,
)
from diffseg.cli import window_to_u8, write_pgm

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

# the schedule used throughout: beta rises linearly 1e-4 -> 0.02 over T steps
sched = make_schedule(T=1000, beta_start=1e-4, beta_end=0.02)
print("alpha_bar at t=1, 250, 500, 1000:",
      [round(sched.alpha_bar(t), 4) for t in (1, 250, 500, 1000)])
print("by t=1000 the signal fraction sqrt(alpha_bar) is",
      f"{np.sqrt(sched.alpha_bar(1000)):.2e} -> x_T is essentially pure noise")

# a normalized phantom slice in [-1, 1]
vol = gen_phantom(PhantomSpec(seed=4, shape=(40, 64, 64), organs=5))
stats = corpus_intensity_stats([vol])
ds = slice_and_resize(normalize_intensity(vol, stats), "demo", 64)
x0 = ds[20].image
rng = RngStream(11)

# forward corruption at increasing depth, shown as one image strip
depths = [0, 100, 300, 600, 1000]
panels = [x0]
for t in depths[1:]:
    panels.append(q_sample(x0, t, rng.normal(x0.shape), sched))
strip = np.concatenate([np.clip(p, -1, 1) for p in panels], axis=1)
write_pgm(np.round((strip + 1) / 2 * 255).astype(np.uint8),
          os.path.join(OUT, "forward_corruption.pgm"))
print(f"wrote {OUT}/forward_corruption.pgm (t = {depths})")

# stepping the chain one transition at a time matches the closed-form jump
n = 50_000
chain = np.zeros(n, dtype=np.float64)
for t in range(1, 301):
    chain = q_step(chain, t, rng.normal((n,), dtype=np.float64), sched)
print(f"chain variance after 300 steps: {chain.var():.4f} "
      f"(closed form 1 - alpha_bar = {1 - sched.alpha_bar(300):.4f})")

# reverse process with a stub predictor: from pure noise to a smooth blob.
# An untrained predictor gives noise, not anatomy; demo 02 trains a real one.
blur = lambda x, t: x * 0.8
img = sample_loop(blur, (1, 1, 64, 64), sched, RngStream(3))
write_pgm(window_to_u8(np.clip(img[0, 0], -1, 1), 2.0, 0.0),
          os.path.join(OUT, "reverse_stub.pgm"))
print(f"wrote {OUT}/reverse_stub.pgm; raw range [{img.min():.2f}, {img.max():.2f}]")
