"""Effective memory of polynomial and CNN encoders, and the trellises they induce.

Run with ``python demos/memory_and_trellis.py``.
"""

import numpy as np

from neuralbcjr.analysis import estimate_memory, flip_energy, grad_energy, split_inner_streams
from neuralbcjr.cnn import CnnEncoder, random_model
from neuralbcjr.codes import MultiStreamEncoder, PolynomialEncoder
from neuralbcjr.trellis import build_from_cnn, build_from_polynomial, dump_text

np.set_printoptions(precision=3, suppress=True)

# %% Polynomial codes: flipping an input either changes the output or it doesn't
g0 = PolynomialEncoder((-2, 0, 1))
g1 = PolynomialEncoder((-1, 0, 3))
for name, enc in (("G0", g0), ("G1", g1)):
    e = flip_energy(enc)
    prof = estimate_memory(e)
    print(name, "offsets", e.offsets, "energy", e.raw, "-> window", prof.contributing,
          "memory", prof.memory)

joint = MultiStreamEncoder([g0, g1])
prof = estimate_memory(flip_energy(joint, out_depth=None))
tr = build_from_polynomial(joint)
print("joint code: memory", prof.memory, "states", tr.n_states)

# %% A random CNN has graded sensitivities; both estimators agree on the shape
cnn = CnnEncoder(random_model([1, 8, 8, 1], (5, 5, 3), seed=2))
flip = flip_energy(cnn)
grad = grad_energy(cnn, seed=2)
print("\nCNN flip energy (peak-normalized):", flip.normalized)
print("CNN grad energy (peak-normalized):", grad.normalized)
print("Pearson r:", np.corrcoef(flip.raw, grad.raw)[0, 1])

for t in (1e-1, 2e-2, 1e-3):
    p = estimate_memory(flip, t)
    print(f"threshold {t:g}: window {p.contributing}, {p.n_states} states")

# %% The trellis averages the output over positions outside the window
small = build_from_cnn(cnn, estimate_memory(flip, 1e-1))
print("\n" + dump_text(small)[:600])

# %% A two-stream inner encoder is analyzed one stream at a time
inner = CnnEncoder(random_model([2, 16, 2], (3, 3), seed=0))
for f, stream in enumerate(split_inner_streams(inner)):
    p = estimate_memory(flip_energy(stream))
    print(f"inner stream {f}: window {p.contributing}, memory {p.memory}, "
          f"BPSK-like {p.bpsk_like}")
