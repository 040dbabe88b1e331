"""Adapt the inner encoder to a cheaper receiver.

The shipped decoder uses a memory-3 window per inner stream and 6 iterations.
Here the window is cut to memory 1 and the receiver runs 2 iterations; the
encoder is then fine-tuned through that receiver with a small learning rate.

Run with ``python demos/finetune_reduced_receiver.py [updates]`` (default 200;
the full schedule is 1000 updates, about 25 minutes on one core).
"""

import sys

from neuralbcjr.analysis import flip_energy, select_window, split_inner_streams
from neuralbcjr.system import desk_code
from neuralbcjr.tune import TrainConfig, finetune_encoder, validate

updates = int(sys.argv[1]) if len(sys.argv) > 1 else 200
code = desk_code()

# %% Pick the best memory-1 window for each stream from its flip energy
windows = tuple(select_window(flip_energy(s), 1) for s in split_inner_streams(code.inner))
print("reduced windows:", windows)

cfg = TrainConfig(batch_size=1000, lr=1e-5, snr_db=4.0, iterations=2, updates=updates, seed=9)
before = validate(code, windows, cfg.snr_db, iterations=2, blocks=10000)


def log(h):
    if h["update"] % 50 == 0:
        print(f"update {h['update']:4d}  loss {h['loss']:.5f}")


result = finetune_encoder(code, windows, cfg, log)
after = validate(code.with_model(result.model), windows, cfg.snr_db, iterations=2, blocks=10000)

# %% Same validation blocks before and after
print(f"BCE  {before['bce']:.5f} -> {after['bce']:.5f}")
print(f"BLER {before['bler']:.4f} -> {after['bler']:.4f}")
