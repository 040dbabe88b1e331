"""Regenerate the desk-scale inner encoder shipped as ``data/desk_inner.json``.

The fixture is a 2-16-2 CNN (kernel sizes 3, 3) trained from a seeded random
initialization through a 2-iteration turbo receiver whose inner trellises use
the window (-2, 1) on both streams.  The run is deterministic; on one CPU core
it takes about seven minutes.

Run with ``python demos/train_desk_fixture.py [output.json]``.
"""

import sys
from pathlib import Path

from neuralbcjr.cnn import random_model, save_weights
from neuralbcjr.codes import Interleaver
from neuralbcjr.system import DESK_DEPTHS, DESK_K, DESK_KERNELS, DESK_WINDOW, SerialCode, outer_code
from neuralbcjr.tune import TrainConfig, train_inner_from_scratch, validate

RECIPE = TrainConfig(batch_size=500, lr=3e-3, updates=400, iterations=2, snr_db=2.0, seed=0)
INIT_SEED = 0

default_out = Path(__file__).resolve().parents[1] / "src" / "neuralbcjr" / "data" / "desk_inner.json"
out = Path(sys.argv[1]) if len(sys.argv) > 1 else default_out

code = SerialCode(outer_code(), Interleaver.linear(DESK_K),
                  random_model(DESK_DEPTHS, DESK_KERNELS, INIT_SEED))
windows = (DESK_WINDOW, DESK_WINDOW)


def log(h):
    if h["update"] % 50 == 0:
        print(f"update {h['update']:4d}  loss {h['loss']:.4f}  |grad| {h['grad_norm']:.3f}")


result = train_inner_from_scratch(code, windows, RECIPE, DESK_DEPTHS, DESK_KERNELS,
                                  INIT_SEED, log=log)
save_weights(result.model, out)
print("wrote", out)

trained = code.with_model(result.model)
for snr in (1.0, 2.0, 3.0):
    v = validate(trained, windows, snr, iterations=6, blocks=2000)
    print(f"Eb/N0 {snr:.1f} dB: BCE {v['bce']:.4f}  BLER {v['bler']:.4f}")
