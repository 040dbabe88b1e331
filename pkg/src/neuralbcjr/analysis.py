"""Effective-memory estimation for black-box encoders.

Two per-offset sensitivity measures are provided.  ``grad_energy`` averages
squared input gradients over random bipolar inputs; it is cheap but only
describes the encoder around its inputs.  ``flip_energy`` averages the squared
output change caused by flipping one input bit, which is the quantity that
matters when positions are dropped from a trellis.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .codes import (
    BlockEncoder,
    analysis_window,
    evaluate_windows,
    random_bipolar,
    window_bits,
)

DEFAULT_THRESHOLD = 2e-2
EXACT_CAP = 20
DEFAULT_SAMPLES = 1 << 14
DEFAULT_BATCH = 1000


@dataclass(frozen=True, eq=False)
class EnergyProfile:
    """Per-offset energies; ``raw`` is ``(R,)`` or ``(out_depth, R)``."""

    offsets: np.ndarray
    raw: np.ndarray
    kind: str
    stderr: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def normalized(self):
        peak = np.max(self.raw)
        return self.raw / peak if peak > 0 else np.zeros_like(self.raw)

    def combined(self):
        """Max over output depths, normalized to a peak of one."""
        e = self.normalized
        return e if e.ndim == 1 else e.max(axis=0)


@dataclass(frozen=True, eq=False)
class MemoryProfile:
    offsets: np.ndarray
    flip_values: np.ndarray
    grad_values: np.ndarray | None
    threshold: float
    contributing: tuple[int, int]  # inclusive (lo, hi) of J
    memoryless: bool = False

    @property
    def memory(self) -> int:
        return self.contributing[1] - self.contributing[0]

    @property
    def complement(self):
        lo, hi = self.contributing
        return [int(j) for j in self.offsets if j < lo or j > hi]

    @property
    def bpsk_like(self) -> bool:
        """True when only a single position contributes (a scaled BPSK map)."""
        return self.memory == 0

    @property
    def n_states(self) -> int:
        return 2 ** self.memory


def _require_single_input(encoder):
    if encoder.in_depth != 1:
        raise ValueError(
            "memory analysis needs a single input stream; split the encoder first"
        )


def grad_energy(encoder, out_depth=0, batch_size=DEFAULT_BATCH, seed=0):
    """Average squared input gradient per offset (approximation only).

    ``encoder`` must provide ``input_gradient(v, out_pos, out_depth)``.
    Inputs are uniform random bipolar blocks.  A second output position is
    checked on a circularly shifted copy of the batch; a mismatch triggers a
    warning because the single-position shortcut assumes shift equivariance.
    """
    _require_single_input(encoder)
    lo, hi = analysis_window(encoder)
    r = hi - lo + 1
    pos = -lo
    rng = np.random.default_rng(seed)
    v = random_bipolar(rng, (batch_size, r, 1))
    g = encoder.input_gradient(v, pos, out_depth)[:, :, 0]
    idx = (pos + np.arange(lo, hi + 1)) % r
    raw = np.mean(g[:, idx] ** 2, axis=0)

    g2 = encoder.input_gradient(np.roll(v, 1, axis=1), (pos + 1) % r, out_depth)[:, :, 0]
    raw2 = np.mean(g2[:, (idx + 1) % r] ** 2, axis=0)
    if not np.allclose(raw, raw2, rtol=1e-9, atol=1e-12):
        warnings.warn("gradient energy differs between output positions", stacklevel=2)
    return EnergyProfile(
        np.arange(lo, hi + 1),
        raw,
        "grad",
        meta={"batch_size": batch_size, "seed": seed, "distribution": "uniform bipolar"},
    )


def flip_energy(encoder, out_depth=0, mode="exact", count=DEFAULT_SAMPLES, seed=0,
                cap=EXACT_CAP):
    """Expected squared output change per single-bit input flip.

    ``mode="exact"`` enumerates all ``2**R`` windows; ``mode="sampled"``
    draws ``count`` random windows and also reports a standard error.
    ``out_depth=None`` returns energies for every output depth.
    """
    _require_single_input(encoder)
    lo, hi = analysis_window(encoder)
    r = hi - lo + 1
    depths = slice(None) if out_depth is None else out_depth
    if mode == "exact":
        if r > cap:
            raise ValueError(
                f"exact enumeration needs 2**{r} windows (cap {cap}); use mode='sampled'"
            )
        idx = np.arange(2 ** r)
        f = evaluate_windows(encoder, window_bits(idx, r)[:, :, None])[:, depths]
        raw = np.stack(
            [np.mean((f - f[idx ^ (1 << q)]) ** 2, axis=0) / 4.0 for q in range(r)],
            axis=-1,
        )
        stderr = None
        meta = {"mode": "exact", "windows": 2 ** r}
    elif mode == "sampled":
        rng = np.random.default_rng(seed)
        v = random_bipolar(rng, (count, r, 1))
        f0 = evaluate_windows(encoder, v)[:, depths]
        terms = []
        for q in range(r):
            vq = v.copy()
            vq[:, q] *= -1
            terms.append((f0 - evaluate_windows(encoder, vq)[:, depths]) ** 2 / 4.0)
        terms = np.stack(terms, axis=-1)  # (count, [D,] R)
        raw = terms.mean(axis=0)
        stderr = terms.std(axis=0, ddof=1) / np.sqrt(count)
        meta = {"mode": "sampled", "count": count, "seed": seed}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return EnergyProfile(np.arange(lo, hi + 1), raw, "flip", stderr, meta)


def estimate_memory(flip: EnergyProfile, threshold=DEFAULT_THRESHOLD,
                    grad: EnergyProfile | None = None) -> MemoryProfile:
    """Threshold peak-normalized flip energies into a contiguous window J.

    Multi-depth profiles use the maximum over depths.  When no offset exceeds
    the threshold the profile is memoryless with ``J = {0}``.
    """
    e = flip.combined()
    above = np.flatnonzero(e > threshold)
    grad_values = None if grad is None else grad.combined()
    if above.size == 0:
        return MemoryProfile(flip.offsets, e, grad_values, threshold, (0, 0), memoryless=True)
    lo = int(flip.offsets[above[0]])
    hi = int(flip.offsets[above[-1]])
    return MemoryProfile(flip.offsets, e, grad_values, threshold, (lo, hi))


def select_window(flip: EnergyProfile, memory: int):
    """Contiguous window of ``memory + 1`` offsets holding the most flip energy."""
    e = flip.combined()
    width = memory + 1
    if width > e.size:
        raise ValueError("requested memory exceeds the receptive window")
    sums = np.convolve(e, np.ones(width), mode="valid")
    start = int(np.argmax(sums))
    return int(flip.offsets[start]), int(flip.offsets[start + memory])


def detect_frozen_outputs(encoder, trials=4096, seed=0, cap=EXACT_CAP):
    """Classify each output depth as ``frozen@+1``, ``frozen@-1`` or ``active``.

    Enumerates every input window when the window is small enough, otherwise
    samples ``trials`` random windows.
    """
    lo, hi = analysis_window(encoder)
    r = hi - lo + 1
    if encoder.in_depth * r <= cap:
        n_bits = encoder.in_depth * r
        bits = window_bits(np.arange(2 ** n_bits), n_bits)
        v = bits.reshape(-1, encoder.in_depth, r).transpose(0, 2, 1)
    else:
        v = random_bipolar(np.random.default_rng(seed), (trials, r, encoder.in_depth))
    signs = np.where(evaluate_windows(encoder, v) >= 0, 1, -1)
    status = []
    for d in range(signs.shape[1]):
        col = signs[:, d]
        if np.all(col == 1):
            status.append("frozen@+1")
        elif np.all(col == -1):
            status.append("frozen@-1")
        else:
            status.append("active")
    return status


def active_streams(status):
    return [d for d, s in enumerate(status) if s == "active"]


class StreamEncoder(BlockEncoder):
    """One input stream of a multi-stream encoder, other streams held fixed.

    ``StreamEncoder(f, 0)`` maps ``c0`` to ``f([c0, 1])[:, :, 0]``.
    """

    def __init__(self, base, stream, fixed_value=1.0, output=None):
        self.base = base
        self.stream = stream
        self.output = stream if output is None else output
        self.fixed_value = fixed_value
        self.in_depth = 1
        self.out_depth = 1
        self.window = base.window

    def _embed(self, v):
        v = self._check(v)
        full = np.full(v.shape[:2] + (self.base.in_depth,), self.fixed_value)
        full[:, :, self.stream] = v[:, :, 0]
        return full

    def __call__(self, v):
        return self.base(self._embed(v))[:, :, [self.output]]

    def input_gradient(self, v, out_pos, out_depth=0):
        g = self.base.input_gradient(self._embed(v), out_pos, self.output)
        return g[:, :, [self.stream]]


def split_inner_streams(encoder, fixed_value=1.0):
    """Split a two-stream inner encoder into two single-stream encoders."""
    if encoder.in_depth != 2 or encoder.out_depth != 2:
        raise ValueError("stream splitting expects a 2-in/2-out encoder")
    return StreamEncoder(encoder, 0, fixed_value), StreamEncoder(encoder, 1, fixed_value)


def split_discrepancy(encoder, streams=None, trials=4096, seed=0, cap=EXACT_CAP):
    """Max absolute gap between the split encoders and the joint encoder.

    Zero for separable encoders.  Enumerates all joint windows when
    ``2 * R <= cap``.
    """
    if streams is None:
        streams = split_inner_streams(encoder)
    lo, hi = analysis_window(encoder)
    r = hi - lo + 1
    depth = encoder.in_depth
    if depth * r <= cap:
        bits = window_bits(np.arange(2 ** (depth * r)), depth * r)
        v = bits.reshape(-1, depth, r).transpose(0, 2, 1)
    else:
        v = random_bipolar(np.random.default_rng(seed), (trials, r, depth))
    joint = evaluate_windows(encoder, v)
    split = np.concatenate(
        [evaluate_windows(s, v[:, :, [s.stream]]) for s in streams], axis=1
    )
    return float(np.max(np.abs(joint - split)))


def profile_to_csv(profile: MemoryProfile, path):
    """Write ``offset, grad_energy, flip_energy, above_threshold, in_window`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["offset", "grad_energy", "flip_energy", "above_threshold", "in_window"])
        lo, hi = profile.contributing
        for i, j in enumerate(profile.offsets):
            eg = "" if profile.grad_values is None else repr(float(profile.grad_values[i]))
            w.writerow([
                int(j), eg, repr(float(profile.flip_values[i])),
                int(profile.flip_values[i] > profile.threshold), int(lo <= j <= hi),
            ])
