"""Trellises for finite-window tail-biting encoders.

A trellis with memory ``m`` covers the input window ``[lo, lo + m]`` relative
to an output position.  Transition ``w`` (``0 <= w < 2**(m+1)``) encodes that
window: bit ``q`` of ``w`` is set when the input at offset ``lo + q`` is -1.
At trellis step ``t`` the state holds the inputs at ``t+lo .. t+lo+m-1``, the
newest input bit is ``u[t + hi]`` and the transition emits output position
``t``.  Hence

    from_state(w) = w & (2**m - 1),   to_state(w) = w >> 1,   input(w) = bit m,

and ``hi`` is the alignment offset between steps and input-bit indices.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .analysis import MemoryProfile
from .codes import (
    InvalidInputError,
    MultiStreamEncoder,
    PolynomialEncoder,
    TableEncoder,
    analysis_window,
    evaluate_windows,
    random_bipolar,
    window_bits,
)

MAX_MEMORY = 12
AVERAGING_CAP = 14
AVERAGING_SAMPLES = 256
TRELLIS_FORMAT_VERSION = 1


class TrellisTooLargeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trellis:
    memory: int
    lo: int
    outputs: np.ndarray = field(repr=False)  # (2**(m+1), F)
    binary: bool = False

    def __post_init__(self):
        out = np.array(self.outputs, dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape[0] != 2 ** (self.memory + 1):
            raise InvalidInputError(
                f"memory {self.memory} needs {2 ** (self.memory + 1)} transitions"
            )
        if self.binary and not np.all(np.abs(out) == 1.0):
            raise InvalidInputError("binary trellis outputs must be +-1")
        out.setflags(write=False)
        object.__setattr__(self, "outputs", out)

    @property
    def hi(self):
        return self.lo + self.memory

    @property
    def alignment(self):
        return self.hi

    @property
    def n_states(self):
        return 2 ** self.memory

    @property
    def n_transitions(self):
        return 2 ** (self.memory + 1)

    @property
    def depth(self):
        return self.outputs.shape[1]

    @property
    def from_state(self):
        return np.arange(self.n_transitions) & (self.n_states - 1)

    @property
    def to_state(self):
        return np.arange(self.n_transitions) >> 1

    @property
    def input_bit(self):
        """Bipolar input bit of every transition."""
        return 1.0 - 2.0 * (np.arange(self.n_transitions) >> self.memory)

    def window_indices(self, v):
        """Transition index at every position of bipolar blocks ``(B, N)``."""
        bits = np.asarray(v) < 0
        idx = np.zeros(bits.shape, dtype=np.int64)
        for q in range(self.memory + 1):
            idx |= np.roll(bits, -(self.lo + q), axis=-1).astype(np.int64) << q
        return idx

    def encode(self, v):
        """Output symbols ``(B, N, F)`` obtained by walking the trellis."""
        return self.outputs[self.window_indices(v)]

    def with_outputs(self, outputs):
        return Trellis(self.memory, self.lo, outputs, self.binary)


def _check_memory(m, max_memory):
    if m > max_memory:
        raise TrellisTooLargeError(
            f"memory {m} means {2 ** m} states, above the limit of {2 ** max_memory}"
        )


def build_from_polynomial(enc, max_memory=MAX_MEMORY) -> Trellis:
    """Exact trellis for a polynomial encoder or a stack of them (joint code)."""
    streams = enc.streams if isinstance(enc, MultiStreamEncoder) else (enc,)
    if not all(isinstance(s, PolynomialEncoder) for s in streams):
        raise InvalidInputError("build_from_polynomial needs polynomial streams")
    lo = min(s.taps[0] for s in streams)
    hi = max(s.taps[-1] for s in streams)
    m = hi - lo
    _check_memory(m, max_memory)
    w = np.arange(2 ** (m + 1))
    outputs = np.empty((w.size, len(streams)))
    for f, s in enumerate(streams):
        parity = np.zeros(w.size, dtype=np.int64)
        for e in s.taps:
            parity ^= (w >> (e - lo)) & 1
        outputs[:, f] = 1.0 - 2.0 * parity
    return Trellis(m, lo, outputs, binary=True)


def build_from_table(enc: TableEncoder, max_memory=MAX_MEMORY) -> Trellis:
    lo, hi = enc.window
    m = hi - lo
    _check_memory(m, max_memory)
    w = np.arange(2 ** (m + 1))
    idx = np.zeros(w.size, dtype=np.int64)
    for k, e in enumerate(enc.window_offsets):
        idx |= ((w >> (e - lo)) & 1) << k
    out = enc.outputs[idx]
    return Trellis(m, lo, out, binary=bool(np.all(np.abs(out) == 1.0)))


def build_from_cnn(encoder, profile, averaging="auto", count=AVERAGING_SAMPLES,
                   seed=0, cap=AVERAGING_CAP, max_memory=MAX_MEMORY,
                   scale=1.0) -> Trellis:
    """Pruned trellis for a single-input encoder with symbol averaging.

    ``profile`` is a :class:`MemoryProfile` or an inclusive ``(lo, hi)``
    window J.  Each transition fixes the inputs in J; the output is averaged
    over the remaining receptive-window positions, exhaustively when there are
    at most ``cap`` of them (or ``averaging="exact"`` is forced), otherwise over
    ``count`` seeded random assignments shared by all transitions.
    """
    if encoder.in_depth != 1:
        raise InvalidInputError("split multi-stream encoders before building trellises")
    j_lo, j_hi = profile.contributing if isinstance(profile, MemoryProfile) else profile
    r_lo, r_hi = analysis_window(encoder)
    if j_lo < r_lo or j_hi > r_hi or j_hi < j_lo:
        raise InvalidInputError(f"window {(j_lo, j_hi)} outside receptive field")
    m = j_hi - j_lo
    _check_memory(m, max_memory)
    r = r_hi - r_lo + 1
    in_j = np.arange(j_lo - r_lo, j_hi - r_lo + 1)
    out_j = np.setdiff1d(np.arange(r), in_j)
    n_free = out_j.size
    if averaging == "exact" or (averaging == "auto" and n_free <= cap):
        if n_free > max(cap, 20):
            raise TrellisTooLargeError(f"exact averaging over 2**{n_free} assignments")
        assign = window_bits(np.arange(2 ** n_free), n_free)
    elif averaging in ("sampled", "auto"):
        assign = random_bipolar(np.random.default_rng(seed), (count, n_free))
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    n_w = 2 ** (m + 1)
    a = assign.shape[0]
    windows = np.empty((n_w, a, r))
    windows[:, :, in_j] = window_bits(np.arange(n_w), m + 1)[:, None, :]
    windows[:, :, out_j] = assign[None, :, :]
    f = evaluate_windows(encoder, windows.reshape(n_w * a, r, 1))
    outputs = scale * f.reshape(n_w, a, -1).mean(axis=1)
    return Trellis(m, j_lo, outputs, binary=False)


@dataclass(frozen=True)
class FidelityReport:
    rms: float
    max_abs: float
    symbols: int


def trellis_fidelity(encoder, trellis: Trellis, trials=1000, seed=0,
                     block_length=None) -> FidelityReport:
    """Compare true encoder outputs with trellis symbols on random inputs."""
    r_lo, r_hi = analysis_window(encoder)
    span = max(r_hi, trellis.hi) - min(r_lo, trellis.lo) + 1
    n = block_length or max(2 * span, 8)
    v = random_bipolar(np.random.default_rng(seed), (trials, n, 1))
    truth = encoder(v)
    approx = trellis.encode(v[:, :, 0])
    err = truth - approx
    return FidelityReport(
        float(np.sqrt(np.mean(err ** 2))), float(np.max(np.abs(err))), err.size
    )


# Serialization -----------------------------------------------------------


def save_trellis(trellis: Trellis, path):
    """Versioned binary container (numpy ``.npz``)."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.int64(TRELLIS_FORMAT_VERSION),
            memory=np.int64(trellis.memory),
            lo=np.int64(trellis.lo),
            binary=np.bool_(trellis.binary),
            n_states=np.int64(trellis.n_states),
            from_state=trellis.from_state,
            to_state=trellis.to_state,
            input_bit=trellis.input_bit,
            outputs=trellis.outputs,
        )


def load_trellis(path) -> Trellis:
    try:
        with np.load(path, allow_pickle=False) as z:
            if int(z["format_version"]) != TRELLIS_FORMAT_VERSION:
                raise InvalidInputError(
                    f"unsupported trellis format {int(z['format_version'])}"
                )
            t = Trellis(int(z["memory"]), int(z["lo"]), z["outputs"], bool(z["binary"]))
            consistent = (
                int(z["n_states"]) == t.n_states
                and np.array_equal(z["from_state"], t.from_state)
                and np.array_equal(z["to_state"], t.to_state)
                and np.array_equal(z["input_bit"], t.input_bit)
            )
    except (KeyError, ValueError, OSError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"{path}: not a trellis file ({exc})") from exc
    if not consistent:
        raise InvalidInputError(f"{path}: transition table is not shift-and-insert")
    return t


def dump_text(trellis: Trellis) -> str:
    buf = io.StringIO()
    buf.write(
        f"# trellis memory={trellis.memory} states={trellis.n_states} "
        f"window=[{trellis.lo},{trellis.hi}] alignment={trellis.alignment} "
        f"binary={int(trellis.binary)}\n"
    )
    buf.write("# transition from to input outputs...\n")
    for w in range(trellis.n_transitions):
        outs = " ".join(f"{x:+.17g}" for x in trellis.outputs[w])
        buf.write(
            f"{w} {trellis.from_state[w]} {trellis.to_state[w]} "
            f"{int(trellis.input_bit[w]):+d} {outs}\n"
        )
    return buf.getvalue()
