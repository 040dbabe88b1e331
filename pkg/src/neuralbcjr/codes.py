"""Encoders, interleavers, power normalization and single-parity-check helpers.

Bits are bipolar throughout: F2 ``0`` maps to ``+1`` and ``1`` maps to ``-1``,
so XOR becomes a product.

Block encoders share one calling convention: ``encoder(v)`` takes a batch of
blocks shaped ``(B, N, in_depth)`` and returns ``(B, N, out_depth)``.  All
encoders are tail-biting (circular) in the positional axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives arrays of the wrong shape or content."""


class DegenerateInputError(ValueError):
    """Raised when an input has no usable content (e.g. zero power)."""


def bits_to_bipolar(bits):
    return 1.0 - 2.0 * np.asarray(bits, dtype=float)


def bipolar_to_bits(x):
    return (np.asarray(x) < 0).astype(np.int8)


def as_bipolar(x):
    """Validate a bipolar block and return it as a float array.

    Every entry must be exactly +1 or -1.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or arr.size == 0:
        raise InvalidInputError("block must have at least one position")
    if not np.all(np.abs(arr) == 1.0):
        raise InvalidInputError("bipolar block entries must be +1 or -1")
    return arr


def random_bipolar(rng, shape):
    return 1.0 - 2.0 * rng.integers(0, 2, size=shape).astype(float)


class BlockEncoder:
    """Base class for finite-window tail-biting encoders.

    Subclasses set ``in_depth``, ``out_depth`` and ``window``; ``window`` is the
    inclusive ``(lo, hi)`` range of input offsets, relative to an output
    position, that may influence that output.
    """

    in_depth: int = 1
    out_depth: int = 1
    window: tuple[int, int] = (0, 0)

    @property
    def span(self) -> int:
        lo, hi = self.window
        return hi - lo + 1

    def __call__(self, v):
        raise NotImplementedError

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim != 3 or v.shape[2] != self.in_depth:
            raise InvalidInputError(
                f"expected (B, N, {self.in_depth}) input, got {v.shape}"
            )
        return v


@dataclass(frozen=True)
class PolynomialEncoder(BlockEncoder):
    """Tail-biting feed-forward convolutional encoder over F2.

    Output position ``i`` is the XOR of inputs ``(i + e) mod N`` for every tap
    offset ``e``.  ``taps=(-2, 0, 1)`` is the generator ``Z^-2 + 1 + Z``.
    """

    taps: tuple[int, ...]

    def __post_init__(self):
        taps = tuple(sorted(set(int(t) for t in self.taps)))
        if not taps:
            raise InvalidInputError("polynomial needs at least one tap")
        object.__setattr__(self, "taps", taps)

    @property
    def window(self):
        return (self.taps[0], self.taps[-1])

    def encode(self, u):
        """Encode along the last axis of ``u`` (shape ``(..., N)``)."""
        u = np.asarray(u, dtype=float)
        n = u.shape[-1]
        if abs(self.taps[0]) + abs(self.taps[-1]) >= n:
            raise InvalidInputError(
                f"block length {n} too short for taps {self.taps}"
            )
        out = np.ones_like(u)
        for e in self.taps:
            # out[i] *= u[(i + e) mod N]
            out = out * np.roll(u, -e, axis=-1)
        return out

    def __call__(self, v):
        v = self._check(v)
        return self.encode(v[:, :, 0])[:, :, None]


def polynomial_encode(enc: PolynomialEncoder, u):
    u = np.asarray(u, dtype=float)
    if u.ndim != 1:
        raise InvalidInputError("polynomial_encode expects a single-depth block")
    return enc.encode(u)


class MultiStreamEncoder(BlockEncoder):
    """Stack the outputs of several encoders that read the same input."""

    def __init__(self, streams):
        self.streams = tuple(streams)
        if not self.streams:
            raise InvalidInputError("need at least one stream")
        depths = {s.in_depth for s in self.streams}
        if len(depths) != 1:
            raise InvalidInputError("streams disagree on input depth")
        self.in_depth = depths.pop()
        self.out_depth = sum(s.out_depth for s in self.streams)
        self.window = (
            min(s.window[0] for s in self.streams),
            max(s.window[1] for s in self.streams),
        )

    def __call__(self, v):
        v = self._check(v)
        return np.concatenate([s(v) for s in self.streams], axis=2)


@dataclass(frozen=True, eq=False)
class TableEncoder(BlockEncoder):
    """Encoder defined by a lookup table over a window of input bits.

    Bit ``k`` of the table index corresponds to ``window_offsets[k]``; a set
    bit means the input there is ``-1``.  ``outputs`` has shape
    ``(2**len(window_offsets), depth)``.
    """

    window_offsets: tuple[int, ...]
    outputs: np.ndarray = field(repr=False)

    def __post_init__(self):
        offs = tuple(int(o) for o in self.window_offsets)
        if not offs or any(b <= a for a, b in zip(offs, offs[1:])):
            raise InvalidInputError("window offsets must be strictly increasing")
        table = np.asarray(self.outputs, dtype=float)
        if table.ndim == 1:
            table = table[:, None]
        if table.shape[0] != 2 ** len(offs):
            raise InvalidInputError(
                f"table needs {2 ** len(offs)} rows, got {table.shape[0]}"
            )
        object.__setattr__(self, "window_offsets", offs)
        object.__setattr__(self, "outputs", table)

    @property
    def depth(self):
        return self.outputs.shape[1]

    @property
    def out_depth(self):
        return self.outputs.shape[1]

    @property
    def window(self):
        return (self.window_offsets[0], self.window_offsets[-1])

    def __call__(self, v):
        v = self._check(v)
        n = v.shape[1]
        if self.span > n:
            raise InvalidInputError("block shorter than table window")
        bits = v[:, :, 0] < 0
        idx = np.zeros(bits.shape, dtype=np.int64)
        for k, e in enumerate(self.window_offsets):
            idx |= np.roll(bits, -e, axis=1).astype(np.int64) << k
        return self.outputs[idx]


@dataclass(frozen=True, eq=False)
class Interleaver:
    """Permutation of block positions; ``out[perm[i]] = in[i]``."""

    permutation: np.ndarray = field(repr=False)
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise InvalidInputError("interleaver permutation must be a bijection")
        perm.setflags(write=False)
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "_inverse", np.argsort(perm))

    def __len__(self):
        return self.permutation.size

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n), "identity", {})

    @classmethod
    def linear(cls, n, a=None, b=0):
        """``pi(i) = (a*i + b) mod n``; default ``a`` is the largest integer
        below ``n/2`` that is coprime with ``n``."""
        if a is None:
            a = default_linear_multiplier(n)
        if math.gcd(a, n) != 1:
            raise InvalidInputError(f"multiplier {a} not coprime with {n}")
        perm = (a * np.arange(n) + b) % n
        return cls(perm, "linear", {"a": int(a), "b": int(b)})

    @classmethod
    def random(cls, n, seed):
        perm = np.random.default_rng(seed).permutation(n)
        return cls(perm, "random", {"seed": int(seed)})

    def _check(self, x, axis):
        x = np.asarray(x)
        if x.shape[axis] != self.permutation.size:
            raise InvalidInputError(
                f"length {x.shape[axis]} does not match interleaver "
                f"length {self.permutation.size}"
            )
        return x

    def interleave(self, x, axis=0):
        x = self._check(x, axis)
        # out[perm[i]] = x[i]  <=>  out = x[inverse]
        return np.take(x, self._inverse, axis=axis)

    def deinterleave(self, x, axis=0):
        x = self._check(x, axis)
        return np.take(x, self.permutation, axis=axis)

    def to_dict(self):
        d = {"kind": self.kind, "length": len(self), **self.params}
        if self.kind == "custom":
            d["permutation"] = self.permutation.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind")
        n = int(d["length"])
        if kind == "linear":
            return cls.linear(n, d.get("a"), d.get("b", 0))
        if kind == "random":
            return cls.random(n, d["seed"])
        if kind == "identity":
            return cls.identity(n)
        if kind == "custom":
            return cls(np.asarray(d["permutation"]), "custom", {})
        raise InvalidInputError(f"unknown interleaver kind {kind!r}")


def default_linear_multiplier(n):
    for a in range(math.ceil(n / 2) - 1, 0, -1):
        if math.gcd(a, n) == 1:
            return a
    return 1


def interleave(iv: Interleaver, x, axis=0):
    return iv.interleave(x, axis=axis)


def deinterleave(iv: Interleaver, x, axis=0):
    return iv.deinterleave(x, axis=axis)


def normalize_power(x, axes=None):
    """Scale ``x`` to unit mean-square power.

    ``axes`` selects the axes averaged per block; ``None`` treats the whole
    array as one block.  Batched ``(B, N, F)`` symbols use ``axes=(1, 2)``.
    """
    x = np.asarray(x, dtype=float)
    p = np.mean(x * x, axis=axes, keepdims=True)
    if np.any(p == 0):
        raise DegenerateInputError("cannot normalize an all-zero block")
    return x / np.sqrt(p)


def normalize_power_backward(x, grad, axes=None):
    """Vector-Jacobian product of :func:`normalize_power`."""
    x = np.asarray(x, dtype=float)
    count = x.size if axes is None else np.prod([x.shape[a] for a in axes])
    p = np.mean(x * x, axis=axes, keepdims=True)
    dot = np.sum(grad * x, axis=axes, keepdims=True)
    return grad / np.sqrt(p) - x * dot / (count * p ** 1.5)


def spc_encode(u_info):
    """Append a parity bit so each block has even F2 weight (last axis)."""
    u_info = np.asarray(u_info, dtype=float)
    parity = np.prod(u_info, axis=-1, keepdims=True)
    return np.concatenate([u_info, parity], axis=-1)


def spc_correct(llrs):
    """Hard-decide LLRs and flip the least reliable bit on a parity failure.

    Works on the last axis; ties in reliability go to the lowest index.
    """
    llrs = np.asarray(llrs, dtype=float)
    if llrs.shape[-1] < 2:
        raise InvalidInputError("single-parity correction needs k >= 2")
    dec = np.where(llrs >= 0, 1.0, -1.0)
    bad = np.prod(dec, axis=-1) < 0
    if np.any(bad):
        weakest = np.argmin(np.abs(llrs), axis=-1)
        flat = dec.reshape(-1, dec.shape[-1])
        rows = np.flatnonzero(bad.reshape(-1))
        flat[rows, weakest.reshape(-1)[rows]] *= -1
    return dec


def rate_shift_db(k):
    """SNR shift caused by spending one of ``k`` bits on parity."""
    return 10.0 * math.log10((k - 1) / k)


# Encoder spec files -------------------------------------------------------

SPEC_FORMAT = "neuralbcjr-encoder"
SPEC_VERSION = 1


def encoder_to_dict(enc):
    if isinstance(enc, PolynomialEncoder):
        return {"type": "polynomial", "taps": list(enc.taps)}
    if isinstance(enc, MultiStreamEncoder):
        return {"type": "multistream", "streams": [encoder_to_dict(s) for s in enc.streams]}
    if isinstance(enc, TableEncoder):
        return {
            "type": "table",
            "window_offsets": list(enc.window_offsets),
            "outputs": enc.outputs.tolist(),
        }
    raise InvalidInputError(f"cannot serialize {type(enc).__name__}")


def encoder_from_dict(d):
    kind = d.get("type")
    if kind == "polynomial":
        return PolynomialEncoder(tuple(d["taps"]))
    if kind == "multistream":
        return MultiStreamEncoder([encoder_from_dict(s) for s in d["streams"]])
    if kind == "table":
        return TableEncoder(tuple(d["window_offsets"]), np.asarray(d["outputs"]))
    raise InvalidInputError(f"unknown encoder type {kind!r}")


def save_code_spec(path, encoder=None, interleaver=None):
    doc = {"format": SPEC_FORMAT, "version": SPEC_VERSION}
    if encoder is not None:
        doc["encoder"] = encoder_to_dict(encoder)
    if interleaver is not None:
        doc["interleaver"] = interleaver.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_code_spec(path):
    """Return ``(encoder, interleaver)`` from a spec file; missing parts are None."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if doc.get("format") != SPEC_FORMAT:
        raise InvalidInputError(f"{path}: not an encoder spec file")
    if doc.get("version") != SPEC_VERSION:
        raise InvalidInputError(f"{path}: unsupported version {doc.get('version')}")
    enc = encoder_from_dict(doc["encoder"]) if "encoder" in doc else None
    iv = Interleaver.from_dict(doc["interleaver"]) if "interleaver" in doc else None
    return enc, iv


def analysis_window(encoder):
    """Receptive window of ``encoder`` widened to contain offset 0."""
    lo, hi = encoder.window
    return min(lo, 0), max(hi, 0)


def window_bits(indices, width):
    """Bipolar windows for integer indices; bit ``q`` is window slot ``q``."""
    indices = np.asarray(indices, dtype=np.int64)
    bits = (indices[:, None] >> np.arange(width)) & 1
    return 1.0 - 2.0 * bits


def evaluate_windows(encoder, windows, chunk=1 << 16):
    """Evaluate ``encoder`` at one output position for many input windows.

    ``windows`` has shape ``(M, R, in_depth)`` where slot ``q`` holds the
    input at offset ``lo + q`` of :func:`analysis_window`.  Each window is
    placed in a circular block of length ``R`` so the output position sees
    every slot exactly once.  Returns ``(M, out_depth)``.
    """
    windows = np.asarray(windows, dtype=float)
    lo, _ = analysis_window(encoder)
    pos = -lo
    out = np.empty((windows.shape[0], encoder.out_depth))
    for s in range(0, windows.shape[0], chunk):
        out[s : s + chunk] = encoder(windows[s : s + chunk])[:, pos, :]
    return out
