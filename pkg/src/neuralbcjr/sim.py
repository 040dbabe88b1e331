"""AWGN channel and Monte-Carlo BER/BLER estimation.

Noise for SNR point ``i`` and batch ``j`` is drawn from
``np.random.default_rng([seed, i, j])``, so every batch has its own
reproducible stream and results do not depend on how batches are scheduled.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .codes import rate_shift_db, spc_correct, spc_encode

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "schema", "variant", "ebn0_db", "esn0_db", "sigma2", "blocks", "bits",
    "bit_errors", "block_errors", "ber", "bler", "bler_lo", "bler_hi",
    "single_bit_fraction", "rate", "rate_shift_db", "snr_convention", "seed",
    "config_hash",
)
Z95 = 1.959963984540054


# Channel -------------------------------------------------------------------


def awgn(x, sigma2, seed=None, rng=None, noiseless=False):
    """``y = x + n`` with i.i.d. ``N(0, sigma2)`` noise."""
    x = np.asarray(x, dtype=float)
    if noiseless:
        return x.copy()
    if not sigma2 > 0:
        raise ValueError("noise variance must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    return x + math.sqrt(sigma2) * rng.standard_normal(x.shape)


def block_rng(seed, snr_index, batch_index):
    return np.random.default_rng([seed, snr_index, batch_index])


def snr_to_sigma2(ebn0_db, rate):
    """Noise variance for unit-power real symbols at a given Eb/N0 (dB)."""
    if not 0 < rate <= 1:
        raise ValueError("rate must lie in (0, 1]")
    return 1.0 / (2.0 * rate * 10.0 ** (np.asarray(ebn0_db, dtype=float) / 10.0))


def esn0_to_sigma2(esn0_db):
    return 1.0 / (2.0 * 10.0 ** (np.asarray(esn0_db, dtype=float) / 10.0))


def ebn0_to_esn0(ebn0_db, rate):
    return np.asarray(ebn0_db, dtype=float) + 10.0 * np.log10(rate)


def qfunc(x):
    """Gaussian tail probability ``P(N(0,1) > x)``."""
    return 0.5 * np.vectorize(math.erfc)(np.asarray(x, dtype=float) / math.sqrt(2.0))


def wilson_interval(successes, trials, z=Z95):
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return lo, hi


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# Links -----------------------------------------------------------------------


class Link:
    """Transmitter/receiver pair driven by the simulator.

    Subclasses set ``k`` (bits per block) and ``rate`` and implement
    ``encode(u)`` and ``decode(y, sigma2)``; the latter returns a dict that
    maps variant names to bipolar decisions ``(B, k)``.
    """

    k: int
    rate: float
    variants: tuple = ("plain",)

    def sample(self, rng, batch):
        return np.where(rng.random((batch, self.k)) < 0.5, 1.0, -1.0)

    def encode(self, u):
        raise NotImplementedError

    def decode(self, y, sigma2):
        raise NotImplementedError

    def describe(self):
        return {"link": type(self).__name__, "k": self.k, "rate": self.rate}


class UncodedLink(Link):
    def __init__(self, k=64):
        self.k, self.rate = k, 1.0

    def encode(self, u):
        return u

    def decode(self, y, sigma2):
        return {"plain": np.where(y >= 0, 1.0, -1.0)}


class RepetitionLink(Link):
    """Each bit sent ``reps`` times; ML decision on the sum."""

    def __init__(self, k=64, reps=2):
        self.k, self.reps, self.rate = k, reps, 1.0 / reps

    def encode(self, u):
        return np.repeat(u[:, :, None], self.reps, axis=2)

    def decode(self, y, sigma2):
        return {"plain": np.where(y.sum(axis=2) >= 0, 1.0, -1.0)}

    def describe(self):
        return {**super().describe(), "reps": self.reps}


class TurboLink(Link):
    """Serial code with a turbo receiver; optional single-parity variant.

    With ``spc=True`` the last of the ``k`` bits is a parity bit and the link
    reports ``"plain"`` (sign decisions) and ``"spc"`` (least-reliable-bit
    flip) on the same decoder output, which makes the comparison paired.
    """

    def __init__(self, receiver, iterations=None, spc=False):
        self.receiver = receiver
        self.code = receiver.code
        self.k = self.code.k
        self.rate = self.code.rate
        self.iterations = iterations
        self.spc = spc
        self.variants = ("plain", "spc") if spc else ("plain",)

    def sample(self, rng, batch):
        u = super().sample(rng, batch)
        return spc_encode(u[:, :-1]) if self.spc else u

    def encode(self, u):
        return self.code.encode(u)

    def llrs(self, y, sigma2):
        from .turbo import turbo_decode

        cfg = self.receiver.turbo_config(sigma2, self.iterations)
        return turbo_decode(cfg, self.receiver.trellises, y)[0]

    def decode(self, y, sigma2):
        llr = self.llrs(y, sigma2)
        out = {"plain": np.where(llr >= 0, 1.0, -1.0)}
        if self.spc:
            out["spc"] = spc_correct(llr)
        return out

    def describe(self):
        rc = self.receiver.config
        return {
            **super().describe(),
            "iterations": self.iterations or rc.iterations,
            "mode": rc.mode,
            "wrap": rc.wrap,
            "windows": [list(w) for w in self.receiver.windows],
            "spc": self.spc,
        }


# Monte Carlo -----------------------------------------------------------------


@dataclass
class SnrPoint:
    variant: str
    ebn0_db: float
    sigma2: float
    blocks: int = 0
    bits: int = 0
    bit_errors: int = 0
    block_errors: int = 0
    single_bit_blocks: int = 0

    @property
    def ber(self):
        return self.bit_errors / self.bits if self.bits else 0.0

    @property
    def bler(self):
        return self.block_errors / self.blocks if self.blocks else 0.0

    @property
    def bler_interval(self):
        return wilson_interval(self.block_errors, self.blocks)

    @property
    def ber_interval(self):
        return wilson_interval(self.bit_errors, self.bits)

    @property
    def single_bit_fraction(self):
        """Share of errored blocks that contain exactly one wrong bit."""
        return self.single_bit_blocks / self.block_errors if self.block_errors else float("nan")


@dataclass
class SimReport:
    points: list
    rate: float
    seed: int
    config: dict = field(default_factory=dict)
    snr_convention: str = "EbN0"

    @property
    def config_hash(self):
        return config_hash(self.config)

    def variant(self, name):
        return [p for p in self.points if p.variant == name]

    def rows(self):
        for p in self.points:
            lo, hi = p.bler_interval
            shift = rate_shift_db(self.config.get("k", 2)) if p.variant == "spc" else 0.0
            yield {
                "schema": SCHEMA_VERSION,
                "variant": p.variant,
                "ebn0_db": p.ebn0_db,
                "esn0_db": float(ebn0_to_esn0(p.ebn0_db, self.rate)),
                "sigma2": p.sigma2,
                "blocks": p.blocks,
                "bits": p.bits,
                "bit_errors": p.bit_errors,
                "block_errors": p.block_errors,
                "ber": p.ber,
                "bler": p.bler,
                "bler_lo": lo,
                "bler_hi": hi,
                "single_bit_fraction": p.single_bit_fraction,
                "rate": self.rate,
                "rate_shift_db": shift,
                "snr_convention": self.snr_convention,
                "seed": self.seed,
                "config_hash": self.config_hash,
            }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def to_plotdata(self, path):
        """Whitespace-separated blocks, one per variant (gnuplot ``index``)."""
        with open(path, "w") as fh:
            fh.write(f"# config_hash {self.config_hash} seed {self.seed} "
                     f"snr {self.snr_convention}\n")
            names = list(dict.fromkeys(p.variant for p in self.points))
            for i, name in enumerate(names):
                if i:
                    fh.write("\n\n")
                fh.write(f"# variant {name}\n")
                fh.write("# ebn0_db bler bler_lo bler_hi ber single_bit_fraction rate_shift_db\n")
                for row in self.rows():
                    if row["variant"] != name:
                        continue
                    fh.write(
                        f"{row['ebn0_db']:.6g} {row['bler']:.6e} {row['bler_lo']:.6e} "
                        f"{row['bler_hi']:.6e} {row['ber']:.6e} "
                        f"{row['single_bit_fraction']:.6g} {row['rate_shift_db']:.6g}\n"
                    )


def _simulate_batch(link, seed, si, bi, b, s2, noiseless):
    rng = block_rng(seed, si, bi)
    u = link.sample(rng, b)
    y = awgn(link.encode(u), s2, rng=rng, noiseless=noiseless)
    out = {}
    for name, dec in link.decode(y, s2).items():
        errs = (dec != u).sum(axis=1)
        out[name] = (b, u.size, int(errs.sum()), int((errs > 0).sum()), int((errs == 1).sum()))
    return out


def run_monte_carlo(link: Link, ebn0_db, seed=0, min_block_errors=100,
                    max_blocks=100_000, batch_size=1000, sigma2=None,
                    noiseless=False, threads=1) -> SimReport:
    """Simulate ``link`` at each Eb/N0 point until ``min_block_errors`` block
    errors (counted on the first variant) or ``max_blocks`` blocks.

    ``sigma2`` overrides the Eb/N0 conversion with explicit noise variances.
    With ``threads > 1`` batches are simulated concurrently but folded in
    batch order, and the stop rule is checked after every batch, so the
    report does not depend on the thread count.
    """
    snrs = [float(s) for s in np.atleast_1d(ebn0_db)]
    if not snrs or not all(math.isfinite(s) for s in snrs):
        raise ValueError("SNR list must be non-empty and finite")
    if sigma2 is None:
        sig = [float(snr_to_sigma2(s, link.rate)) for s in snrs]
    else:
        sig = [float(s) for s in np.atleast_1d(sigma2)]
        if len(sig) != len(snrs):
            raise ValueError("need one noise variance per SNR point")
    if min_block_errors < 1 or max_blocks < 1 or batch_size < 1 or threads < 1:
        raise ValueError("stop rule and thread values must be positive")
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    points = []
    try:
        for si, (snr, s2) in enumerate(zip(snrs, sig)):
            pts = {v: SnrPoint(v, snr, s2) for v in link.variants}
            ref = pts[link.variants[0]]
            bi = 0
            while ref.block_errors < min_block_errors and ref.blocks < max_blocks:
                jobs = []
                planned = ref.blocks
                for j in range(threads):
                    b = min(batch_size, max_blocks - planned)
                    if b <= 0:
                        break
                    jobs.append((bi + j, b))
                    planned += b
                args = [(link, seed, si, j, b, s2, noiseless) for j, b in jobs]
                if pool is None:
                    results = [_simulate_batch(*a) for a in args]
                else:
                    results = list(pool.map(lambda a: _simulate_batch(*a), args))
                for res in results:
                    if ref.block_errors >= min_block_errors:
                        break
                    for name, (b, bits, be, ble, single) in res.items():
                        p = pts[name]
                        p.blocks += b
                        p.bits += bits
                        p.bit_errors += be
                        p.block_errors += ble
                        p.single_bit_blocks += single
                bi += len(jobs)
            points.extend(pts.values())
    finally:
        if pool is not None:
            pool.shutdown()
    config = {
        **link.describe(),
        "ebn0_db": snrs,
        "sigma2": sig,
        "min_block_errors": min_block_errors,
        "max_blocks": max_blocks,
        "batch_size": batch_size,
        "seed": seed,
        "noiseless": noiseless,
    }
    return SimReport(points, link.rate, seed, config)


def report_summary(report: SimReport):
    return [asdict(p) | {"ber": p.ber, "bler": p.bler} for p in report.points]
