"""Recorded compute and transfer samples, FLOPs scaling, effective bandwidth."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .model_ir import PhaseLayer

log = logging.getLogger(__name__)

COMPUTE_HEADER = ("minibatch", "phase", "layer_type", "flops", "time_s")
TRANSFER_HEADER = ("minibatch", "seq_no", "bytes", "time_s")

# Durations below this are timer noise.
MIN_SAMPLE_TIME = 1e-6

# Fractions of the maximal trainable minibatch sampled while profiling.
PROFILE_GRID = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(2, 3), Fraction(1))


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ComputeSample:
    minibatch: int
    phase: int
    layer_type: str
    flops: int
    time: float

    @property
    def rate(self) -> float:
        return self.flops / self.time


@dataclass(frozen=True)
class TransferSample:
    minibatch: int
    seq_no: int
    bytes: int
    time: float


@dataclass(frozen=True)
class ProfileSet:
    compute_samples: tuple[ComputeSample, ...] = ()
    transfer_samples: tuple[TransferSample, ...] = ()
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    @property
    def sampled_minibatches(self) -> frozenset[int]:
        return frozenset(s.minibatch for s in self.compute_samples) | frozenset(
            s.minibatch for s in self.transfer_samples
        )

    def by_layer_type(self) -> dict[str, list[ComputeSample]]:
        groups: dict[str, list[ComputeSample]] = {}
        for s in self.compute_samples:
            groups.setdefault(s.layer_type, []).append(s)
        return dict(sorted(groups.items()))


def profile_grid(k_max: int) -> list[int]:
    """Distinct minibatch sizes at the standard profiling fractions of ``k_max``."""
    ks = sorted({max(1, int(f * k_max)) for f in PROFILE_GRID})
    return ks


def _parse_rows(path: Path, min_time: float):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ProfileError(f"{path}: empty file")
        header = tuple(h.strip() for h in header)
        if header == COMPUTE_HEADER:
            kind = "compute"
        elif header == TRANSFER_HEADER:
            kind = "transfer"
        else:
            raise ProfileError(f"{path}: unrecognised header {','.join(header)}; expected "
                               f"{','.join(COMPUTE_HEADER)} or {','.join(TRANSFER_HEADER)}")
        rows, diags = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                diags.append(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
                continue
            try:
                if kind == "compute":
                    k, j, ltype, flops, t = row
                    sample = ComputeSample(int(k), int(j), ltype.strip(), int(flops), float(t))
                    size = sample.flops
                else:
                    k, seq, nbytes, t = row
                    sample = TransferSample(int(k), int(seq), int(nbytes), float(t))
                    size = sample.bytes
            except ValueError as exc:
                diags.append(f"{path}:{lineno}: unparseable row ({exc})")
                continue
            if sample.minibatch <= 0:
                diags.append(f"{path}:{lineno}: nonpositive minibatch")
            elif size <= 0:
                diags.append(f"{path}:{lineno}: nonpositive {'flops' if kind == 'compute' else 'bytes'}")
            elif not sample.time > 0:
                diags.append(f"{path}:{lineno}: nonpositive time")
            elif sample.time < min_time:
                diags.append(f"{path}:{lineno}: time {sample.time:g}s below noise threshold")
            else:
                rows.append(sample)
    return kind, rows, diags


def load_profiles(paths: Iterable, min_time: float = MIN_SAMPLE_TIME) -> ProfileSet:
    compute, transfer, diags = [], [], []
    for p in paths:
        kind, rows, d = _parse_rows(Path(p), min_time)
        diags.extend(d)
        if not rows:
            raise ProfileError(f"{p}: no valid rows")
        (compute if kind == "compute" else transfer).extend(rows)
    for d in diags:
        log.warning("skipped profile row: %s", d)
    return ProfileSet(tuple(compute), tuple(transfer), tuple(diags))


def write_compute_csv(path, samples: Sequence[ComputeSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPUTE_HEADER)
        for s in samples:
            w.writerow((s.minibatch, s.phase, s.layer_type, s.flops, repr(s.time)))


def write_transfer_csv(path, samples: Sequence[TransferSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSFER_HEADER)
        for s in samples:
            w.writerow((s.minibatch, s.seq_no, s.bytes, repr(s.time)))


def scale_flops_exact(flops_base: int, k: int, k_base: int) -> Fraction:
    if k <= 0:
        raise ValueError(f"minibatch must be positive, got {k}")
    return Fraction(k, k_base) * flops_base


def scale_flops(phase: PhaseLayer | int, k: int, k_base: int) -> int:
    """FLOPs of a phase at minibatch ``k``: linear in ``k``, rounded half up."""
    base = phase.flops_base if isinstance(phase, PhaseLayer) else phase
    exact = scale_flops_exact(base, k, k_base)
    return (2 * exact.numerator + exact.denominator) // (2 * exact.denominator)


def effective_bandwidth(samples: Sequence[TransferSample], fallback: float) -> float:
    """Aggregate rate: total bytes over total transfer time."""
    if not samples:
        return float(fallback)
    total_bytes = sum(s.bytes for s in samples)
    total_time = sum(s.time for s in samples)
    return total_bytes / total_time
