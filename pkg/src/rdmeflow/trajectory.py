"""Trajectories and their on-disk format.

Binary layout (little-endian throughout)::

    offset  size        field
    0       8           magic  b"RFTRAJ01"
    8       4   u32     version (1)
    12      32          model hash (SHA-256 of the canonical model text)
    44      8   u64     seed
    52      4   u32     K (voxels)
    56      4   u32     S (species)
    60      4   u32     T (output times)
    64      8*T f64     tspan
    ...     4*T*K*S u32 counts, one K x S row-major block per output time
    ...     8   u64     XXH64 (seed 0) of every preceding byte

Version 1 is uncompressed; a future codec gets a new version number.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import xxhash

from .errors import (BadMagicError, ChecksumError, SerializationOverflowError, SizeMismatchError,
                     VersionMismatchError)

MAGIC = b"RFTRAJ01"
VERSION = 1
_HEADER = struct.Struct("<8sI32sQIII")
_U32_MAX = 2**32 - 1


@dataclass(eq=False)
class Trajectory:
    """One realization: a ``K x S`` count matrix per output time.

    Equality compares the persisted fields (tspan, counts, model hash, seed);
    the runtime metadata below is informational.
    """

    tspan: np.ndarray
    counts: np.ndarray          # (T, K, S) int64
    model_hash: bytes
    seed: int
    species: tuple | None = None
    solver: str = ""
    wall_time: float = 0.0
    events: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tspan = np.asarray(self.tspan, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3 or self.counts.shape[0] != len(self.tspan):
            raise ValueError("counts must have shape (len(tspan), K, S)")
        if len(self.model_hash) != 32:
            raise ValueError("model hash must be 32 bytes")

    @property
    def shape(self):
        return self.counts.shape

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.model_hash == other.model_hash
            and np.array_equal(self.tspan, other.tspan)
            and self.counts.shape == other.counts.shape
            and np.array_equal(self.counts, other.counts)
        )

    def species_index(self, species) -> int:
        if isinstance(species, (int, np.integer)):
            if not 0 <= species < self.counts.shape[2]:
                raise KeyError(f"species index {species} out of range")
            return int(species)
        if self.species is None or species not in self.species:
            raise KeyError(f"unknown species {species!r}")
        return self.species.index(species)


def to_bytes(traj: Trajectory) -> bytes:
    T, K, S = traj.counts.shape
    if traj.counts.size and (traj.counts.min() < 0 or traj.counts.max() > _U32_MAX):
        raise SerializationOverflowError("counts must lie in [0, 2**32 - 1] for the u32 format")
    if not 0 <= traj.seed < 2**64:
        raise SerializationOverflowError("seed must fit in u64")
    body = b"".join([
        _HEADER.pack(MAGIC, VERSION, bytes(traj.model_hash), traj.seed, K, S, T),
        traj.tspan.astype("<f8").tobytes(),
        traj.counts.astype("<u4").tobytes(order="C"),
    ])
    return body + struct.pack("<Q", xxhash.xxh64_intdigest(body, seed=0))


def from_bytes(data: bytes, species=None) -> Trajectory:
    data = bytes(data)
    if len(data) < 8 or data[:8] != MAGIC:
        raise BadMagicError("not a trajectory file (bad magic)")
    if len(data) < _HEADER.size:
        raise SizeMismatchError(f"truncated header: {len(data)} bytes")
    magic, version, mhash, seed, K, S, T = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, expected {VERSION}")
    expected = _HEADER.size + 8 * T + 4 * T * K * S + 8
    if len(data) != expected:
        raise SizeMismatchError(f"expected {expected} bytes for K={K} S={S} T={T}, got {len(data)}")
    (stored,) = struct.unpack_from("<Q", data, expected - 8)
    if xxhash.xxh64_intdigest(data[:-8], seed=0) != stored:
        raise ChecksumError("checksum mismatch")
    off = _HEADER.size
    tspan = np.frombuffer(data, dtype="<f8", count=T, offset=off).astype(float)
    off += 8 * T
    counts = np.frombuffer(data, dtype="<u4", count=T * K * S, offset=off).astype(np.int64).reshape(T, K, S)
    return Trajectory(tspan, counts, mhash, seed, tuple(species) if species is not None else None)


def write_trajectory(traj: Trajectory, sink) -> int:
    """Write to a path or binary file object; returns the byte count."""
    data = to_bytes(traj)
    try:
        if isinstance(sink, (str, Path)):
            Path(sink).write_bytes(data)
        else:
            sink.write(data)
    except OSError as exc:
        raise OSError(f"writing trajectory to {sink!r} failed: {exc}") from exc
    return len(data)


def read_trajectory(source, species=None) -> Trajectory:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return from_bytes(source, species)
    if isinstance(source, (str, Path)):
        return from_bytes(Path(source).read_bytes(), species)
    return from_bytes(source.read(), species)


def timeseries(traj: Trajectory, species, scope="all", subdomains=None):
    """``[(t, count), ...]`` summed over a voxel, a subdomain or the whole domain.

    ``scope`` is ``"all"``, an int voxel index, or ``("label", n)`` which
    needs ``subdomains``.
    """
    s = traj.species_index(species)
    col = traj.counts[:, :, s]
    K = col.shape[1]
    if isinstance(scope, str) and scope == "all":
        values = col.sum(axis=1)
    elif isinstance(scope, tuple) and len(scope) == 2 and scope[0] == "label":
        if subdomains is None:
            raise KeyError("subdomain scope needs a subdomain map")
        members = np.flatnonzero(subdomains.labels == scope[1])
        if scope[1] not in subdomains.declared:
            raise KeyError(f"unknown subdomain label {scope[1]}")
        values = col[:, members].sum(axis=1)
    elif isinstance(scope, (int, np.integer)):
        if not 0 <= scope < K:
            raise KeyError(f"voxel {scope} out of range 0..{K - 1}")
        values = col[:, int(scope)]
    else:
        raise KeyError(f"bad scope {scope!r}")
    return [(float(t), int(v)) for t, v in zip(traj.tspan, values)]


def _species_label(traj, s):
    return traj.species[s] if traj.species is not None else str(s)


def export_csv(traj: Trajectory, path) -> None:
    """Long format: ``t,species,voxel,count``."""
    T, K, S = traj.counts.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "species", "voxel", "count"])
        for ti in range(T):
            t = repr(float(traj.tspan[ti]))
            for s in range(S):
                name = _species_label(traj, s)
                for k in range(K):
                    w.writerow([t, name, k, int(traj.counts[ti, k, s])])


def export_mesh_snapshot(traj: Trajectory, t_index: int, path, mesh, subdomains=None) -> None:
    """One row per voxel: ``x,y,z,subdomain,<species...>`` at output ``t_index``."""
    T, K, S = traj.counts.shape
    if not -T <= t_index < T:
        raise IndexError(f"t_index {t_index} out of range")
    names = [_species_label(traj, s) for s in range(S)]
    labels = subdomains.labels if subdomains is not None else np.ones(K, dtype=int)
    coords = np.zeros((K, 3))
    coords[:, : mesh.coords.shape[1]] = mesh.coords
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "subdomain", *names])
        for k in range(K):
            w.writerow([*(repr(float(c)) for c in coords[k]), int(labels[k]),
                        *(int(v) for v in traj.counts[t_index, k])])


def read_csv_totals(path) -> dict:
    """Sum an exported CSV back to ``{(t, species): total}`` (used to cross-check exports)."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (float(row["t"]), row["species"])
            out[key] = out.get(key, 0) + int(row["count"])
    return out
