"""Draw serialization: CSV export and a lossless binary container.

The binary layout starts with the magic bytes ``ORDM`` and a format
version, followed by the dimensions, sampler settings, parameter names,
and the raw arrays in C order, little-endian.  Reading back a file
written by :func:`write_draws` reproduces the draws bit for bit.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .engine import PosteriorDraws, SamplerConfig

__all__ = ["write_csv", "write_draws", "read_draws", "MAGIC",
           "FORMAT_VERSION"]

MAGIC = b"ORDM"
FORMAT_VERSION = 1

_STAT_COLUMNS = ("chain", "iteration", "divergent", "treedepth_hit",
                 "energy", "accept_stat", "n_leapfrog")


def write_csv(draws: PosteriorDraws, path) -> None:
    """One row per retained draw: chain, iteration, sampler statistics,
    then one column per named parameter."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_STAT_COLUMNS) + list(draws.param_names))
        for c in range(draws.n_chains):
            for i in range(draws.n_iter):
                row = [c, i, int(draws.divergent[c, i]),
                       int(draws.treedepth_hit[c, i]),
                       repr(float(draws.energy[c, i])),
                       repr(float(draws.accept_stat[c, i])),
                       int(draws.n_leapfrog[c, i])]
                row.extend(repr(float(v)) for v in draws.draws[c, i])
                writer.writerow(row)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(buf: bytes, offset: int):
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    s = buf[offset:offset + n].decode("utf-8")
    return s, offset + n


def _pack_array(a: np.ndarray, dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


def write_draws(draws: PosteriorDraws, path) -> None:
    cfg = draws.config
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<III", draws.n_chains, draws.n_iter,
                             draws.dim))
    parts.append(struct.pack("<B", 1 if draws.metric_kind == "dense" else 0))
    parts.append(struct.pack("<IIqdII", cfg.n_warmup, cfg.n_iter,
                             cfg.seed, cfg.adapt_delta, cfg.max_treedepth,
                             cfg.n_chains))
    parts.append(struct.pack("<I", len(draws.param_names)))
    for name in draws.param_names:
        parts.append(_pack_str(name))
    parts.append(struct.pack("<I", len(draws.warnings)))
    for note in draws.warnings:
        parts.append(_pack_str(note))
    parts.append(_pack_array(draws.draws, "<f8"))
    parts.append(_pack_array(draws.energy, "<f8"))
    parts.append(_pack_array(draws.accept_stat, "<f8"))
    parts.append(_pack_array(draws.divergent, np.uint8))
    parts.append(_pack_array(draws.treedepth_hit, np.uint8))
    parts.append(_pack_array(draws.n_leapfrog, "<i8"))
    parts.append(_pack_array(draws.step_size, "<f8"))
    parts.append(_pack_array(draws.metric, "<f8"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_draws(path) -> PosteriorDraws:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a draws file (bad magic)")
    offset = 4
    (version,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported draws format version {version} "
            f"(expected {FORMAT_VERSION})")
    n_chains, n_iter, dim = struct.unpack_from("<III", buf, offset)
    offset += 12
    (dense_flag,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    n_warmup, cfg_iter, seed, adapt_delta, max_treedepth, cfg_chains = (
        struct.unpack_from("<IIqdII", buf, offset))
    offset += struct.calcsize("<IIqdII")
    (n_names,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    names = []
    for _ in range(n_names):
        s, offset = _unpack_str(buf, offset)
        names.append(s)
    (n_notes,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    notes = []
    for _ in range(n_notes):
        s, offset = _unpack_str(buf, offset)
        notes.append(s)

    def take(shape, dtype):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr.reshape(shape).copy()

    metric_kind = "dense" if dense_flag else "diag"
    draws = take((n_chains, n_iter, dim), "<f8")
    energy = take((n_chains, n_iter), "<f8")
    accept = take((n_chains, n_iter), "<f8")
    divergent = take((n_chains, n_iter), np.uint8).astype(bool)
    treedepth = take((n_chains, n_iter), np.uint8).astype(bool)
    n_leapfrog = take((n_chains, n_iter), "<i8")
    step_size = take((n_chains,), "<f8")
    metric_shape = ((n_chains, dim, dim) if metric_kind == "dense"
                    else (n_chains, dim))
    metric = take(metric_shape, "<f8")
    config = SamplerConfig(n_chains=cfg_chains, n_warmup=n_warmup,
                           n_iter=cfg_iter, adapt_delta=adapt_delta,
                           max_treedepth=max_treedepth, metric=metric_kind,
                           seed=seed)
    return PosteriorDraws(draws=draws, param_names=tuple(names),
                          divergent=divergent, treedepth_hit=treedepth,
                          energy=energy, accept_stat=accept,
                          n_leapfrog=n_leapfrog, step_size=step_size,
                          metric_kind=metric_kind, metric=metric,
                          config=config, warnings=tuple(notes))
