"""Flat parameter vector layout: named, disjoint, shaped slices."""

from __future__ import annotations

import numpy as np

__all__ = ["ParamLayout"]


class ParamLayout:
    """Maps block names to disjoint slices of an unconstrained vector.

    Blocks are laid out in insertion order; ``unpack`` returns reshaped
    views so it is cheap enough to call inside a log-density.
    """

    def __init__(self, blocks):
        self.names = []
        self.shapes = {}
        self.slices = {}
        offset = 0
        for name, shape in blocks:
            if name in self.shapes:
                raise ValueError(f"duplicate block '{name}'")
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape)) if shape else 1
            self.names.append(name)
            self.shapes[name] = shape
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    def unpack(self, vec) -> dict:
        if vec.shape[-1] != self.size:
            raise ValueError(f"expected vector of length {self.size}, "
                             f"got {vec.shape[-1]}")
        out = {}
        for name in self.names:
            block = vec[..., self.slices[name]]
            shape = self.shapes[name]
            out[name] = block.reshape(vec.shape[:-1] + shape) if shape \
                else block.reshape(vec.shape[:-1] + (1,))[..., 0]
        return out

    def pack(self, values: dict) -> np.ndarray:
        vec = np.empty(self.size)
        for name in self.names:
            block = np.asarray(values[name], dtype=float)
            if block.shape != self.shapes[name] and not (
                    block.shape == () and self.shapes[name] == ()):
                raise ValueError(f"block '{name}': expected shape "
                                 f"{self.shapes[name]}, got {block.shape}")
            vec[self.slices[name]] = block.ravel()
        return vec

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def __repr__(self):
        parts = ", ".join(f"{n}{self.shapes[n]}" for n in self.names)
        return f"ParamLayout({parts}; size={self.size})"
