"""LTI controller with a masked, flattened parameter vector."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lti import DimensionError, StateSpace

BLOCKS = ("ak", "bk", "ck", "dk")


@dataclass(frozen=True)
class Controller:
    """``xc' = Ak xc + Bk e``, ``u = Ck xc + Dk e``.

    ``mask`` maps each block name to a boolean array of the same shape; true
    entries are trainable and appear in `phi` in block order
    (Ak, Bk, Ck, Dk), row-major within a block.
    """

    ak: np.ndarray
    bk: np.ndarray
    ck: np.ndarray
    dk: np.ndarray
    mask: dict

    def __post_init__(self):
        dk = np.atleast_2d(np.asarray(self.dk, dtype=float))
        nu, ne = dk.shape
        ak = np.asarray(self.ak, dtype=float)
        nk = ak.shape[0] if ak.size else 0
        shapes = {"ak": (nk, nk), "bk": (nk, ne), "ck": (nu, nk), "dk": (nu, ne)}
        mask = {} if self.mask is None else dict(self.mask)
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name) if name != "dk" else dk, dtype=float).reshape(shape)
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            msk = mask.get(name)
            msk = np.ones(shape, bool) if msk is None else np.asarray(msk, bool).reshape(shape)
            if msk.shape != shape:
                raise DimensionError(f"mask for {name} has shape {msk.shape}, expected {shape}")
            msk = msk.copy()
            msk.setflags(write=False)
            mask[name] = msk
        object.__setattr__(self, "mask", mask)

    @property
    def nstates(self) -> int:
        return self.ak.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.dk.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.dk.shape[0]

    @property
    def n_params(self) -> int:
        return int(sum(self.mask[b].sum() for b in BLOCKS))

    @property
    def phi(self) -> np.ndarray:
        return np.concatenate([getattr(self, b)[self.mask[b]] for b in BLOCKS])

    def with_phi(self, phi) -> "Controller":
        phi = np.asarray(phi, dtype=float).ravel()
        if phi.size != self.n_params:
            raise DimensionError(f"phi has {phi.size} entries, controller has {self.n_params}")
        out = {}
        pos = 0
        for b in BLOCKS:
            arr = getattr(self, b).copy()
            cnt = int(self.mask[b].sum())
            arr[self.mask[b]] = phi[pos:pos + cnt]
            pos += cnt
            out[b] = arr
        return Controller(mask=self.mask, **out)

    def param_index(self) -> dict:
        """For each block, ``(rows, cols, positions)`` of trainable entries in `phi`."""
        out = {}
        pos = 0
        for b in BLOCKS:
            rows, cols = np.nonzero(self.mask[b])
            out[b] = (rows, cols, np.arange(pos, pos + rows.size))
            pos += rows.size
        return out

    def flatten_block_grads(self, grads: dict) -> np.ndarray:
        """Collect full-shape block gradients into a `phi`-shaped vector."""
        return np.concatenate([np.asarray(grads[b])[self.mask[b]] for b in BLOCKS])

    def to_statespace(self) -> StateSpace:
        return StateSpace(self.ak, self.bk, self.ck, self.dk)

    @classmethod
    def from_statespace(cls, sys: StateSpace, mask: dict | None = None) -> "Controller":
        return cls(sys.a, sys.b, sys.c, sys.d, mask or {})

    @classmethod
    def static(cls, dk, mask=None) -> "Controller":
        dk = np.atleast_2d(np.asarray(dk, dtype=float))
        return cls(np.zeros((0, 0)), np.zeros((0, dk.shape[1])), np.zeros((dk.shape[0], 0)),
                   dk, mask or {})

    def to_dict(self) -> dict:
        d = {b: getattr(self, b).tolist() for b in BLOCKS}
        d["mask"] = {b: self.mask[b].astype(int).tolist() for b in BLOCKS}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Controller":
        dk = np.atleast_2d(np.asarray(data["dk"], dtype=float))
        nu, ne = dk.shape
        nk = len(data["ak"])
        shapes = {"ak": (nk, nk), "bk": (nk, ne), "ck": (nu, nk), "dk": (nu, ne)}
        blocks = {b: np.asarray(data[b], dtype=float).reshape(shapes[b]) for b in BLOCKS}
        mask_in = data.get("mask") or {}
        mask = {b: np.asarray(mask_in[b], bool).reshape(shapes[b]) for b in BLOCKS if b in mask_in}
        return cls(mask=mask, **blocks)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Controller":
        return cls.from_dict(json.loads(text))
