"""Moving averages of real and generated feature centers.

One global stream pair serves the discriminator features; one pair per
class serves the classifier features. The first observation on a stream
seeds it; later ones blend in with ``center <- decay*center + (1-decay)*mean``.

On the fake side :meth:`CenterBank.update` returns the blended center with
the current batch mean still attached to the graph, so the generator is
pushed through this batch only; the stored history is always plain data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SIDES = ("real", "fake")


@dataclass
class _Stream:
    center: np.ndarray | None = None
    count: int = 0

    @property
    def initialized(self) -> bool:
        return self.center is not None


@dataclass
class CenterPairs:
    pairs: dict  # scope -> (real center, fake center)
    skipped: list = field(default_factory=list)


class CenterBank:
    def __init__(self, dim: int | None = None, decay: float = 0.9):
        if not 0 <= decay < 1:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.dim = dim
        self.decay = float(decay)
        self.streams: dict[tuple, _Stream] = {}
        self._live: dict[tuple, Tensor] = {}

    def _stream(self, scope, side) -> _Stream:
        if side not in SIDES:
            raise ValueError(f"side must be 'real' or 'fake', got {side!r}")
        return self.streams.setdefault((scope, side), _Stream())

    def is_initialized(self, scope, side) -> bool:
        s = self.streams.get((scope, side))
        return s is not None and s.initialized

    def count(self, scope, side) -> int:
        s = self.streams.get((scope, side))
        return 0 if s is None else s.count

    def update(self, scope, side: str, features) -> Tensor:
        """Fold a batch of features (rows) into a stream; return the center to use this step."""
        feats = T.as_tensor(features)
        if feats.ndim == 1:
            feats = T.reshape(feats, (1, feats.shape[0]))
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ShapeError(f"features must be a non-empty (batch, dim) array, got {feats.shape}")
        if self.dim is None:
            self.dim = feats.shape[1]
        elif feats.shape[1] != self.dim:
            raise ShapeError(f"feature dimension changed from {self.dim} to {feats.shape[1]}")
        stream = self._stream(scope, side)
        batch_mean = T.reduce_mean(feats, axis=0)
        if side == "real":
            batch_mean = batch_mean.detach()
        if stream.initialized:
            used = T.add(Tensor(self.decay * stream.center), T.mul(batch_mean, 1 - self.decay))
        else:
            used = batch_mean
        stream.center = np.array(used.data, copy=True)
        stream.count += feats.shape[0]
        self._live[(scope, side)] = used if side == "fake" else Tensor(stream.center)
        return self._live[(scope, side)]

    def center(self, scope, side) -> Tensor:
        s = self.streams.get((scope, side))
        if s is None or not s.initialized:
            raise KeyError(f"stream {scope}/{side} has not been seeded")
        return Tensor(s.center)

    def read_centers(self, scopes=None) -> CenterPairs:
        """Center pairs for every requested scope seeded on both sides.

        Centers updated since :meth:`end_step` are returned as given by
        :meth:`update` (fake side differentiable); the rest are detached.
        """
        if scopes is None:
            scopes = sorted({sc for sc, _ in self.streams}, key=_scope_key)
        pairs, skipped = {}, []
        for sc in scopes:
            if self.is_initialized(sc, "real") and self.is_initialized(sc, "fake"):
                live = [self._live.get((sc, side)) for side in SIDES]
                pairs[sc] = tuple(t if t is not None else self.center(sc, side)
                                  for t, side in zip(live, SIDES))
            else:
                skipped.append(sc)
        return CenterPairs(pairs, skipped)

    def end_step(self) -> None:
        """Drop graph references held from the current step."""
        self._live.clear()

    # -- persistence ---------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (scope, side), s in sorted(self.streams.items(), key=lambda kv: (_scope_key(kv[0][0]), kv[0][1])):
            if s.initialized:
                out[f"{scope}/{side}"] = s.center
        return out

    def state_meta(self) -> dict:
        return {
            "dim": self.dim,
            "decay": self.decay,
            "counts": {f"{sc}/{side}": s.count for (sc, side), s in self.streams.items()},
        }

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "CenterBank":
        bank = cls(meta["dim"], meta["decay"])
        for key, count in meta["counts"].items():
            scope_s, side = key.rsplit("/", 1)
            scope = scope_s if scope_s == "global" else int(scope_s)
            stream = bank._stream(scope, side)
            stream.count = int(count)
            if key in arrays:
                stream.center = np.array(arrays[key])
        return bank


def _scope_key(scope):
    return (0, -1) if scope == "global" else (1, scope)
