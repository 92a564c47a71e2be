"""File sinks for training runs: metrics CSV, point dumps, evaluations, checkpoints."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..evaluation import mode_coverage
from ..models import sample_prior
from ..trainers import LOSS_COLUMNS, METRIC_EXTRAS, Sink, TrainerState
from . import checkpoint
from .config import ExperimentConfig


def metrics_header(method: str) -> list[str]:
    return ["iteration", "wall_ms", *LOSS_COLUMNS, *METRIC_EXTRAS[method]]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _sync(f):
    f.flush()
    os.fsync(f.fileno())


class MetricsSink(Sink):
    """One CSV row per iteration. Resumed runs append below the existing rows.

    ``wall_ms`` is written as 0 unless ``wall_clock`` is set, which keeps
    same-seed reruns byte-identical.
    """

    def __init__(self, path, method: str, wall_clock: bool = False):
        self.path = Path(path)
        self.header = metrics_header(method)
        self.wall_clock = wall_clock
        self._f = None

    def start(self, state: TrainerState):
        head = ",".join(self.header)
        if state.iteration > 0 and self.path.exists():
            with open(self.path, encoding="utf-8") as f:
                first = f.readline().rstrip("\n")
            if first != head:
                raise ValueError(f"{self.path}: header {first!r} does not match {head!r}")
            self._truncate_after(state.iteration)
            self._f = open(self.path, "a", encoding="utf-8", newline="\n")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._f = open(self.path, "w", encoding="utf-8", newline="\n")
            self._f.write(head + "\n")
            _sync(self._f)

    def _truncate_after(self, iteration: int):
        # rows written after the checkpoint we resume from are replayed
        with open(self.path, encoding="utf-8") as f:
            lines = f.readlines()
        keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= iteration]
        if len(keep) != len(lines):
            with open(self.path, "w", encoding="utf-8", newline="\n") as f:
                f.writelines(keep)

    def step(self, state: TrainerState, report: dict, wall_ms: float):
        row = [str(state.iteration), _fmt(wall_ms if self.wall_clock else 0.0)]
        row += [_fmt(report.get(k)) for k in self.header[2:]]
        self._f.write(",".join(row) + "\n")

    def finish(self, state: TrainerState):
        if self._f is not None:
            _sync(self._f)
            self._f.close()
            self._f = None


def sample_points(state: TrainerState, n: int, seed) -> np.ndarray:
    """Generator outputs for ``n`` prior draws, using an RNG separate from training."""
    G = state.models.G
    rng = np.random.default_rng(seed)
    with T.no_grad():
        z = T.Tensor(sample_prior(rng, n, G.cfg.latent_dim))
        return G(z, np.zeros(n, dtype=np.int64)).data


def write_points(path, pts: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in pts])
    return path


class PointsSink(Sink):
    """Toy runs: dump ``n`` generated points every ``every`` steps and at the end."""

    def __init__(self, out_dir, every: int, n: int = 1000, seed: int = 0):
        self.out_dir, self.every, self.n, self.seed = Path(out_dir), every, n, seed
        self.written: list[Path] = []

    def _dump(self, state):
        pts = sample_points(state, self.n, [self.seed, state.iteration])
        self.written.append(write_points(self.out_dir / f"points_{state.iteration:07d}.csv", pts))

    def start(self, state):
        if self.every and state.iteration == 0:
            self._dump(state)

    def step(self, state, report, wall_ms):
        if self.every and state.iteration % self.every == 0:
            self._dump(state)

    def finish(self, state):
        if not self.written or self.written[-1].name != f"points_{state.iteration:07d}.csv":
            self._dump(state)


class CoverageSink(Sink):
    """Toy runs: ring coverage of 10^4 generated points every ``every`` steps."""

    def __init__(self, path, dist, every: int, n: int = 10_000, bins: int = 100, seed: int = 0):
        self.path, self.dist, self.every, self.n, self.bins, self.seed = Path(path), dist, every, n, bins, seed
        self.rows: list[tuple[int, float, int]] = []

    def start(self, state):
        if state.iteration == 0 or not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("iteration,coverage,off_ring\n", encoding="utf-8")

    def step(self, state, report, wall_ms):
        if self.every and state.iteration % self.every == 0:
            cov = mode_coverage(sample_points(state, self.n, [self.seed, state.iteration]),
                                self.dist, self.bins)
            self.rows.append((state.iteration, cov.fraction, cov.off_ring))
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write(f"{state.iteration},{cov.fraction!r},{cov.off_ring}\n")


class CheckpointSink(Sink):
    """``ckpt_<iteration>.fmck`` every ``every`` steps and ``last.fmck`` at the end."""

    def __init__(self, out_dir, every: int, experiment: ExperimentConfig):
        self.out_dir, self.every, self.experiment = Path(out_dir), every, experiment

    def step(self, state, report, wall_ms):
        if self.every and state.iteration % self.every == 0:
            checkpoint.save(self.out_dir / f"ckpt_{state.iteration:07d}.fmck", state, self.experiment)

    def finish(self, state):
        checkpoint.save(self.out_dir / "last.fmck", state, self.experiment)
