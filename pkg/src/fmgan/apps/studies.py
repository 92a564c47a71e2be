"""Multi-seed studies behind the ring and ablation comparisons.

Each (config, seed) result is cached in a JSON file keyed by the config
digest, so reruns only train what is missing. Deleting the cache file
forces everything to be recomputed.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .. import evaluation as ev
from ..datasets import RingDataset
from ..trainers import run
from . import config as cfgmod
from .io import open_dataset
from .sinks import sample_points

TOY_METHODS = ("fm_gan", "gan")
ABLATIONS = ("full", "no_gc", "no_e", "no_pair")


class ResultCache:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.data = {}
        if self.path and self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))

    def get(self, key):
        return self.data.get(key)

    def put(self, key, value):
        self.data[key] = value
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n",
                                 encoding="utf-8")


def _key(exp) -> str:
    return f"{exp.name}/{exp.seed}/{cfgmod.digest(exp)}"


def _ref_key(exp) -> str:
    d = cfgmod.to_dict(exp)
    blob = json.dumps({"model": d["model"], "dataset": d["dataset"]}, sort_keys=True)
    return "reference/" + hashlib.sha256(blob.encode()).hexdigest()[:16]


def _log(verbose, *msg):
    if verbose:
        print(*msg, flush=True)


# ---------------------------------------------------------------------------
# ring


def toy_experiment(method: str, seed: int, iterations: int = 50_000) -> cfgmod.ExperimentConfig:
    exp = cfgmod.load(Path(__file__).resolve().parents[3] / "configs" / f"toy_{method.replace('_', '')}.toml")
    return cfgmod.with_overrides(exp, seed=seed, iterations=iterations)


def toy_run(exp, cache: ResultCache, verbose=False) -> dict:
    key = _key(exp)
    if (hit := cache.get(key)) is not None:
        return hit
    t = time.time()
    state = run(exp.train, RingDataset(exp.dataset.ring()), model_cfg=exp.model, weights=exp.weights)
    cov = ev.mode_coverage(sample_points(state, 10_000, [exp.seed, state.iteration]), exp.dataset.ring())
    res = {"coverage": cov.fraction, "on_ring": cov.on_ring, "off_ring": cov.off_ring,
           "iterations": state.iteration, "seconds": round(time.time() - t, 1)}
    cache.put(key, res)
    _log(verbose, exp.name, exp.seed, res)
    return res


def toy_study(seeds=range(5), iterations=50_000, cache_path=None, verbose=False) -> dict:
    """Coverage per method per seed, {method: [result, ...]}."""
    cache = ResultCache(cache_path)
    return {m: [toy_run(toy_experiment(m, s, iterations), cache, verbose) for s in seeds]
            for m in TOY_METHODS}


# ---------------------------------------------------------------------------
# conditional image ablations


def ablation_experiment(variant: str, seed: int, iterations: int | None = None):
    name = "cvae_gan" if variant == "full" else variant
    exp = cfgmod.load(Path(__file__).resolve().parents[3] / "configs" / f"synthetic_{name}.toml")
    return cfgmod.with_overrides(exp, seed=seed, iterations=iterations)


def reference_for(exp, cache: ResultCache, verbose=False):
    """Reference classifier fit on the study's real training split."""
    train, test = open_dataset(exp.dataset)
    ref = ev.train_reference_classifier(train, test, exp.model)
    _log(verbose, "reference held-out accuracy", ref.heldout_accuracy)
    cache.put(_ref_key(exp), {"heldout_accuracy": ref.heldout_accuracy})
    return ref, train


def ablation_run(exp, ref, train, cache: ResultCache, per_class=100, verbose=False) -> dict:
    key = _key(exp)
    if (hit := cache.get(key)) is not None:
        return hit
    t = time.time()
    state = run(exp.train, train, model_cfg=exp.model, weights=exp.weights)
    sampler = ev.generator_sampler(state.models.G)
    K = exp.model.num_classes
    res = {"top1": ev.top1_discriminability(ref, sampler, per_class, exp.seed),
           "diversity": ev.per_class_diversity(sampler, K, per_class, exp.seed),
           "iterations": state.iteration, "seconds": round(time.time() - t, 1)}
    cache.put(key, res)
    _log(verbose, exp.name, exp.seed, res)
    return res


def ablation_study(seeds=range(5), iterations=None, variants=ABLATIONS, cache_path=None,
                   verbose=False) -> dict:
    """{"reference": held-out accuracy, variant: [result per seed]}."""
    cache = ResultCache(cache_path)
    exps = {v: [ablation_experiment(v, s, iterations) for s in seeds] for v in variants}
    ref_key = _ref_key(exps[variants[0]][0])
    out = {}
    ref = train = None
    for v in variants:
        rows = []
        for exp in exps[v]:
            if cache.get(_key(exp)) is None and ref is None:
                ref, train = reference_for(exp, cache, verbose)
            rows.append(ablation_run(exp, ref, train, cache, verbose=verbose))
        out[v] = rows
    if cache.get(ref_key) is None:
        reference_for(exps[variants[0]][0], cache, verbose)
    out["reference"] = cache.get(ref_key)["heldout_accuracy"]
    return out
