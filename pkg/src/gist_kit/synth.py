"""Synthetic benchmark workspaces with planted structure.

Every model is a linear map from a shared latent space: a shared basis, a
type-specific rotation of the remaining directions, and per-seed noise.
Because the label-relevant directions live in the shared (untouched) part
of every basis, all models compute the same input-to-logit function; only
their internal representations differ. That makes representational
distance between two models a clean function of their type separation
while the functional metrics collapse to ties.

Each model's test set puts its faulty rows on "fault atoms": fixed latent
points strung along a line parameterised by the same type axis. A model
samples the atoms inside a window around its own position, so two models
share atoms (and therefore coverage sections and fault clusters) exactly
to the degree that their positions are close. Property overlap ends up a
noisy monotone function of representational similarity, which is the
planted relationship the offline phase is supposed to find.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import OutOfRange
from .workspace import Workspace, load_workspace, write_workspace

PLANTED_METRICS = ("pwcca", "cka", "ortho")

_NUM_CLASSES = 4
_GRID_STEP = 0.04  # atom spacing on the position axis
_SPREAD = 1.2  # half-width of a model's atom window
_JITTER = 16.0  # position jitter in units of seed_noise
_ATOM_SCALE = 0.55  # atom magnitude in units of sqrt(latent dim)
_SLOPE = 0.9  # how fast atoms move per unit of position
_BLOB = 0.01  # per-row noise around an atom, relative to its magnitude

# independent deterministic rng streams, all keyed off rng_seed
_STREAMS = {"basis": 0, "train": 1, "noise": 2, "positions": 3, "atoms": 4, "blobs": 5, "clean": 6}


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[stream]])


@dataclass(frozen=True)
class SynthConfig:
    n_types: int = 4
    seeds_per_type: int = 3
    feature_dim: int = 24
    n_train: int = 256
    n_test_per_set: int = 192
    type_basis_strength: float = 0.6
    seed_noise: float = 0.02
    fault_rate: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_types < 2:
            raise OutOfRange("need at least 2 model types")
        if self.seeds_per_type < 2:
            raise OutOfRange("need at least 2 seeds per type")
        if self.feature_dim < 4 or self.feature_dim % 2:
            raise OutOfRange("feature_dim must be an even number >= 4")
        if not 0.0 <= self.type_basis_strength <= 1.0:
            raise OutOfRange("type_basis_strength outside [0, 1]")
        if not 0.0 < self.fault_rate < 1.0:
            raise OutOfRange("fault_rate outside (0, 1)")
        if self.fault_rate * self.n_test_per_set < 5:
            raise OutOfRange("config yields fewer than 5 expected faults per test set")
        if self.n_train < 4 * self.feature_dim:
            raise OutOfRange("n_train must be at least 4x feature_dim")
        if self.seed_noise < 0:
            raise OutOfRange("seed_noise must be non-negative")


def _latent_dim(config: SynthConfig) -> int:
    # twice the feature width: projections stay tall, so no model's basis
    # can be an invertible transform of another's
    return 2 * config.feature_dim


def _positions(config: SynthConfig) -> np.ndarray:
    """(n_types, seeds_per_type) model positions: type index plus a small
    seed jitter that vanishes with seed_noise."""
    rng = _rng(config.rng_seed, "positions")
    jitter = rng.uniform(-0.5, 0.5, size=(config.n_types, config.seeds_per_type))
    return np.arange(config.n_types)[:, None] + config.seed_noise * _JITTER * jitter


def _angle(config: SynthConfig, position):
    return np.asarray(position) * (math.pi / 2) / (config.n_types - 1)


def _atom_grid(config: SynthConfig) -> np.ndarray:
    lo = -_SPREAD
    hi = (config.n_types - 1) + _SPREAD
    count = int(math.floor((hi - lo) / _GRID_STEP)) + 1
    return lo + np.arange(count) * _GRID_STEP


def _bases(config: SynthConfig):
    """Orthonormal blocks of the latent space plus the shared label map."""
    d = _latent_dim(config)
    f = config.feature_dim
    half = f // 2
    rng = _rng(config.rng_seed, "basis")
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    shared = q[:, :f]
    rot_a = q[:, f : f + half]
    rot_b = q[:, f + half :]
    # truth lives in the first half of the shared block, which no model's
    # noise ever touches: every model realises the exact same function
    g_head = rng.normal(size=(half, _NUM_CLASSES))
    truth = shared[:, :half] @ g_head
    return shared, rot_a, rot_b, truth


def _weights(config: SynthConfig, bases, angle: float, noise: np.ndarray) -> np.ndarray:
    shared, rot_a, rot_b, _ = bases
    half = config.feature_dim // 2
    w = shared.copy()
    w[:, half:] += config.type_basis_strength * (
        math.cos(angle) * rot_a + math.sin(angle) * rot_b
    )
    # normalized so one unit of seed_noise moves a basis column about as
    # far as one unit of angle does; keeps seed ordering visible to metrics
    w[:, half:] += config.seed_noise / math.sqrt(w.shape[0]) * noise
    return w


def _atom_points(config: SynthConfig, grid: np.ndarray, shared: np.ndarray) -> np.ndarray:
    """(n_atoms, d) latent centers strung along a line over the type axis.

    A line keeps every neuron's activation linear in the position, so the
    coverage sections of a window form per-neuron intervals and the overlap
    between two windows shrinks linearly with their separation. The line
    lives in the shared basis span with equal-magnitude coordinates: every
    neuron of every model sees the same activation slope, and the extreme
    atoms stay inside the bands fitted on training data by a margin that
    holds per neuron, not just on average."""
    f = config.feature_dim
    d = _latent_dim(config)
    rng = _rng(config.rng_seed, "atoms")
    base = shared @ (rng.choice([-1.0, 1.0], size=f) / math.sqrt(f))
    along = shared @ (rng.choice([-1.0, 1.0], size=f) / math.sqrt(f))
    scale = _ATOM_SCALE * math.sqrt(d)
    centered = grid - (config.n_types - 1) / 2
    return scale * (base + _SLOPE * centered[:, None] * along)


def _window(grid: np.ndarray, position: float) -> np.ndarray:
    return np.flatnonzero(np.abs(grid - position) <= _SPREAD)


def _model_ids(config: SynthConfig):
    return [
        (f"t{t}_s{s}", t, s)
        for t in range(config.n_types)
        for s in range(config.seeds_per_type)
    ]


def plant_description(config: SynthConfig) -> dict:
    """Ground truth behind a generated workspace: type proximities, model
    positions, and which atoms and types each test set draws faults from."""
    positions = _positions(config)
    grid = _atom_grid(config)
    types = np.arange(config.n_types)
    proximity = np.abs(types[:, None] - types[None, :]).astype(float)
    testsets = {}
    for mid, t, s in _model_ids(config):
        pos = float(positions[t, s])
        atom_ids = [int(i) for i in _window(grid, pos)]
        fault_types = [int(u) for u in types if abs(u - pos) <= _SPREAD]
        testsets[f"ts_{mid}"] = {
            "origin_model": mid,
            "atom_ids": atom_ids,
            "fault_type_ids": fault_types,
        }
    return {
        "config": asdict(config),
        "type_proximity": proximity.tolist(),
        "positions": {mid: float(positions[t, s]) for mid, t, s in _model_ids(config)},
        "atom_grid": {
            "lo": float(grid[0]),
            "spacing": _GRID_STEP,
            "count": int(grid.size),
            "spread": _SPREAD,
        },
        "testsets": testsets,
        "planted_metrics": list(PLANTED_METRICS),
    }


def generate_benchmark(config: SynthConfig, out_dir) -> Workspace:
    """Write a complete workspace (plus plant.json ground truth) under
    out_dir and return it loaded. Byte-identical for a given rng_seed."""
    bases = _bases(config)
    truth = bases[3]
    positions = _positions(config)
    grid = _atom_grid(config)
    atoms = _atom_points(config, grid, bases[0])
    ids = _model_ids(config)
    d = _latent_dim(config)

    x_train = _rng(config.rng_seed, "train").normal(size=(config.n_train, d))
    train_labels = np.argmax(x_train @ truth, axis=1).astype(np.int64)

    noise_rng = _rng(config.rng_seed, "noise")
    weights = {}
    heads = {}
    for mid, t, s in ids:
        noise = noise_rng.normal(size=(d, config.feature_dim // 2))
        w = _weights(config, bases, float(_angle(config, positions[t, s])), noise)
        weights[mid] = w
        heads[mid] = np.linalg.pinv(w) @ truth

    # test rows live in latent space; each model sees them through its own basis
    n_fault = round(config.fault_rate * config.n_test_per_set)
    n_clean = config.n_test_per_set - n_fault
    blob_rng = _rng(config.rng_seed, "blobs")
    clean_rng = _rng(config.rng_seed, "clean")
    scale = _ATOM_SCALE * math.sqrt(d)
    test_latents = {}
    test_labels = {}
    for mid, t, s in ids:
        window = _window(grid, float(positions[t, s]))
        picks = window[np.arange(n_fault) % window.size]
        faulty = atoms[picks] + _BLOB * scale * blob_rng.normal(size=(n_fault, d))
        clean = clean_rng.normal(size=(n_clean, d))
        rows = np.vstack([faulty, clean])
        true_class = np.argmax(rows @ truth, axis=1)
        labels = true_class.copy()
        labels[:n_fault] = (labels[:n_fault] + 1) % _NUM_CLASSES  # planted faults
        test_latents[f"ts_{mid}"] = rows
        test_labels[f"ts_{mid}"] = labels.astype(np.int64)

    arrays = {}
    model_specs = []
    testset_specs = []
    for mid, t, s in ids:
        tsid = f"ts_{mid}"
        arrays[f"{tsid}_labels.gmx"] = test_labels[tsid].reshape(-1, 1)
        testset_specs.append({"id": tsid, "origin_model": mid, "labels": f"{tsid}_labels.gmx"})
    for mid, t, s in ids:
        w = weights[mid]
        h = heads[mid]
        feats = x_train @ w
        arrays[f"{mid}_train_features.gmx"] = feats.astype(np.float32)
        arrays[f"{mid}_train_logits.gmx"] = (feats @ h).astype(np.float32)
        arrays[f"{mid}_train_labels.gmx"] = train_labels.reshape(-1, 1)
        eval_map = {}
        for other, _, _ in ids:
            tsid = f"ts_{other}"
            ev = test_latents[tsid] @ w
            arrays[f"{mid}_{tsid}_features.gmx"] = ev.astype(np.float32)
            arrays[f"{mid}_{tsid}_logits.gmx"] = (ev @ h).astype(np.float32)
            eval_map[tsid] = {
                "features": f"{mid}_{tsid}_features.gmx",
                "logits": f"{mid}_{tsid}_logits.gmx",
            }
        model_specs.append(
            {
                "id": mid,
                "model_type": f"t{t}",
                "seed": s,
                "role": "reference",
                "train_features": f"{mid}_train_features.gmx",
                "train_logits": f"{mid}_train_logits.gmx",
                "train_labels": f"{mid}_train_labels.gmx",
                "eval": eval_map,
            }
        )

    write_workspace(out_dir, _NUM_CLASSES, model_specs, testset_specs, arrays)
    plant = plant_description(config)
    (Path(out_dir) / "plant.json").write_text(
        json.dumps(plant, indent=2, sort_keys=True) + "\n"
    )
    return load_workspace(out_dir)
