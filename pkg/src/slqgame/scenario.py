"""Scenario files (JSON) and the built-in preset catalog."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources

import jsonschema
import numpy as np

from .errors import ConfigError, DimensionMismatch, UnknownPreset
from .model import CoefficientPath, GameSpec, TimeGrid

DYNAMICS = ("A", "B1", "B2", "C", "D1", "D2", "Ctilde", "C1", "C2", "C3")
COSTS_PATHS = ("Q1", "N1", "Q2", "N2")


def load_schema():
    with resources.files("slqgame").joinpath("scenario.schema.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _scalar_smoke():
    return {
        "name": "scalar-smoke",
        "description": "One-dimensional game with a fully informative observation of the signal; fast certification instance.",
        "dims": {"n": 1, "m1": 1, "m2": 1},
        "grid": {"T": 1.0, "n_steps": 1000},
        "dynamics": {"A": [[0.2]], "B1": [[1.0]], "B2": [[0.5]], "C": [[0.3]], "D1": [[0.0]], "D2": [[0.4]],
                     "Ctilde": [[0.5]], "C1": [[-0.5]], "C2": [[0.0]], "C3": [[0.8]]},
        "observation": {"h": [[1.0]]},
        "costs": {"Q1": [[1.0]], "N1": [[1.0]], "G1": [[1.0]], "Q2": [[1.0]], "N2": [[1.0]], "G2": [[0.5]]},
        "initial": {"x0": [1.0], "xtilde0": [0.5]},
        "options": {"allow_nonsymmetric_dynamics": False},
    }


def _newsvendor():
    return {
        "name": "newsvendor-lq",
        "description": ("LQ analogue of a continuous-time newsvendor: x is the retailer's inventory gap, the "
                        "follower orders, the supplier (leader) pushes stock, and a demand signal is observed with noise. "
                        "Holding cost weight grows linearly over the season. Inspired by, not an implementation of, "
                        "the nonlinear newsvendor model."),
        "dims": {"n": 1, "m1": 1, "m2": 1},
        "grid": {"T": 1.0, "n_steps": 500},
        "dynamics": {"A": [[-0.1]], "B1": [[1.0]], "B2": [[-0.5]], "C": [[0.1]], "D1": [[0.0]], "D2": [[0.2]],
                     "Ctilde": [[0.3]], "C1": [[-0.8]], "C2": [[0.4]], "C3": [[0.5]]},
        "observation": {"h": [[1.5]]},
        "costs": {"Q1": {"interp": "linear", "samples": [[[1.0]], [[2.0]]]}, "N1": [[0.5]], "G1": [[1.0]],
                  "Q2": [[0.5]], "N2": [[1.0]], "G2": [[0.2]]},
        "initial": {"x0": [0.5], "xtilde0": [0.2]},
        "options": {"allow_nonsymmetric_dynamics": False},
    }


def _advertising():
    return {
        "name": "advertising-lq",
        "description": ("LQ analogue of cooperative advertising: the state is (goodwill, sales deviation), the "
                        "retailer (follower) advertises locally with a noisy effect, the manufacturer (leader) uses two "
                        "channels. Inspired by, not an implementation of, the nonlinear advertising and pricing model."),
        "dims": {"n": 2, "m1": 1, "m2": 2},
        "grid": {"T": 1.0, "n_steps": 500},
        "dynamics": {"A": [[-0.3, 0.1], [0.1, -0.2]], "B1": [[1.0], [0.3]], "B2": [[0.5, 0.0], [0.0, 0.4]],
                     "C": [[0.1, 0.0], [0.0, 0.05]], "D1": [[0.1], [0.0]], "D2": [[0.1, 0.0], [0.0, 0.1]],
                     "Ctilde": [[0.2], [0.1]], "C1": [[-0.5, 0.1], [0.1, -0.4]], "C2": [[0.0], [0.0]],
                     "C3": [[0.5], [0.3]]},
        "observation": {"h": [[1.0], [0.5]]},
        "costs": {"Q1": [[1.0, 0.0], [0.0, 0.5]], "N1": [[1.0]], "G1": [[0.5, 0.0], [0.0, 0.5]],
                  "Q2": [[0.8, 0.0], [0.0, 1.0]], "N2": [[1.0, 0.0], [0.0, 1.5]], "G2": [[0.3, 0.0], [0.0, 0.3]]},
        "initial": {"x0": [1.0, 0.5], "xtilde0": [0.3, -0.2]},
        "options": {"allow_nonsymmetric_dynamics": False},
    }


def _complete_info():
    return {
        "name": "complete-info",
        "description": ("Observation carries no signal (h = 0) and the signal and the state have no observation "
                        "noise, so every conditional expectation is a deterministic mean."),
        "dims": {"n": 2, "m1": 1, "m2": 2},
        "grid": {"T": 1.0, "n_steps": 500},
        "dynamics": {"A": [[-0.2, 0.1], [0.1, 0.1]], "B1": [[1.0], [0.5]], "B2": [[0.4, 0.1], [0.0, 0.6]],
                     "C": [[0.2, 0.0], [0.0, 0.1]], "D1": [[0.0], [0.0]], "D2": [[0.2, 0.0], [0.1, 0.3]],
                     "Ctilde": [[0.0], [0.0]], "C1": [[-0.5, 0.0], [0.0, -0.5]], "C2": [[0.0], [0.0]],
                     "C3": [[0.0], [0.0]]},
        "observation": {"h": [[0.0], [0.0]]},
        "costs": {"Q1": [[1.0, 0.2], [0.2, 0.8]], "N1": [[1.0]], "G1": [[0.5, 0.0], [0.0, 0.5]],
                  "Q2": [[0.6, 0.0], [0.0, 1.0]], "N2": [[1.0, 0.2], [0.2, 1.2]], "G2": [[0.4, 0.1], [0.1, 0.3]]},
        "initial": {"x0": [1.0, -0.5], "xtilde0": [0.0, 0.0]},
        "options": {"allow_nonsymmetric_dynamics": False},
    }


PRESETS = {"scalar-smoke": _scalar_smoke, "newsvendor-lq": _newsvendor,
           "advertising-lq": _advertising, "complete-info": _complete_info}


def preset_names():
    return list(PRESETS)


def preset_document(name) -> dict:
    try:
        return PRESETS[name]()
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def emit_preset(name, path):
    text = dumps(preset_document(name))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return sha256_text(text)


def sha256_text(text) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _path(value, T, name):
    if isinstance(value, dict):
        return CoefficientPath(np.asarray(value["samples"], dtype=float), T, value.get("interp", "linear"))
    a = np.asarray(value, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {a.shape}")
    return CoefficientPath(a, T)


def spec_from_document(doc) -> tuple[GameSpec, TimeGrid]:
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"scenario invalid at {where}: {e.message}") from None
    T = float(doc["grid"]["T"])
    grid = TimeGrid(T, int(doc["grid"]["n_steps"]))
    d = doc["dims"]
    kw = {}
    for name in DYNAMICS:
        kw[name] = _path(doc["dynamics"][name], T, name)
    kw["h"] = _path(doc["observation"]["h"], T, "h")
    for name in COSTS_PATHS:
        kw[name] = _path(doc["costs"][name], T, name)
    opts = doc.get("options", {})
    spec = GameSpec(n=d["n"], m1=d["m1"], m2=d["m2"],
                    G1=np.asarray(doc["costs"]["G1"], dtype=float), G2=np.asarray(doc["costs"]["G2"], dtype=float),
                    x0=np.asarray(doc["initial"]["x0"], dtype=float),
                    xtilde0=np.asarray(doc["initial"]["xtilde0"], dtype=float),
                    horizon_T=T, name=doc.get("name", "unnamed"),
                    allow_nonsymmetric_dynamics=bool(opts.get("allow_nonsymmetric_dynamics", False)), **kw)
    spec.check_dimensions()
    return spec, grid


def load_scenario(path):
    """Read, validate and build a scenario; returns (spec, grid, document, sha256 of the file)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e}") from None
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"scenario {path} is not valid JSON: {e}") from None
    spec, grid = spec_from_document(doc)
    return spec, grid, doc, hashlib.sha256(raw).hexdigest()


def preset(name, n_steps=None):
    """(spec, grid) for a preset, optionally on a different number of steps."""
    doc = copy.deepcopy(preset_document(name))
    if n_steps is not None:
        doc["grid"]["n_steps"] = int(n_steps)
    return spec_from_document(doc)
