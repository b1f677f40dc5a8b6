"""Frozen end-to-end scenarios: source streams, a shifted target, run settings.

A scenario is plain JSON so it can be copied, edited and rerun. The shipped
``drift`` scenario is the one the acceptance suite and the demos use.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .harness import RunConfig, ablate_on, pretrain_on
from .synth import DomainShift, StreamParams, generate_stream, shift_stream


def load_scenario(path=None) -> dict:
    """Read a scenario file; with no path, the shipped drift scenario."""
    if path is None:
        text = resources.files("bitta").joinpath("data/drift_scenario.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def run_config(scenario: dict, **overrides) -> RunConfig:
    return RunConfig(**{**scenario.get("run", {}), **overrides})


def source_streams(scenario: dict):
    params = StreamParams(**scenario["source"])
    return [generate_stream(params, s) for s in scenario["source_seeds"]]


def target_stream(scenario: dict):
    manifest, data = generate_stream(StreamParams(**scenario["target"]), scenario["target_seed"])
    return shift_stream(manifest, data, DomainShift(**scenario["shift"]), scenario["shift_seed"])


def run_scenario(scenario: dict, modes=("no-adapt", "priors", "bi-tta"), workers: int = 1):
    """Pre-train on the sources, then run ``modes`` on the target.

    Returns ``(timelines, params, pretrain_report)``.
    """
    cfg = run_config(scenario)
    params, report = pretrain_on(source_streams(scenario), cfg.net, cfg.pretrain, cfg.window, cfg.spatial)
    manifest, data = target_stream(scenario)
    timelines = ablate_on(params, cfg.net, manifest, data, cfg, modes=modes, workers=workers)
    return timelines, params, report
