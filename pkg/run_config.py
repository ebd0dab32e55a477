#!/usr/bin/env python3
"""
Run Configuration for capmap
Layers option values from dataclass defaults, a JSON5 preset file and
explicit command-line flags (later layers win), and validates the result.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple

import json5

from adaptive import DOMAIN_MODES, PipelineOptions
from capmap_errors import ArgumentError

logger = logging.getLogger(__name__)

PRESETS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "presets")


@dataclass
class RunConfig:
    """Every option a capmap run can take."""

    command: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    report: Optional[str] = None
    lam: float = 0.2
    r_lo: float = 0.25
    r_hi: float = 4.0
    rtol: float = 0.01
    omt_tol_search: float = 1e-3
    omt_tol_final: float = 1e-4
    omt_method: str = "newton"
    omt_diagnostics: Optional[str] = None
    rho_side: float = 1.5
    rho_diag: float = 1.5
    axis: Optional[Tuple[float, float, float]] = None
    domain_mode: str = "adaptive"
    fixed_radius: Optional[float] = None
    energy_measure: str = "planar"
    normalization: str = "exact"
    order: int = 4
    seed: int = 0
    strict: bool = False

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        return cls().merged(values)

    def merged(self, values: Mapping[str, Any]) -> "RunConfig":
        """Copy with the given keys replaced; None values are ignored."""
        unknown = sorted(set(values) - set(self.keys()))
        if unknown:
            raise ArgumentError(f"unknown option(s): {', '.join(unknown)}")
        data = asdict(self)
        data.update({k: v for k, v in values.items() if v is not None})
        if data.get("axis") is not None:
            data["axis"] = tuple(float(c) for c in data["axis"])
        return RunConfig(**data)

    def validate(self) -> "RunConfig":
        self.pipeline_options()
        if self.order < 0:
            raise ArgumentError(f"order must be >= 0, got {self.order}")
        if self.domain_mode not in DOMAIN_MODES:
            raise ArgumentError(f"domain mode must be one of {DOMAIN_MODES}")
        if self.normalization not in ("exact", "first-power"):
            raise ArgumentError(f"normalization must be 'exact' or 'first-power', got '{self.normalization}'")
        return self

    def pipeline_options(self) -> PipelineOptions:
        return PipelineOptions(
            lam=self.lam, r_bounds=(self.r_lo, self.r_hi), rtol=self.rtol,
            omt_tol_search=self.omt_tol_search, omt_tol_final=self.omt_tol_final,
            omt_method=self.omt_method, rho_side=self.rho_side, rho_diag=self.rho_diag,
            axis=self.axis, domain_mode=self.domain_mode, fixed_radius=self.fixed_radius,
            energy_measure=self.energy_measure, normalization=self.normalization,
            omt_diagnostics=self.omt_diagnostics,
        ).validate()


class PresetManager:
    """Finds and loads the JSON5 presets shipped in presets/."""

    def __init__(self, presets_dir: str = PRESETS_DIR):
        self.presets_dir = presets_dir
        self.available_presets = self._discover_presets()

    def _discover_presets(self) -> Dict[str, str]:
        presets = {}
        if os.path.isdir(self.presets_dir):
            for name in sorted(os.listdir(self.presets_dir)):
                if name.endswith((".json5", ".json")):
                    presets[os.path.splitext(name)[0]] = os.path.join(self.presets_dir, name)
        return presets

    def resolve(self, name_or_path: str) -> str:
        if os.path.exists(name_or_path):
            return name_or_path
        if name_or_path in self.available_presets:
            return self.available_presets[name_or_path]
        raise ArgumentError(f"preset not found: {name_or_path} (available: {', '.join(self.available_presets)})")

    def load(self, name_or_path: str) -> Dict[str, Any]:
        path = self.resolve(name_or_path)
        try:
            with open(path, "r") as f:
                values = json5.load(f)
        except ValueError as e:
            raise ArgumentError(f"preset {path} is not valid JSON5: {e}")
        if not isinstance(values, dict):
            raise ArgumentError(f"preset {path} must hold an object")
        logger.debug(f"Loaded preset {path}: {sorted(values)}")
        return values


def load_config(preset: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the preset (if any), then explicit overrides."""
    config = RunConfig()
    if preset:
        config = config.merged(PresetManager().load(preset))
    if overrides:
        config = config.merged(overrides)
    return config.validate()
