#!/usr/bin/env python3
"""
Run Configuration
Boundary-unit parameters for every command, loaded from `key = value` files
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, fields
from typing import Any, Dict, Optional, Tuple

import psutil

from src.core.constants import (
    CRYSTAL_INDEX,
    CRYSTAL_LENGTH_MM,
    DEFAULT_BIN_WIDTH_PS,
    DEFAULT_WINDOW_NS,
    OUTPUT_COUPLER_TRANSMITTANCE,
    REFERENCE_FITS,
    TWO_PI,
)
from src.core.correlation_model import CoincidenceModelParams, JitterModel, OpoParams
from src.core.errors import InvalidParamsError, ParseError
from src.core.pair_simulator import DetectorConfig, EmissionConfig, TacConfig

logger = logging.getLogger(__name__)

_REFERENCE = REFERENCE_FITS["13uW"]


@dataclass
class RunConfig:
    """Parameters of a run in ns, ps, MHz (ordinary frequency) and pairs/s

    Defaults reproduce the 13 uW data set. pair_rate is the rate at unit pump
    scale; the emitted rate is pair_rate * pump_scale. C2 = 0.067 fixes the
    pair rate, so the peak height is reached with a low efficiency and a long
    acquisition, keeping the stop rate times the TAC window near 1.5%.
    """

    # cavity and comb model
    tau_f_ns: float = _REFERENCE["tau_f_ns"]
    resolving_time_ps: float = _REFERENCE["resolving_time_ps"]
    omega_c_mhz: float = _REFERENCE["omega_c_mhz"]
    escape_efficiency: float = 0.70
    threshold_ratio: float = 1e-3
    n_modes_half: int = 50
    tau0_ns: float = _REFERENCE["tau0_ns"]
    c1: float = _REFERENCE["c1"]
    c2: float = _REFERENCE["c2"]

    # emission and detection
    pair_rate: float = 2.9e6
    pump_scale: float = 1.0
    duration_s: float = 23.0
    efficiency: float = 0.1

    # TAC / MCA
    bin_width_ps: float = DEFAULT_BIN_WIDTH_PS
    window_start_ns: float = DEFAULT_WINDOW_NS[0]
    window_stop_ns: float = DEFAULT_WINDOW_NS[1]

    # fitting
    weights: str = "poisson"
    frozen: str = ""
    max_iter: int = 200
    n_window: int = 1

    # loss
    output_coupler: float = OUTPUT_COUPLER_TRANSMITTANCE
    crystal_mm: float = CRYSTAL_LENGTH_MM
    crystal_index: float = CRYSTAL_INDEX

    # run control
    seed: int = 0
    workers: int = 1
    n_slices: int = 64

    @classmethod
    def field_types(cls) -> Dict[str, type]:
        return {f.name: f.type for f in fields(cls)}

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        """Parse `key = value` lines; '#' starts a comment, unknown keys are errors"""
        types = cls.field_types()
        values: Dict[str, Any] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", line=number)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ParseError(f"unknown key '{key}'", line=number, field=key,
                                 hint=f"valid keys: {', '.join(types)}")
            if key in values:
                raise ParseError(f"duplicate key '{key}'", line=number, field=key)
            values[key] = _convert(value, types[key], number, key)
        return cls(**values)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as f:
            config = cls.loads(f.read())
        logger.debug("loaded run config from %s", path)
        return config

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())

    def with_overrides(self, **overrides: Optional[Any]) -> "RunConfig":
        """Copy with every non-None override applied (CLI flags beat the file)"""
        changes = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(changes) - set(self.field_types())
        if unknown:
            raise InvalidParamsError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        positive = ("tau_f_ns", "resolving_time_ps", "omega_c_mhz", "pair_rate", "pump_scale",
                    "duration_s", "bin_width_ps", "c1", "output_coupler", "max_iter", "n_slices")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidParamsError(f"{name} must be > 0, got {getattr(self, name)}", field=name)
        if self.window_stop_ns <= self.window_start_ns:
            raise InvalidParamsError("window_stop_ns must exceed window_start_ns", field="window_stop_ns")
        if self.workers < 0:
            raise InvalidParamsError("workers must be >= 0 (0 picks the physical core count)", field="workers")
        if self.weights not in ("poisson", "uniform"):
            raise InvalidParamsError(f"weights must be 'poisson' or 'uniform', got '{self.weights}'",
                                     field="weights")

    def resolved_workers(self) -> int:
        """Worker threads for the simulator; 0 means one per physical core"""
        if self.workers > 0:
            return self.workers
        try:
            cores = psutil.cpu_count(logical=False)
        except Exception:
            cores = None
        return cores or os.cpu_count() or 1

    def frozen_names(self) -> Tuple[str, ...]:
        return tuple(name.strip() for name in self.frozen.split(",") if name.strip())

    def to_opo_params(self) -> OpoParams:
        return OpoParams.from_cavity(
            omega_c=TWO_PI * self.omega_c_mhz * 1e6,
            tau_F=self.tau_f_ns * 1e-9,
            escape_efficiency=self.escape_efficiency,
            threshold_ratio=self.threshold_ratio,
            n_modes_half=self.n_modes_half,
        )

    def to_jitter(self) -> JitterModel:
        return JitterModel(t_r=self.resolving_time_ps * 1e-12)

    def to_model_params(self) -> CoincidenceModelParams:
        return CoincidenceModelParams(
            tau_F=self.tau_f_ns * 1e-9,
            t_r=self.resolving_time_ps * 1e-12,
            omega_c=TWO_PI * self.omega_c_mhz * 1e6,
            c1=self.c1,
            c2=self.c2,
            tau0=self.tau0_ns * 1e-9,
        )

    def to_emission(self) -> EmissionConfig:
        return EmissionConfig(
            pair_rate=self.pair_rate * self.pump_scale,
            opo=self.to_opo_params(),
            duration=self.duration_s,
            seed=self.seed,
        )

    def to_detector(self) -> DetectorConfig:
        return DetectorConfig(jitter=self.to_jitter(), efficiency=self.efficiency)

    def to_tac(self) -> TacConfig:
        return TacConfig(
            electronic_delay=self.tau0_ns * 1e-9,
            bin_width=self.bin_width_ps * 1e-12,
            window=(self.window_start_ns * 1e-9, self.window_stop_ns * 1e-9),
        )


def _convert(value: str, kind: type, line: int, key: str) -> Any:
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ParseError(f"cannot read '{value}' as {kind.__name__}", line=line, field=key)
