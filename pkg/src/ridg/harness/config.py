"""Run configuration: flat ``key = value`` manifests with CLI overrides."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Optional

from ..errors import ConfigError
from ..law import PROBLEMS, get_problem
from ..predictor import BACKENDS
from ..stepper import SCHEMES

__all__ = ["RunConfig", "parse_text", "load_config", "serialize", "normalize", "apply_env"]


def _ints(v) -> tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    parts = [p for p in str(v).replace("x", ",").split(",") if p.strip()]
    return tuple(int(p) for p in parts)


@dataclass(frozen=True)
class RunConfig:
    problem: str = "adv1d"
    scheme: str = "ridg"
    mdeg: int = 3
    nu: float = 0.9
    mesh: tuple = (50,)
    final_time: Optional[float] = None
    newton_tol: float = 1e-11
    newton_max_iter: int = 20
    backend: str = "qqf"
    tasks: tuple = (1,)
    threads: int = 1
    output: str = "."
    seed: int = 0

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError("problem", f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)}")
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"must be one of {SCHEMES}, got {self.scheme!r}")
        if int(self.mdeg) != self.mdeg or self.mdeg < 1:
            raise ConfigError("mdeg", f"must be an integer >= 1, got {self.mdeg!r}")
        if not (math.isfinite(self.nu) and self.nu > 0):
            raise ConfigError("nu", f"must be positive, got {self.nu}")
        if self.final_time is not None and not (math.isfinite(self.final_time) and self.final_time > 0):
            raise ConfigError("final_time", f"must be positive, got {self.final_time}")
        if not self.newton_tol > 0:
            raise ConfigError("newton_tol", f"must be positive, got {self.newton_tol}")
        if self.newton_max_iter < 1:
            raise ConfigError("newton_max_iter", f"must be >= 1, got {self.newton_max_iter}")
        if self.backend not in BACKENDS:
            raise ConfigError("backend", f"must be one of {BACKENDS}, got {self.backend!r}")
        if not self.mesh or any(n < 1 for n in self.mesh):
            raise ConfigError("mesh", f"cells per axis must be >= 1, got {self.mesh}")
        if not self.tasks or any(n < 1 for n in self.tasks):
            raise ConfigError("tasks", f"tasks per axis must be >= 1, got {self.tasks}")
        if self.threads < 1:
            raise ConfigError("threads", f"must be >= 1, got {self.threads}")

    @property
    def dim(self) -> int:
        return get_problem(self.problem).dim

    def mesh_cells(self) -> tuple[int, ...]:
        """Cells per axis; a single value is repeated over all axes."""
        return self._expand("mesh", self.mesh)

    def task_grid(self) -> tuple[int, ...]:
        return self._expand("tasks", self.tasks)

    def _expand(self, name, v):
        if len(v) == 1:
            return v * self.dim
        if len(v) != self.dim:
            raise ConfigError(name, f"expected 1 or {self.dim} entries, got {len(v)}")
        return v


_CONVERT = {
    "problem": str, "scheme": str, "backend": str, "output": str,
    "mdeg": int, "newton_max_iter": int, "threads": int, "seed": int,
    "nu": float, "newton_tol": float,
    "final_time": lambda v: None if str(v).strip().lower() in ("", "none", "default") else float(v),
    "mesh": _ints, "tasks": _ints,
}


def coerce(values: Mapping[str, Any]) -> dict:
    out = {}
    for k, v in values.items():
        key = k.strip().replace("-", "_")
        if key not in _CONVERT:
            raise ConfigError(key, "unknown configuration key")
        try:
            out[key] = _CONVERT[key](v) if isinstance(v, str) or key in ("mesh", "tasks") else v
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"cannot parse value {v!r}: {exc}") from None
    return out


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return coerce(values)


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the manifest file, then overrides (highest precedence)."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_text(fh.read()))
    if overrides:
        values.update(coerce({k: v for k, v in overrides.items() if v is not None}))
    return RunConfig(**values)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n" for f in fields(cfg))


def normalize(text: str) -> str:
    """Canonical form of a manifest: every key, fixed order, canonical values."""
    return serialize(RunConfig(**parse_text(text)))


def apply_env(cfg: RunConfig, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Apply RIDG_OUTPUT_DIR and RIDG_THREADS when set."""
    env = os.environ if environ is None else environ
    upd = {}
    if env.get("RIDG_OUTPUT_DIR"):
        upd["output"] = env["RIDG_OUTPUT_DIR"]
    if env.get("RIDG_THREADS"):
        upd.update(coerce({"threads": env["RIDG_THREADS"]}))
    return replace(cfg, **upd) if upd else cfg
