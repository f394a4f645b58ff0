"""Settings (YAML) and problem reproduction records (TOML)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any

import tomlkit
import yaml

from varfilt.errors import ArgumentError
from varfilt.export import write_atomic
from varfilt.filters import CorrX, HinfConfig, L2Config
from varfilt.model import ProblemSpec, check_seed

THREADS_ENV = "VARFILT_THREADS"
PROBLEM_TABLE = "problem"


# ── Settings (YAML) ─────────────────────────────────────────────

def _load_yaml(path: Path) -> dict:
    """Load a YAML file and return a dict (empty dict on error)."""
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
        return data if isinstance(data, dict) else {}
    except Exception:
        return {}


def _deep_merge(base: dict, override: dict) -> dict:
    """Recursively merge *override* into *base* (returns a new dict)."""
    result = dict(base)
    for key, val in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(val, dict):
            result[key] = _deep_merge(result[key], val)
        else:
            result[key] = val  # lists and scalars are replaced
    return result


def load_settings(path: Path | None = None) -> dict[str, Any]:
    """Load ``default_settings.yaml`` and deep-merge an optional user file over it."""
    data = _load_yaml(Path(__file__).parent / "default_settings.yaml")
    if path is not None:
        override = _load_yaml(Path(path))
        if override:
            data = _deep_merge(data, override)
    return data


def _section(settings: dict[str, Any], name: str) -> dict[str, Any]:
    section = settings.get(name, {})
    return section if isinstance(section, dict) else {}


def hinf_config_from_settings(settings: dict[str, Any], **overrides: Any) -> HinfConfig:
    """HinfConfig from the ``hinf`` section; non-None keyword overrides win."""
    section = _section(settings, "hinf")
    values = {
        "gamma_eps": float(section.get("gamma_eps", 1e-3)),
        "corr_x": section.get("corr_x", CorrX.NONE.value),
        "diagonalize_posterior": bool(section.get("diagonalize_posterior", True)),
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return HinfConfig(**values)


def l2_config_from_settings(settings: dict[str, Any]) -> L2Config:
    section = _section(settings, "l2")
    tol = section.get("tol")
    return L2Config(
        tol=None if tol is None else float(tol),
        max_iter=int(section.get("max_iter", 500)),
    )


def resolve_threads(explicit: int | None, settings: dict[str, Any]) -> int | None:
    """Worker count: explicit flag, else $VARFILT_THREADS, else settings; 0 means default."""
    if explicit is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if raw:
            try:
                explicit = int(raw)
            except ValueError:
                raise ArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        else:
            explicit = int(settings.get("threads", 0) or 0)
    if explicit < 0:
        raise ArgumentError(f"thread count must be >= 0, got {explicit}")
    return explicit or None


# ── Problem records (TOML) ──────────────────────────────────────

def dumps_problem(spec: ProblemSpec) -> str:
    """Serialize a problem to TOML. Floats keep full round-trip precision."""
    doc = tomlkit.document()
    doc.add(tomlkit.comment("varfilt problem record"))
    table = tomlkit.table()
    table.add("n", spec.n)
    table.add("horizon", spec.horizon)
    table.add("seed", spec.seed)
    table.add("input_var", spec.input_var)
    table.add("meas_var", spec.meas_var)
    table.add("prior_var", spec.prior_var)
    table.add("xbar", [float(v) for v in spec.xbar])
    table.add("prior_mean", [float(v) for v in spec.prior_mean])
    doc.add(PROBLEM_TABLE, table)
    return tomlkit.dumps(doc)


def loads_problem(text: str) -> ProblemSpec:
    try:
        doc = tomlkit.parse(text).unwrap()
    except Exception as exc:
        raise ArgumentError(f"not a valid problem record: {exc}") from exc
    table = doc.get(PROBLEM_TABLE)
    if not isinstance(table, dict):
        raise ArgumentError(f"problem record has no [{PROBLEM_TABLE}] table")
    try:
        return ProblemSpec(
            n=int(table["n"]),
            horizon=int(table["horizon"]),
            seed=check_seed(int(table["seed"])),
            input_var=float(table["input_var"]),
            meas_var=float(table["meas_var"]),
            prior_var=float(table["prior_var"]),
            xbar=[float(v) for v in table["xbar"]],
            prior_mean=[float(v) for v in table.get("prior_mean", [0.0] * int(table["n"]))],
        )
    except KeyError as exc:
        raise ArgumentError(f"problem record is missing {exc.args[0]!r}") from None


def save_problem(path: Path, spec: ProblemSpec) -> None:
    write_atomic(Path(path), dumps_problem(spec))


def load_problem(path: Path) -> ProblemSpec:
    return loads_problem(Path(path).read_text(encoding="utf-8"))
