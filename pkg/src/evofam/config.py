"""Text configuration for operators and weights (TOML, validated against a JSON schema)."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InvalidArgument
from .operator_spec import CoefficientPath, OperatorSpec
from .weighted_norms import WeightSpec


def schema() -> dict:
    text = resources.files("evofam").joinpath("schemas/operator_spec.schema.json").read_text()
    return json.loads(text)


@dataclass
class Config:
    spec: OperatorSpec
    weights: dict = field(default_factory=dict)
    name: str = ""


def _matrix(flat, N, where):
    if len(flat) != N * N:
        raise InvalidArgument(f"{where}: expected {N * N} entries (row-major), got {len(flat)}")
    return np.asarray(flat, dtype=float).reshape(N, N)


def _weight(entry: dict) -> WeightSpec:
    entry = dict(entry)
    if entry.pop("kind") == "tabulated":
        return WeightSpec.tabulated(entry["values"], entry.get("lo", -1.0), entry.get("hi", 1.0))
    p = entry.pop("p", None)
    return WeightSpec("power", entry.get("gamma", 0.0), entry.get("center", 0.0), entry.get("dim", 1),
                      entry.get("scale", 1.0), intended_p=p)


def from_dict(data: dict) -> Config:
    """Build a Config from parsed configuration data."""
    try:
        jsonschema.validate(data, schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise InvalidArgument(f"invalid configuration at '{path}': {exc.message}") from None
    N = data["N"]
    coeffs = {}
    for i, c in enumerate(data["coefficients"]):
        where = f"coefficients[{i}]"
        segs = [_matrix(s, N, where) for s in c["segments"]]
        if "segments_imag" in c:
            if len(c["segments_imag"]) != len(segs):
                raise InvalidArgument(f"{where}: segments_imag must match segments")
            segs = [s + 1j * _matrix(im, N, where) for s, im in zip(segs, c["segments_imag"])]
        path = CoefficientPath(tuple(c.get("breakpoints", ())), np.stack(segs), c.get("K"))
        key = (tuple(c["alpha"]), tuple(c["beta"]))
        coeffs[key] = coeffs[key] + path if key in coeffs else path
    spec = OperatorSpec(data["m"], data["d"], N, coeffs, data.get("divergence_form", False))
    weights = {k: _weight(v) for k, v in data.get("weights", {}).items()}
    return Config(spec, weights, data.get("name", ""))


def loads(text: str) -> Config:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidArgument(f"malformed TOML: {exc}") from None
    return from_dict(data)


def load(path) -> Config:
    return loads(Path(path).read_text())


def _fmt(values) -> str:
    return "[" + ", ".join(repr(float(v)) for v in values) + "]"


def dumps(spec: OperatorSpec, name: str = "") -> str:
    """TOML text that ``loads`` turns back into an equivalent spec."""
    lines = []
    if name:
        lines.append(f'name = "{name}"')
    lines += [f"m = {spec.m}", f"d = {spec.d}", f"N = {spec.N}",
              f"divergence_form = {str(spec.divergence_form).lower()}", ""]
    for (alpha, beta), path in spec.coeffs.items():
        lines.append("[[coefficients]]")
        lines.append(f"alpha = {list(alpha)}")
        lines.append(f"beta = {list(beta)}")
        lines.append(f"breakpoints = {_fmt(path.breakpoints)}")
        lines.append("segments = [" + ", ".join(_fmt(s.real.ravel()) for s in path.segments) + "]")
        if np.any(path.segments.imag):
            lines.append("segments_imag = [" + ", ".join(_fmt(s.imag.ravel()) for s in path.segments) + "]")
        lines.append("")
    return "\n".join(lines)
