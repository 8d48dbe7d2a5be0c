"""Run configuration loading and bit-stable CSV / timetag export.

Configs are YAML documents (JSON is accepted too, being a YAML subset for
our purposes, and is parsed with :mod:`json` when the suffix is ``.json``).
Validation is strict: unknown keys are rejected and every error is reported
with its field path and, for YAML input, the source line.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .analytics import TeleportModelParams
from .errors import DomainError
from .fock import NoiseParams
from .sequence import SequenceConfig, Timetags
from .sources import NvParams, WcsParams, p_de_from_g2

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "write_csv",
    "read_csv",
    "write_timetags",
    "read_timetags",
    "format_value",
]


class ConfigError(ValueError):
    """Schema violation; ``errors`` holds one human-readable line per problem."""

    def __init__(self, errors: Sequence[str], source: str = "config"):
        self.errors = list(errors)
        super().__init__(f"{source}: {len(self.errors)} error(s)\n" + "\n".join("  - " + e for e in self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NvSection(_Strict):
    p_nv: float = Field(gt=0, le=1)
    g2: float = Field(default=0.0, ge=0)
    p_de: float | None = Field(default=None, ge=0, le=1)

    def build(self) -> NvParams:
        p_de = p_de_from_g2(self.g2, self.p_nv) if self.p_de is None else self.p_de
        return NvParams(self.p_nv, self.g2, p_de)


class WcsSection(_Strict):
    mu: float | None = Field(default=None, ge=0)
    x: float | None = Field(default=None, ge=0)
    leak_epsilon: float = Field(default=0.0, ge=0, lt=1)
    theta: float = 0.0

    @model_validator(mode="after")
    def _one_of_mu_x(self):
        if (self.mu is None) == (self.x is None):
            raise ValueError("give exactly one of 'mu' or 'x' (x = mu / p_nv)")
        return self


class NoiseSection(_Strict):
    p_noise: float = Field(default=0.0, ge=0, le=1)


class SequenceSection(_Strict):
    bins_per_train: int = Field(default=10, gt=0)
    train_repetitions: int = Field(default=100, gt=0)
    bin_spacing: float = Field(default=500.0, gt=0)
    distinguishable_offset: float = Field(default=50.0, gt=0)
    coincidence_window: float = Field(default=30.0, gt=0)
    teleport_attempt_cap: int = Field(default=50, gt=0)
    herald_window_hw: float = Field(default=50.0, gt=0)
    herald_window_analysis: float = Field(default=20.0, gt=0)
    time_bin_separation: float = Field(default=300.0, gt=0)
    cr_pass_prob: float = Field(default=1.0, gt=0, le=1)


class OutputSection(_Strict):
    dir: str = "."
    prefix: str = ""
    timetags: bool = False


class RunConfig(_Strict):
    nv: NvSection
    wcs: WcsSection
    eta: float = Field(ge=0, le=1)
    noise: NoiseSection = NoiseSection()
    sequence: SequenceSection = SequenceSection()
    seed: int | None = Field(default=None, ge=0, lt=2**64)
    shots: int | None = Field(default=None, gt=0)
    correction: bool = True
    output: OutputSection = OutputSection()

    @property
    def mu(self) -> float:
        return self.wcs.mu if self.wcs.mu is not None else self.wcs.x * self.nv.p_nv

    def nv_params(self) -> NvParams:
        return self.nv.build()

    def wcs_params(self) -> WcsParams:
        return WcsParams(self.mu, self.wcs.leak_epsilon, self.wcs.theta)

    def noise_params(self) -> NoiseParams:
        return NoiseParams(self.noise.p_noise)

    def sequence_config(self) -> SequenceConfig:
        return SequenceConfig(**self.sequence.model_dump())

    def teleport_params(self) -> TeleportModelParams:
        return TeleportModelParams(self.nv_params(), self.wcs_params(), self.eta, self.noise.p_noise)


def _line_index(text: str) -> dict[tuple, int]:
    """Map field paths of a YAML document to 1-based source lines."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return {}
    out: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                out[p] = k.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, ())
    return out


def _format_errors(exc: ValidationError, lines: Mapping[tuple, int]) -> list[str]:
    items = []
    for err in exc.errors():
        loc = tuple(str(p) for p in err["loc"])
        path = ".".join(loc) or "<root>"
        line = None
        for n in range(len(loc), 0, -1):
            if loc[:n] in lines:
                line = lines[loc[:n]]
                break
        where = f"line {line}: " if line is not None else ""
        msg = err["msg"]
        if err["type"] == "missing":
            msg = "missing required field"
        elif err["type"] == "extra_forbidden":
            msg = "unknown key"
        items.append(f"{where}{path}: {msg}")
    return items


def parse_config(text: str, *, fmt: str = "yaml", source: str = "config") -> RunConfig:
    lines: dict[tuple, int] = {}
    try:
        if fmt == "json":
            data = json.loads(text) if text.strip() else None
        else:
            data = yaml.safe_load(text)
            lines = _line_index(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError([f"not parseable as {fmt}: {exc}"], source) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([f"top level must be a mapping, got {type(data).__name__}"], source)
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, lines), source) from None
    try:
        cfg.nv_params()
        cfg.wcs_params()
        cfg.sequence_config()
    except DomainError as exc:
        raise ConfigError([str(exc)], source) from None
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read: {exc}"], str(p)) from None
    fmt = "json" if p.suffix.lower() == ".json" else "yaml"
    return parse_config(text, fmt=fmt, source=str(p))


# --- CSV ---------------------------------------------------------------------


def format_value(v: Any) -> str:
    """Shortest text that parses back to the same value."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return repr(f)
    if v is None:
        return ""
    s = str(v)
    if any(c in s for c in ",\n\r\""):
        raise DomainError(f"cell {s!r} contains a separator or quote")
    return s


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    out = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise DomainError(f"row has {len(row)} cells, header has {len(header)}")
        out.append(",".join(format_value(c) for c in row))
    return "\n".join(out) + "\n"


def write_csv(table: Mapping[str, Sequence[Any]] | tuple[Sequence[str], Iterable[Sequence[Any]]], path) -> None:
    """Write a column mapping or a ``(header, rows)`` pair atomically."""
    if isinstance(table, Mapping):
        header = list(table)
        cols = [list(table[h]) for h in header]
        if len({len(c) for c in cols}) > 1:
            raise DomainError("columns differ in length")
        rows = list(zip(*cols))
    else:
        header, rows = table
    _atomic_write(Path(path), render_csv(header, rows))


def _parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_csv(path) -> dict[str, list]:
    """Read a CSV written by :func:`write_csv` into columns of parsed values."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DomainError(f"{path}: empty CSV")
    header = lines[0].split(",")
    cols: dict[str, list] = {h: [] for h in header}
    for n, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise DomainError(f"{path}:{n}: expected {len(header)} cells, got {len(cells)}")
        for h, c in zip(header, cells):
            cols[h].append(_parse_cell(c.strip()))
    return cols


TIMETAG_HEADER = ("shot", "detector", "time_ns")


def write_timetags(tags: Timetags, path) -> None:
    rows = zip(tags.shot.tolist(), tags.detector.tolist(), tags.time_ns.tolist())
    _atomic_write(Path(path), render_csv(TIMETAG_HEADER, rows))


def read_timetags(path) -> Timetags:
    cols = read_csv(path)
    if tuple(cols) != TIMETAG_HEADER:
        raise DomainError(f"{path}: timetag header must be {','.join(TIMETAG_HEADER)}")
    return Timetags(
        np.asarray(cols["shot"], np.int64),
        np.asarray(cols["detector"], np.int8),
        np.asarray(cols["time_ns"], float),
    )
