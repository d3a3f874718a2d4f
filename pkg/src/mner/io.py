"""CSV ingestion, run configuration and result writers.

Configuration files are INI (``configparser``)::

    [data]
    input = survey.csv
    area = county
    responses = corn, soy

    [covariates]
    corn = pixels_corn, pixels_soy
    soy = pixels_corn, pixels_soy

    [targets]
    source = sample_mean        ; or: file
    file = county_means.csv     ; one row per area, covariate columns

    [run]
    alpha = 0.05
    ell = 1, 1
    dof = rank                  ; or: exact
    v_form = printed
    seed = 1
    output_dir = out

    [simulate]
    preset = smoke-k2-rho05-normal
    workers = 1
    rho = 0.25                  ; any SimConfig field overrides the preset

    [validate]
    replications = 200000       ; Monte Carlo size of the bias check

Every response gets its own intercept, followed by its listed covariates.
"""

from __future__ import annotations

import configparser
import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, Design, InputError

OUTPUT_ENV = "MNER_OUTPUT_DIR"


class MissingColumn(InputError):
    def __init__(self, name: str):
        super().__init__(f"missing column {name!r}")
        self.name = name


class NonNumericCell(InputError):
    def __init__(self, row: int, col: str, value: str):
        super().__init__(f"non-numeric value {value!r} in row {row}, column {col!r}")
        self.row = row
        self.col = col


class EmptyArea(InputError):
    def __init__(self, row: int):
        super().__init__(f"empty area id in row {row}")
        self.row = row


class DuplicateHeader(InputError):
    def __init__(self, name: str):
        super().__init__(f"duplicate header {name!r}")
        self.name = name


@dataclass
class RunConfig:
    input: Path | None = None
    responses: list[str] = field(default_factory=list)
    covariates: dict[str, list[str]] = field(default_factory=dict)
    area: str = "area"
    alpha: float = 0.05
    ell: list[float] | None = None
    target_source: str = "sample_mean"
    target_file: Path | None = None
    output_dir: Path | None = None
    seed: int = 20240601
    dof: str = "rank"
    v_form: str = "printed"
    preset: str | None = None
    workers: int = 1
    simulate: dict[str, str] = field(default_factory=dict)
    validate_replications: int = 200_000

    def validate(self):
        if not self.responses:
            raise InputError("at least one response column is required")
        for r in self.responses:
            if not self.covariates.get(r):
                raise InputError(f"response {r!r} needs at least one covariate")
        if not 0.0 < self.alpha < 1.0:
            raise InputError("alpha must lie in (0, 1)")
        if self.target_source not in ("sample_mean", "file"):
            raise InputError("targets source must be sample_mean or file")
        if self.target_source == "file" and self.target_file is None:
            raise InputError("targets source 'file' needs a file")
        if self.dof not in ("rank", "exact"):
            raise InputError("dof must be rank or exact")
        if self.v_form not in ("printed", "wishart"):
            raise InputError("v_form must be printed or wishart")
        if self.ell is not None and len(self.ell) != len(self.responses):
            raise InputError(f"ell needs {len(self.responses)} entries")

    def as_dict(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            out[key] = str(val) if isinstance(val, Path) else val
        return out

    def column_names(self) -> list[str]:
        """Coefficient labels ``response:term`` in design order."""
        names = []
        for r in self.responses:
            names.append(f"{r}:intercept")
            names.extend(f"{r}:{c}" for c in self.covariates[r])
        return names


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def parse_ell(text: str | None) -> list[float] | None:
    if text is None or not str(text).strip():
        return None
    try:
        return [float(t) for t in _split(str(text))]
    except ValueError:
        raise InputError(f"ell must be a comma list of numbers, got {text!r}") from None


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read an INI run configuration; relative paths resolve against its folder."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # column names are case sensitive
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise InputError(f"bad config {path}: {exc}") from None
    base = path.parent

    def rel(p):
        return (base / p) if p and not Path(p).is_absolute() else (Path(p) if p else None)

    try:
        if parser.has_section("data"):
            d = parser["data"]
            cfg.input = rel(d.get("input"))
            cfg.area = d.get("area", cfg.area)
            cfg.responses = _split(d.get("responses", ""))
        if parser.has_section("covariates"):
            cfg.covariates = {k: _split(v) for k, v in parser["covariates"].items()}
        if parser.has_section("targets"):
            t = parser["targets"]
            cfg.target_source = t.get("source", cfg.target_source)
            cfg.target_file = rel(t.get("file"))
        if parser.has_section("run"):
            r = parser["run"]
            cfg.alpha = r.getfloat("alpha", cfg.alpha)
            cfg.ell = parse_ell(r.get("ell"))
            cfg.dof = r.get("dof", cfg.dof)
            cfg.v_form = r.get("v_form", cfg.v_form)
            cfg.seed = r.getint("seed", cfg.seed)
            cfg.output_dir = rel(r.get("output_dir"))
        if parser.has_section("simulate"):
            s = dict(parser["simulate"])
            cfg.preset = s.pop("preset", None)
            cfg.workers = int(s.pop("workers", cfg.workers))
            cfg.simulate = s
        if parser.has_section("validate"):
            cfg.validate_replications = parser["validate"].getint("replications", cfg.validate_replications)
    except ValueError as exc:
        raise InputError(f"bad value in {path}: {exc}") from None
    return cfg


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise InputError(f"{path} has no header row")
    header = [h.strip() for h in rows[0]]
    seen = set()
    for h in header:
        if h in seen:
            raise DuplicateHeader(h)
        seen.add(h)
    return header, [r for r in rows[1:] if any(c.strip() for c in r)]


def _column(header: list[str], name: str) -> int:
    try:
        return header.index(name)
    except ValueError:
        raise MissingColumn(name) from None


def _number(text: str, row: int, col: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise NonNumericCell(row, col, text) from None
    if not np.isfinite(val):
        raise NonNumericCell(row, col, text)
    return val


def _block_row(config: RunConfig, values: dict[str, float]) -> np.ndarray:
    k = len(config.responses)
    s = sum(1 + len(config.covariates[r]) for r in config.responses)
    out = np.zeros((k, s))
    col = 0
    for p, r in enumerate(config.responses):
        out[p, col] = 1.0
        for j, c in enumerate(config.covariates[r]):
            out[p, col + 1 + j] = values[c]
        col += 1 + len(config.covariates[r])
    return out


def ingest_csv(path, config: RunConfig) -> Dataset:
    """Read unit-level rows into a :class:`Dataset`.

    Rows are grouped by area id in order of first appearance; each unit's
    regressor block is block diagonal with one intercept per response.
    """
    config.validate()
    header, rows = _read_table(path)
    area_col = _column(header, config.area)
    covs = sorted({c for r in config.responses for c in config.covariates[r]})
    resp_idx = [_column(header, r) for r in config.responses]
    cov_idx = {c: _column(header, c) for c in covs}
    groups: dict[str, list] = {}
    width = len(header)
    for i, raw in enumerate(rows, start=2):  # file line numbers, header is line 1
        raw = raw + [""] * (width - len(raw))
        aid = raw[area_col].strip()
        if not aid:
            raise EmptyArea(i)
        y = [_number(raw[j].strip(), i, config.responses[p]) for p, j in enumerate(resp_idx)]
        vals = {c: _number(raw[j].strip(), i, c) for c, j in cov_idx.items()}
        groups.setdefault(aid, []).append((y, _block_row(config, vals)))
    if len(groups) < 2:
        raise InputError("at least two areas are required")
    ids = list(groups)
    sizes = np.array([len(groups[a]) for a in ids])
    y = np.array([u[0] for a in ids for u in groups[a]])
    reg = np.stack([u[1] for a in ids for u in groups[a]])
    return Dataset(Design(reg, sizes, tuple(ids)), y)


def read_targets(path, config: RunConfig, data: Dataset) -> dict[str, np.ndarray]:
    """Target blocks ``c_a`` from a per-area file of covariate values."""
    header, rows = _read_table(path)
    area_col = _column(header, config.area)
    covs = sorted({c for r in config.responses for c in config.covariates[r]})
    cov_idx = {c: _column(header, c) for c in covs}
    out = {}
    for i, raw in enumerate(rows, start=2):
        aid = raw[area_col].strip() if area_col < len(raw) else ""
        if not aid:
            raise EmptyArea(i)
        if aid not in data.area_ids:
            continue
        vals = {c: _number(raw[j].strip() if j < len(raw) else "", i, c) for c, j in cov_idx.items()}
        out[aid] = _block_row(config, vals)
    return out


# ---------------------------------------------------------------------------
# writers


def fmt(x) -> str:
    """Shortest round-trip text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _key(name: str, i: int, j: int, k: int) -> str:
    return f"{name}_{i + 1}{j + 1}" if k < 10 else f"{name}_{i + 1}_{j + 1}"


def flatten(name: str, mat) -> dict[str, float]:
    """Row-major ``name_ij`` entries, 1-based."""
    a = np.atleast_2d(np.asarray(mat, dtype=float))
    k = max(a.shape)
    return {_key(name, i, j, k): a[i, j] for i in range(a.shape[0]) for j in range(a.shape[1])}


def unflatten(name: str, row: dict, k: int) -> np.ndarray:
    return np.array([[float(row[_key(name, i, j, k)]) for j in range(k)] for i in range(k)])


def write_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        for key in r:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([fmt(r.get(f, "")) for f in fields])


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _to_json(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_to_json, allow_nan=True)
        fh.write("\n")


def output_dir(cli_value=None, config: RunConfig | None = None) -> Path:
    """``--out`` wins, then ``MNER_OUTPUT_DIR``, then the config, then the cwd."""
    if cli_value:
        return Path(cli_value)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    if config is not None and config.output_dir is not None:
        return Path(config.output_dir)
    return Path.cwd()
