"""CSV ingestion, emission, config files and map output.

Event schema: ``id,date,lat,lon,deaths,injuries``.  Dates accept plain
days, months with the day missing (imputed uniformly), or timestamps
with fractional seconds at full float precision, which is what makes
emit/ingest round trips exact.  Ingestion is the only place raw data is
touched: it filters to the configured window, imputes, jitters, and
reports every count so the cleaning is auditable.
"""

from __future__ import annotations

import calendar
import configparser
import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date as _date
from datetime import timedelta

import numpy as np

from .baseline import CovariateField
from .core import BACKGROUND, BranchingStructure, ObservationDomain, PointPattern

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "IngestReport",
    "ingest_events",
    "emit_events",
    "ingest_covariates",
    "covariate_fields",
    "write_parents",
    "read_parents",
    "write_grid_csv",
    "read_grid_csv",
    "write_pgm",
    "format_float",
    "dump_json",
]


def format_float(v) -> str:
    """Shortest decimal string that round-trips the float exactly."""
    return repr(float(v))


def dump_json(path, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# dates


def _parse_date(text: str) -> tuple[int, int | None, float]:
    """Parse a schema date into (year*10000+month, day or None, seconds).

    Accepts YYYY-MM (day missing), YYYY-MM-DD, and
    YYYY-MM-DD[T ]HH:MM:SS[.frac] with arbitrary fractional precision.
    """
    text = text.strip()
    if "T" in text or " " in text:
        sep = "T" if "T" in text else " "
        day_part, time_part = text.split(sep, 1)
        hh, mm, ss = time_part.split(":")
        seconds = int(hh) * 3600.0 + int(mm) * 60.0 + float(ss)
    else:
        day_part, seconds = text, 0.0
    bits = day_part.split("-")
    if len(bits) == 2:
        y, mo = int(bits[0]), int(bits[1])
        return y * 10000 + mo * 100, None, seconds
    if len(bits) == 3:
        y, mo, d = int(bits[0]), int(bits[1]), int(bits[2])
        return y * 10000 + mo * 100, d, seconds
    raise ValueError(f"unparseable date {text!r}")


def _date_of(packed: int, day: int) -> _date:
    return _date(packed // 10000, (packed % 10000) // 100, day)


def parse_day_value(text: str, epoch: _date) -> float:
    """Days since epoch for a fully specified date string."""
    packed, day, seconds = _parse_date(text)
    if day is None:
        raise ValueError(f"date {text!r} is missing its day")
    return float((_date_of(packed, day) - epoch).days) + seconds / 86400.0


def format_day_value(t_days: float, epoch: _date) -> str:
    """Inverse of ``parse_day_value`` at full precision.

    Whole days print as plain dates; otherwise seconds carry the full
    float so the value survives a round trip to within one unit in the
    last place.
    """
    day_int = math.floor(t_days)
    frac = t_days - day_int
    d = epoch + timedelta(days=int(day_int))
    if frac == 0.0:
        return d.isoformat()
    seconds = frac * 86400.0
    hh = min(int(seconds // 3600.0), 23)
    rem = seconds - hh * 3600.0
    mm = min(int(rem // 60.0), 59)
    ss = rem - mm * 60.0
    ss_txt = repr(ss)
    if ss < 10.0:
        ss_txt = "0" + ss_txt
    return f"{d.isoformat()}T{hh:02d}:{mm:02d}:{ss_txt}"


# ---------------------------------------------------------------------------
# configuration


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# schema: section -> key -> (parser, default); None default means optional
_SCHEMA = {
    "domain": {
        "lon_min": (float, 0.0),
        "lon_max": (float, 1.0),
        "lat_min": (float, 0.0),
        "lat_max": (float, 1.0),
        "date_start": (str, "2020-01-01"),
        "date_end": (str, "2021-01-01"),
        "mark_ceiling": (float, None),
    },
    "ingest": {
        "jitter_time": (_parse_bool, True),
        "jitter_space_sd": (float, 0.01),
        "seed": (int, 0),
        "mark_source": (str, "deaths"),
    },
    "simulate": {
        "mu_star": (float, 50.0),
        "kernel": (str, "rq"),
        "l_t": (float, 0.3),
        "l_s": (float, 1.0),
        "alpha_s": (float, 1.0),
        "amplitude": (float, 1.0),
        "gamma": (float, 0.1),
        "grid_resolution": (int, 8),
        "rank": (int, 50),
        "seed": (int, 0),
        "offspring_mode": (str, "root"),
        "mark_mode": (str, "uniform"),
        "n_particles": (int, 1000),
        "probe_resolution": (int, 32),
        "mark_alpha": (float, 0.2),
        "mark_beta": (float, 1.0),
        "mark_pi": (float, 0.9),
        "mark_u": (int, 2),
        "mark_xi": (float, 0.3),
        "mark_sigma": (float, 1.0),
        "mark_ceiling": (float, 200.0),
    },
    "marks": {
        "threshold": (int, 2),
        "thresholds": (str, "1,2,3,5"),
        "bodies": (str, "zip,zinb"),
        "tails": (str, "gzd,gpd"),
        "restarts": (int, 10),
        "n_samples": (int, 2000),
        "burn_in": (int, 500),
        "thin": (int, 5),
        "seed": (int, 0),
        "step": (float, 0.05),
    },
    "mcmc": {
        "n_samples": (int, 5000),
        "burn_in": (int, 1000),
        "thin": (int, 10),
        "seed": (int, 0),
        "baseline_update": (str, "mh"),
        "baseline_design": (str, "intercept"),
        "grid_resolution": (int, 8),
        "rank": (int, 50),
        "n_particles": (int, 1000),
        "kernel": (str, "rq"),
        "hmc_n_steps": (int, 20),
        "hmc_step_size": (float, 0.1),
        "mark_mode": (str, "root"),
        "likelihood_off": (_parse_bool, False),
        "checkpoint_every": (int, 0),
    },
    "grid": {
        "cell_lon": (float, 0.06),
        "cell_lat": (float, 0.1),
        "time_samples": (int, 128),
        "mark_threshold": (int, 20),
        "year_length_days": (float, 365.0),
        "max_rows": (int, None),
        "seed": (int, 0),
    },
}


@dataclass
class PipelineConfig:
    """Validated INI settings with schema defaults filled in."""

    sections: dict

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        return cls.from_parser(parser)

    @classmethod
    def from_parser(cls, parser) -> "PipelineConfig":
        out = {}
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            out[section] = {}
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                fn, _ = _SCHEMA[section][key]
                try:
                    out[section][key] = fn(raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for {section}.{key}: {raw!r} ({exc})"
                    ) from exc
        for section, keys in _SCHEMA.items():
            out.setdefault(section, {})
            for key, (_, default) in keys.items():
                out[section].setdefault(key, default)
        return cls(sections=out)

    @classmethod
    def defaults(cls) -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None)
        return cls.from_parser(parser)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def dump(self, path) -> None:
        """Snapshot the resolved settings (sorted, deterministic)."""
        with open(path, "w", newline="\n") as fh:
            for section in sorted(self.sections):
                fh.write(f"[{section}]\n")
                for key in sorted(self.sections[section]):
                    val = self.sections[section][key]
                    if val is None:
                        continue
                    if isinstance(val, bool):
                        txt = "true" if val else "false"
                    elif isinstance(val, float):
                        txt = format_float(val)
                    else:
                        txt = str(val)
                    fh.write(f"{key} = {txt}\n")
                fh.write("\n")

    # convenience accessors used across the pipeline

    def epoch(self) -> _date:
        packed, day, _ = _parse_date(self.get("domain", "date_start"))
        if day is None:
            raise ConfigError("domain.date_start must include a day")
        return _date_of(packed, day)

    def span_days(self) -> float:
        end = parse_day_value(self.get("domain", "date_end"), self.epoch())
        if end <= 0:
            raise ConfigError("domain.date_end must come after date_start")
        return end

    def domain(self) -> ObservationDomain:
        return ObservationDomain(
            t_range=(0.0, self.span_days()),
            x_range=(self.get("domain", "lon_min"), self.get("domain", "lon_max")),
            y_range=(self.get("domain", "lat_min"), self.get("domain", "lat_max")),
            mark_ceiling=self.get("domain", "mark_ceiling"),
        )


# ---------------------------------------------------------------------------
# event ingestion and emission

_EVENT_COLUMNS = ("id", "date", "lat", "lon", "deaths", "injuries")


@dataclass
class IngestReport:
    """Counts of every cleaning action taken during ingestion."""

    n_read: int = 0
    n_kept: int = 0
    n_outside_window: int = 0
    n_missing_coords: int = 0
    n_imputed_day: int = 0
    n_defaulted_marks: int = 0
    n_retied: int = 0
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_read": self.n_read,
            "n_kept": self.n_kept,
            "n_outside_window": self.n_outside_window,
            "n_missing_coords": self.n_missing_coords,
            "n_imputed_day": self.n_imputed_day,
            "n_defaulted_marks": self.n_defaulted_marks,
            "n_retied": self.n_retied,
            "flags": sorted(self.flags),
        }


def _maybe_float(text) -> float | None:
    if text is None:
        return None
    text = str(text).strip()
    if not text:
        return None
    return float(text)


def ingest_events(path, config: PipelineConfig) -> tuple[PointPattern, IngestReport]:
    """Read raw events into a time-ordered pattern in original units.

    Original units: t in days since the configured start date, x and y
    in degrees of longitude and latitude.  Rows without coordinates are
    dropped (flagged); missing casualty counts become zero (flagged);
    dates missing their day draw one uniformly within the month.  When
    enabled, date-only rows get a uniform within-day time jitter and
    coordinates Gaussian noise; exact ties after all that are separated
    by the smallest possible forward nudge.
    """
    epoch = config.epoch()
    span = config.span_days()
    lon_lo, lon_hi = config.get("domain", "lon_min"), config.get("domain", "lon_max")
    lat_lo, lat_hi = config.get("domain", "lat_min"), config.get("domain", "lat_max")
    jitter_time = config.get("ingest", "jitter_time")
    jitter_sd = config.get("ingest", "jitter_space_sd")
    mark_source = config.get("ingest", "mark_source")
    if mark_source not in ("deaths", "injuries", "sum"):
        raise ConfigError("ingest.mark_source must be deaths, injuries or sum")
    rng = np.random.default_rng(config.get("ingest", "seed"))
    report = IngestReport()

    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_EVENT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"events file missing columns: {sorted(missing)}")
        for rec in reader:
            report.n_read += 1
            lat = _maybe_float(rec["lat"])
            lon = _maybe_float(rec["lon"])
            if lat is None or lon is None:
                report.n_missing_coords += 1
                continue
            packed, day, seconds = _parse_date(rec["date"])
            had_time = seconds != 0.0
            if day is None:
                y, mo = packed // 10000, (packed % 10000) // 100
                n_days = calendar.monthrange(y, mo)[1]
                day = int(rng.integers(1, n_days + 1))
                report.n_imputed_day += 1
            t = float((_date_of(packed, day) - epoch).days) + seconds / 86400.0
            deaths = _maybe_float(rec["deaths"])
            injuries = _maybe_float(rec["injuries"])
            if deaths is None or injuries is None:
                report.n_defaulted_marks += 1
            deaths = deaths if deaths is not None else 0.0
            injuries = injuries if injuries is not None else 0.0
            if jitter_time and not had_time:
                t += float(rng.random())
            if jitter_sd > 0:
                lon += float(rng.normal(0.0, jitter_sd))
                lat += float(rng.normal(0.0, jitter_sd))
            if not (0.0 <= t < span and lon_lo <= lon <= lon_hi and lat_lo <= lat <= lat_hi):
                report.n_outside_window += 1
                continue
            if mark_source == "deaths":
                mark = deaths
            elif mark_source == "injuries":
                mark = injuries
            else:
                mark = deaths + injuries
            rows.append((t, lon, lat, mark, str(rec["id"])))

    rows.sort(key=lambda r: r[0])
    times = np.array([r[0] for r in rows], dtype=float)
    for i in range(1, len(times)):
        if times[i] <= times[i - 1]:
            times[i] = np.nextafter(times[i - 1], math.inf)
            report.n_retied += 1
    if report.n_missing_coords:
        report.flags.append("dropped_missing_coordinates")
    if report.n_defaulted_marks:
        report.flags.append("defaulted_missing_casualties")
    if report.n_imputed_day:
        report.flags.append("imputed_missing_day")
    report.n_kept = len(rows)

    domain = config.domain()
    pattern = PointPattern.from_arrays(
        times,
        [r[1] for r in rows],
        [r[2] for r in rows],
        [r[3] for r in rows],
        domain,
        ids=[r[4] for r in rows],
    )
    return pattern, report


def emit_events(path, pattern: PointPattern, epoch: _date,
                injuries: np.ndarray | None = None) -> None:
    """Write a pattern back to the raw schema; exact inverse of a
    jitter-free ingest (dates carry full float precision)."""
    inj = np.zeros(len(pattern)) if injuries is None else np.asarray(injuries, dtype=float)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(_EVENT_COLUMNS) + "\n")
        for ev, extra in zip(pattern, inj):
            mark = float(ev.m)
            mark_txt = str(int(mark)) if mark.is_integer() else format_float(mark)
            inj_txt = str(int(extra)) if float(extra).is_integer() else format_float(extra)
            fh.write(
                f"{ev.id},{format_day_value(ev.t, epoch)},"
                f"{format_float(ev.y)},{format_float(ev.x)},{mark_txt},{inj_txt}\n"
            )


# ---------------------------------------------------------------------------
# covariates

_COV_COLUMNS = ("name", "lat", "lon", "year", "value")


def ingest_covariates(path) -> dict[str, dict]:
    """Read the covariate schema into per-name site/year value tables."""
    by_name: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_COV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"covariates file missing columns: {sorted(missing)}")
        for rec in reader:
            name = str(rec["name"]).strip()
            site = (float(rec["lon"]), float(rec["lat"]))
            year = int(rec["year"])
            entry = by_name.setdefault(name, {})
            entry.setdefault(site, {})[year] = float(rec["value"])
    return by_name


def covariate_fields(
    tables: dict[str, dict],
    epoch: _date,
    span_days: float,
    lon0: float,
    lon_scale: float,
    lat0: float,
    lat_scale: float,
    decay: float = 1.0,
) -> tuple[CovariateField, ...]:
    """Build unit-coordinate covariate fields from ingested tables.

    Yearly values are anchored at each year's midpoint; missing
    site-year cells carry the site's nearest observed year forward or
    backward.
    """
    fields = []
    for name in sorted(tables):
        entry = tables[name]
        sites = sorted(entry.keys())
        years = sorted({y for site in sites for y in entry[site]})
        t_units = []
        for y in years:
            mid = float((_date(y, 7, 2) - epoch).days)
            t_units.append(mid / span_days)
        values = np.empty((len(years), len(sites)))
        for j, site in enumerate(sites):
            have = entry[site]
            known_years = sorted(have)
            for i, y in enumerate(years):
                if y in have:
                    values[i, j] = have[y]
                else:
                    nearest = min(known_years, key=lambda ky: abs(ky - y))
                    values[i, j] = have[nearest]
        sites_unit = np.array(
            [[(s[0] - lon0) / lon_scale, (s[1] - lat0) / lat_scale] for s in sites]
        )
        order = np.argsort(t_units)
        fields.append(
            CovariateField(
                name=name,
                sites=sites_unit,
                times=np.asarray(t_units)[order],
                values=values[order],
                decay=decay,
            )
        )
    return tuple(fields)


# ---------------------------------------------------------------------------
# branching sidecar


def write_parents(path, pattern: PointPattern, branching: BranchingStructure) -> None:
    """Write child/parent id pairs; background parents use the literal
    BACKGROUND."""
    if len(branching.parents) != len(pattern):
        raise ValueError("branching size does not match the pattern")
    with open(path, "w", newline="\n") as fh:
        fh.write("child_id,parent_id\n")
        for i, p in enumerate(branching.parents):
            parent = "BACKGROUND" if p == BACKGROUND else pattern.ids[p]
            fh.write(f"{pattern.ids[i]},{parent}\n")


def read_parents(path, pattern: PointPattern) -> BranchingStructure:
    index = {eid: i for i, eid in enumerate(pattern.ids)}
    parents = np.full(len(pattern), BACKGROUND, dtype=int)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            child = index[str(rec["child_id"])]
            raw = str(rec["parent_id"])
            parents[child] = BACKGROUND if raw == "BACKGROUND" else index[raw]
    return BranchingStructure(parents)


# ---------------------------------------------------------------------------
# grids and heatmaps


def write_grid_csv(path, grid) -> None:
    """Long-format grid: one row per pixel with centers and value."""
    cx, cy = grid.centers()
    with open(path, "w", newline="\n") as fh:
        fh.write("lon,lat,value\n")
        for iy in range(len(cy)):
            for ix in range(len(cx)):
                fh.write(
                    f"{format_float(cx[ix])},{format_float(cy[iy])},"
                    f"{format_float(grid.values[iy, ix])}\n"
                )


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Back out (lon centers, lat centers, values) from the long format."""
    lons, lats, vals = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            lons.append(float(rec["lon"]))
            lats.append(float(rec["lat"]))
            vals.append(float(rec["value"]))
    cx = np.unique(np.asarray(lons))
    cy = np.unique(np.asarray(lats))
    values = np.asarray(vals).reshape(len(cy), len(cx))
    return cx, cy, values


def write_pgm(path, grid, log_scale: bool = False) -> None:
    """ASCII grayscale map (P2), north up, with a JSON scale sidecar."""
    vals = np.asarray(grid.values, dtype=float)
    if log_scale:
        vals = np.log10(np.maximum(vals, 1e-12))
    vmin, vmax = float(vals.min()), float(vals.max())
    if vmax > vmin:
        levels = np.rint((vals - vmin) / (vmax - vmin) * 255.0).astype(int)
    else:
        levels = np.zeros(vals.shape, dtype=int)
    ny, nx = vals.shape
    with open(path, "w", newline="\n") as fh:
        fh.write(f"P2\n{nx} {ny}\n255\n")
        for iy in range(ny - 1, -1, -1):
            fh.write(" ".join(str(v) for v in levels[iy]) + "\n")
    dump_json(str(path) + ".json", {
        "min": vmin,
        "max": vmax,
        "log_scale": bool(log_scale),
    })
