"""Synthetic ICU cohort, rule-based SOFA concept labels, and preprocessing.

Generator model
---------------
Each stay carries six latent organ-dysfunction trajectories in [0, 1]
(0 healthy, 1 maximal failure): a per-patient baseline plus autocorrelated
noise, with occasional transient episodes.  Non-survivors get a ramp towards
severe dysfunction in two to four organs during the 24-48 h before death.
Time-series feature ``k`` is a noisy affine function of the latent state of
organ ``FEATURE_ORGAN[k] = k % 6``.  Features 0-5 are the SOFA marker
features (one per organ, see ``DEFAULT_SOFA_RULES``) with clinically scaled
affine maps; the rest get random per-cohort offsets and slopes.  Cells go
missing independently with per-feature rates in [0.1, 0.9]; observed cells
may hold up to three same-hour measurements, reduced by their median.

Static vector layout (24): age, female, race one-hot (5), ethnicity one-hot
(2), admission type one-hot (7), comorbidity flags (8).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imputer import MaskedSeries, build_mask

log = logging.getLogger(__name__)

ORGANS = ("respiratory", "cardiovascular", "hepatic", "coagulation", "renal", "neurological")
N_ORGANS = len(ORGANS)
D_X = 87
D_S = 24
MIN_LOS = 48
LABEL_WINDOW = 24
COHORT_SCHEMA_VERSION = 1

STATIC_BINARY = np.r_[False, np.ones(D_S - 1, dtype=bool)]  # everything but age


def feature_organ(d_x: int = D_X) -> np.ndarray:
    return np.arange(d_x) % N_ORGANS


# ---------------------------------------------------------------------------
# SOFA rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SofaRule:
    """Four cut-points over one marker feature.

    ``increasing``: score = #{cuts c : x >= c}.  ``decreasing``: score =
    #{cuts c : x <= c}.  A value sitting exactly on a cut-point takes the
    higher score in both directions.
    """

    organ: str
    feature: int
    cuts: tuple[float, float, float, float]
    direction: str = "increasing"
    marker: str = ""

    def __post_init__(self):
        if len(self.cuts) != 4:
            raise ValueError(f"{self.organ}: need exactly 4 cut-points")
        c = np.asarray(self.cuts)
        if self.direction == "increasing" and not np.all(np.diff(c) > 0):
            raise ValueError(f"{self.organ}: increasing cut-points must ascend")
        if self.direction == "decreasing" and not np.all(np.diff(c) < 0):
            raise ValueError(f"{self.organ}: decreasing cut-points must descend")
        if self.direction not in ("increasing", "decreasing"):
            raise ValueError(f"{self.organ}: bad direction {self.direction!r}")

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(self.cuts)
        if self.direction == "increasing":
            s = (x[..., None] >= c).sum(axis=-1)
        else:
            s = (x[..., None] <= c).sum(axis=-1)
        return np.where(np.isnan(x), 0, s).astype(np.int64)


DEFAULT_SOFA_RULES = (
    SofaRule("respiratory", 0, (400.0, 300.0, 200.0, 100.0), "decreasing", "pao2_fio2_ratio"),
    SofaRule("cardiovascular", 1, (70.0, 60.0, 50.0, 40.0), "decreasing", "mean_arterial_pressure"),
    SofaRule("hepatic", 2, (1.2, 2.0, 6.0, 12.0), "increasing", "bilirubin"),
    SofaRule("coagulation", 3, (150.0, 100.0, 50.0, 20.0), "decreasing", "platelets"),
    SofaRule("renal", 4, (1.2, 2.0, 3.5, 5.0), "increasing", "creatinine"),
    SofaRule("neurological", 5, (14.0, 12.0, 9.0, 5.0), "decreasing", "gcs"),
)

# marker value at latent 0 and latent 1, then physiological floor/ceiling;
# rows follow DEFAULT_SOFA_RULES.  Ranges put the outer cut-points near
# latent 0.15 and 0.8 so every score level is reachable.
MARKER_RANGE = np.array(
    [
        [470.0, 10.0, 30.0, 600.0],
        [77.0, 31.0, 25.0, 140.0],
        [0.2, 15.0, 0.1, 40.0],
        [180.0, -10.0, 5.0, 600.0],
        [0.4, 6.3, 0.2, 15.0],
        [16.0, 2.5, 3.0, 15.0],
    ]
)


def load_sofa_rules(path) -> tuple[SofaRule, ...]:
    """Read rules from ``organ,feature,direction,c1,c2,c3,c4[,marker]`` lines."""
    rules = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (7, 8):
            raise ValueError(f"bad SOFA rule line: {line!r}")
        rules.append(
            SofaRule(parts[0], int(parts[1]), tuple(float(v) for v in parts[3:7]), parts[2],
                     parts[7] if len(parts) == 8 else "")
        )
    if len(rules) != N_ORGANS:
        raise ValueError(f"expected {N_ORGANS} rules, got {len(rules)}")
    return tuple(rules)


def score_sofa(row: np.ndarray, rules: Sequence[SofaRule] = DEFAULT_SOFA_RULES) -> np.ndarray:
    """Six organ scores (0-4) from one hour of raw features; a missing marker scores 0."""
    row = np.asarray(row, dtype=np.float64)
    return np.array([r.score(row[r.feature]) for r in rules], dtype=np.int64)


def locf(x: np.ndarray) -> np.ndarray:
    """Carry the last observation forward along axis 0; leading gaps stay NaN."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ndim == 1
    if flat:
        x = x[:, None]
    idx = np.where(np.isnan(x), 0, np.arange(x.shape[0])[:, None])
    np.maximum.accumulate(idx, axis=0, out=idx)
    out = np.take_along_axis(x, idx, axis=0)
    return out[:, 0] if flat else out


def score_series(values: np.ndarray, rules: Sequence[SofaRule] = DEFAULT_SOFA_RULES) -> np.ndarray:
    """Hourly ``[T, 6]`` scores with last-observation-carried-forward markers."""
    markers = locf(np.asarray(values, dtype=np.float64)[:, [r.feature for r in rules]])
    return np.stack([r.score(markers[:, j]) for j, r in enumerate(rules)], axis=1)


# ---------------------------------------------------------------------------
# records and labels
# ---------------------------------------------------------------------------


@dataclass
class PatientRecord:
    patient_id: int
    static: np.ndarray
    series: MaskedSeries
    death_hour: int | None = None
    scaled: bool = False
    latent: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        T = self.series.n_steps
        if T < MIN_LOS:
            raise ValueError(f"patient {self.patient_id}: stay of {T} h is shorter than {MIN_LOS} h")
        if self.death_hour is not None and not 0 < self.death_hour <= T:
            raise ValueError(f"patient {self.patient_id}: death hour {self.death_hour} outside stay of {T} h")

    @property
    def los_hours(self) -> int:
        return self.series.n_steps

    @property
    def died(self) -> bool:
        return self.death_hour is not None


@dataclass
class ConceptLabels:
    sofa_raw: np.ndarray  # [T, 6] int 0-4
    sofa_scaled: np.ndarray  # [T, 6]
    target: np.ndarray  # [T, 6] max of sofa_scaled over (t, t+24]
    mortality: np.ndarray  # [T] 0/1


def window_max(scaled: np.ndarray, window: int = LABEL_WINDOW) -> np.ndarray:
    """Max over the strictly-future window ``(t, t + window]`` truncated at the stay end.

    The final hour has an empty window and keeps its own value.
    """
    T = scaled.shape[0]
    out = np.full(scaled.shape, -np.inf)
    for k in range(1, min(window, T - 1) + 1):
        np.maximum(out[: T - k], scaled[k:], out=out[: T - k])
    out[T - 1] = scaled[T - 1]
    return out


def mortality_labels(n_hours: int, death_hour: int | None, window: int = LABEL_WINDOW) -> np.ndarray:
    t = np.arange(n_hours)
    if death_hour is None:
        return np.zeros(n_hours)
    return ((death_hour > t) & (death_hour <= t + window)).astype(np.float64)


def label_record(record: PatientRecord, rules: Sequence[SofaRule] = DEFAULT_SOFA_RULES) -> ConceptLabels:
    if record.scaled:
        raise ValueError("label_record needs raw (unscaled) values")
    raw = score_series(record.series.values, rules)
    scaled = raw / 4.0
    return ConceptLabels(raw, scaled, window_max(scaled), mortality_labels(record.los_hours, record.death_hour))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    d_x: int = D_X
    d_s: int = D_S
    los_extra_mean: float = 16.0
    max_los: int = 96
    max_replicates: int = 3


@dataclass
class _FeatureModel:
    offset: np.ndarray
    slope: np.ndarray
    noise: np.ndarray
    missing_rate: np.ndarray
    replicate_p: np.ndarray
    floor: np.ndarray
    ceil: np.ndarray


def _feature_model(seed: int, cfg: GeneratorConfig) -> _FeatureModel:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    d = cfg.d_x
    offset = rng.uniform(0.0, 10.0, d)
    slope = rng.choice([-1.0, 1.0], d) * rng.uniform(1.0, 5.0, d)
    noise = rng.uniform(0.05, 0.3, d) * np.abs(slope)
    n_mark = min(N_ORGANS, d)
    offset[:n_mark] = MARKER_RANGE[:n_mark, 0]
    slope[:n_mark] = MARKER_RANGE[:n_mark, 1] - MARKER_RANGE[:n_mark, 0]
    floor, ceil = np.full(d, -np.inf), np.full(d, np.inf)
    floor[:n_mark], ceil[:n_mark] = MARKER_RANGE[:n_mark, 2], MARKER_RANGE[:n_mark, 3]
    noise[:n_mark] = 0.03 * np.abs(slope[:n_mark])
    missing = rng.uniform(0.1, 0.9, d)
    missing[:n_mark] = rng.uniform(0.1, 0.5, n_mark)
    replicate_p = np.where(np.arange(d) % 3 == 0, rng.uniform(0.0, 0.6, d), 0.0)
    return _FeatureModel(offset, slope, noise, missing, replicate_p, floor, ceil)


def _latent(rng: np.random.Generator, T: int, dies: bool, burden: float) -> np.ndarray:
    base = np.clip(rng.uniform(0.0, 0.25, N_ORGANS) + 0.04 * burden, 0.0, 0.6)
    path = np.tile(base, (T, 1))
    # AR(1) wobble
    eps = rng.normal(0.0, 0.03, (T, N_ORGANS))
    wobble = np.zeros((T, N_ORGANS))
    for t in range(1, T):
        wobble[t] = 0.9 * wobble[t - 1] + eps[t]
    hours = np.arange(T)[:, None]
    # transient episodes, survivors and non-survivors alike
    for _ in range(rng.poisson(0.6)):
        j = rng.integers(N_ORGANS)
        centre, width, height = rng.uniform(0, T), rng.uniform(4, 12), rng.uniform(0.15, 0.45)
        path[:, j] += height * np.exp(-0.5 * ((hours[:, 0] - centre) / width) ** 2)
    if dies:
        organs = rng.choice(N_ORGANS, size=rng.integers(2, 5), replace=False)
        for j in organs:
            ramp_len = rng.uniform(24.0, 48.0)
            peak = rng.uniform(0.75, 1.0)
            frac = np.clip((hours[:, 0] - (T - ramp_len)) / ramp_len, 0.0, 1.0)
            path[:, j] += (peak - path[:, j]) * frac
    return np.clip(path + wobble, 0.0, 1.0)


def _static(rng: np.random.Generator, dies: bool) -> tuple[np.ndarray, float]:
    s = np.zeros(D_S)
    s[0] = np.round(np.clip(rng.normal(72.0 if dies else 67.0, 15.0), 18.0, 95.0), 1)
    s[1] = float(rng.random() < 0.44)
    s[2 + rng.choice(5, p=[0.66, 0.10, 0.04, 0.03, 0.17])] = 1.0
    s[7 + int(rng.random() < 0.05)] = 1.0
    s[9 + rng.integers(7)] = 1.0
    como = rng.random(8) < (0.25 if dies else 0.15)
    s[16:24] = como
    return s, float(como.sum())


def generate_patient(patient_id: int, dies: bool, seed: int, fm: _FeatureModel,
                     cfg: GeneratorConfig = GeneratorConfig()) -> PatientRecord:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, patient_id)))
    T = int(min(MIN_LOS + np.floor(rng.exponential(cfg.los_extra_mean)), cfg.max_los))
    static, burden = _static(rng, dies)
    latent = _latent(rng, T, dies, burden)
    organ = feature_organ(cfg.d_x)
    mean = fm.offset + fm.slope * latent[:, organ]  # [T, d_x]
    K = cfg.max_replicates
    reps = mean[..., None] + fm.noise[None, :, None] * rng.normal(size=(T, cfg.d_x, K))
    counts = 1 + rng.binomial(K - 1, np.broadcast_to(fm.replicate_p, (T, cfg.d_x)))
    observed = rng.random((T, cfg.d_x)) >= fm.missing_rate
    counts = np.where(observed, counts, 0)
    reps = np.round(np.clip(reps, fm.floor[None, :, None], fm.ceil[None, :, None]), 3)
    if cfg.d_x > 5:
        reps[:, 5] = np.clip(np.round(reps[:, 5]), 3.0, 15.0)  # GCS is an integer 3-15
    values = np.round(hourly_median(reps, counts), 4)
    death = T if dies else None
    return PatientRecord(patient_id, static, build_mask(values), death, latent=latent)


def generate_cohort(n_patients: int, target_prevalence: float = 0.089, rng_seed: int = 0,
                    config: GeneratorConfig = GeneratorConfig()) -> list[PatientRecord]:
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    if not 0.0 < target_prevalence < 1.0:
        raise ValueError(f"prevalence must be in (0, 1), got {target_prevalence}")
    fm = _feature_model(rng_seed, config)
    outcome_rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(2,)))
    # exact death count, random assignment: realised prevalence is round(n * p) / n
    dies = np.zeros(n_patients, dtype=bool)
    dies[outcome_rng.permutation(n_patients)[: int(round(n_patients * target_prevalence))]] = True
    return [generate_patient(i, bool(dies[i]), rng_seed, fm, config) for i in range(n_patients)]


# ---------------------------------------------------------------------------
# hourly aggregation
# ---------------------------------------------------------------------------


def hourly_median(replicates: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Median of the first ``counts[t, f]`` entries of ``replicates[t, f, :]``; NaN where 0."""
    K = replicates.shape[-1]
    used = np.arange(K) < counts[..., None]
    vals = np.where(used, replicates, np.nan)
    out = np.full(counts.shape, np.nan)
    has = counts > 0
    out[has] = np.nanmedian(vals[has], axis=-1)
    return out


def aggregate_hourly(hours: Iterable[float], features: Iterable[int], values: Iterable[float],
                     n_hours: int, d_x: int) -> np.ndarray:
    """Bucket raw charted events into hours (floor) and reduce each bucket by its median."""
    buckets: dict[tuple[int, int], list[float]] = {}
    for h, f, v in zip(hours, features, values):
        t = int(np.floor(h))
        if 0 <= t < n_hours and np.isfinite(v):
            buckets.setdefault((t, int(f)), []).append(float(v))
    out = np.full((n_hours, d_x), np.nan)
    for (t, f), vs in buckets.items():
        out[t, f] = np.median(vs)
    return out


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalerParams:
    lo: np.ndarray
    hi: np.ndarray
    median: np.ndarray
    iqr: np.ndarray
    static_lo: np.ndarray
    static_hi: np.ndarray
    static_median: np.ndarray
    static_iqr: np.ndarray


def _robust_fit(cols: list[np.ndarray], what: str, warn: bool = True):
    d = len(cols)
    lo, hi, med, iqr = np.zeros(d), np.zeros(d), np.zeros(d), np.ones(d)
    for k, v in enumerate(cols):
        v = v[np.isfinite(v)]
        if v.size == 0:
            if warn:
                log.warning("%s feature %d never observed in training data; identity scaling", what, k)
            lo[k], hi[k] = -np.inf, np.inf
            continue
        lo[k], hi[k] = np.percentile(v, [1.0, 99.0])
        c = np.clip(v, lo[k], hi[k])
        q25, med[k], q75 = np.percentile(c, [25.0, 50.0, 75.0])
        if q75 - q25 > 0:
            iqr[k] = q75 - q25
        elif warn:
            log.warning("%s feature %d has zero IQR; using 1", what, k)
    return lo, hi, med, iqr


def fit_scalers(train: Sequence[PatientRecord]) -> ScalerParams:
    """Clip bounds (1st/99th percentile), median and IQR from training records only."""
    if not train:
        raise ValueError("fit_scalers: empty training set")
    if any(r.scaled for r in train):
        raise ValueError("fit_scalers needs raw records")
    allv = np.concatenate([r.series.values for r in train], axis=0)
    lo, hi, med, iqr = _robust_fit([allv[:, k] for k in range(allv.shape[1])], "time-series")
    st = np.stack([r.static for r in train])
    binary = np.all((st == 0) | (st == 1), axis=0)
    s_lo, s_hi, s_med, s_iqr = _robust_fit([st[:, k] for k in range(st.shape[1])], "static", warn=False)
    s_lo[binary], s_hi[binary], s_med[binary], s_iqr[binary] = -np.inf, np.inf, 0.0, 1.0
    return ScalerParams(lo, hi, med, iqr, s_lo, s_hi, s_med, s_iqr)


def scale_values(params: ScalerParams, values: np.ndarray) -> np.ndarray:
    return (np.clip(values, params.lo, params.hi) - params.median) / params.iqr


def unscale_values(params: ScalerParams, scaled: np.ndarray) -> np.ndarray:
    return scaled * params.iqr + params.median


def apply_scalers(params: ScalerParams, record: PatientRecord) -> PatientRecord:
    if record.scaled:
        raise ValueError(f"patient {record.patient_id} is already scaled")
    vals = scale_values(params, record.series.values)
    static = (np.clip(record.static, params.static_lo, params.static_hi) - params.static_median) / params.static_iqr
    series = MaskedSeries(np.where(record.series.mask > 0, vals, np.nan), record.series.mask.copy())
    return replace(record, static=static, series=series, scaled=True)


_SCALER_FIELDS = ("lo", "hi", "median", "iqr")


def write_scalers(path, params: ScalerParams) -> None:
    lines = ["# senn-icu scalers v1", "block\tindex\tlo\thi\tmedian\tiqr"]
    for block, prefix in (("series", ""), ("static", "static_")):
        cols = [getattr(params, prefix + f) for f in _SCALER_FIELDS]
        for k in range(len(cols[0])):
            lines.append("\t".join([block, str(k)] + [repr(float(c[k])) for c in cols]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scalers(path) -> ScalerParams:
    rows: dict[str, list[list[float]]] = {"series": [], "static": []}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("block"):
            continue
        parts = line.split("\t")
        rows[parts[0]].append([float(v) for v in parts[2:6]])
    s, st = np.array(rows["series"]), np.array(rows["static"])
    return ScalerParams(s[:, 0], s[:, 1], s[:, 2], s[:, 3], st[:, 0], st[:, 1], st[:, 2], st[:, 3])


# ---------------------------------------------------------------------------
# cohort file
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def _row_format(d: int) -> str:
    return ",".join(["%r"] * d)


def write_cohort(path, records: Sequence[PatientRecord]) -> None:
    """One ``P,id,los,death_hour,static...`` header per stay, then ``hour,values...`` lines."""
    d_x = records[0].series.values.shape[1] if records else D_X
    d_s = len(records[0].static) if records else D_S
    out = [
        "# senn-icu cohort",
        f"# schema_version={COHORT_SCHEMA_VERSION}",
        f"# d_x={d_x}",
        f"# d_s={d_s}",
        f"# n_patients={len(records)}",
    ]
    for r in records:
        if r.scaled:
            raise ValueError("write_cohort stores raw records only")
        death = "" if r.death_hour is None else str(r.death_hour)
        out.append(",".join(["P", str(r.patient_id), str(r.los_hours), death] + [_fmt(v) for v in r.static]))
        fmt = _row_format(r.series.values.shape[1])
        for t, row in enumerate(r.series.values.tolist()):
            out.append(f"{t}," + (fmt % tuple(row)).replace("nan", ""))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_cohort(path) -> list[PatientRecord]:
    records: list[PatientRecord] = []
    meta: dict[str, str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line:
            continue
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].strip().split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        if not line.startswith("P,"):
            raise ValueError(f"{path}:{i}: expected a patient header line")
        version = int(meta.get("schema_version", COHORT_SCHEMA_VERSION))
        if version != COHORT_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported cohort schema version {version}")
        parts = line.split(",")
        pid, los = int(parts[1]), int(parts[2])
        death = int(parts[3]) if parts[3] else None
        static = np.array([float(v) for v in parts[4:]])
        rows = lines[i : i + los]
        if len(rows) != los:
            raise ValueError(f"{path}: patient {pid} truncated")
        values = np.array(
            [[float(v) if v else np.nan for v in row.split(",")[1:]] for row in rows], dtype=np.float64
        )
        i += los
        records.append(PatientRecord(pid, static, build_mask(values), death))
    n = meta.get("n_patients")
    if n is not None and int(n) != len(records):
        raise ValueError(f"{path}: header says {n} patients, found {len(records)}")
    return records
