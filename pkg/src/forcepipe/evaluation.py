"""Splitting, R^2, experiment drivers and rank statistics.

R^2 is computed on de-standardized force (newtons), pooled over the
evaluated segments. Splits are segment-level: a holdout fraction is drawn
first, then the remainder is cut into ``k`` folds.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from forcepipe.config import ExperimentConfig
from forcepipe.dataset import DatasetManifest, threads_from_env
from forcepipe.errors import ConstantTarget, DegenerateInput, EmptySet, MissingModel, TooSmall
from forcepipe.model import (
    IMU_SENSORS,
    SegmentBatch,
    Standardizer,
    build_model,
    load_model,
    save_model,
    train,
)
from forcepipe.preprocess import TrialSegments, segment_manifest

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# metric
# --------------------------------------------------------------------------

def r_squared(measured, estimated) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    y = np.asarray(measured, dtype=np.float64).ravel()
    yhat = np.asarray(estimated, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise DegenerateInput(f"length mismatch {y.shape} vs {yhat.shape}")
    if y.size < 2:
        raise TooSmall("R^2 needs at least two samples")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0.0:
        raise ConstantTarget("measured values are constant")
    return float(1.0 - np.sum((yhat - y) ** 2) / ss_tot)


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

MIN_SPLIT_SIZE = 20


@dataclass(frozen=True)
class SplitPlan:
    holdout_fraction: float = 0.10
    k: int = 5
    seed: int = 0
    scheme: str = "intra"


@dataclass
class Split:
    holdout: np.ndarray
    folds: list[np.ndarray]

    def train_val(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        train_idx = np.concatenate([f for i, f in enumerate(self.folds) if i != fold])
        return np.sort(train_idx), self.folds[fold]


def split(dataset, plan: SplitPlan = SplitPlan()) -> Split:
    """Seeded holdout + k-fold partition of ``range(len(dataset))``.

    ``dataset`` may be a size or anything with ``len``. The holdout size is
    ``floor(n * holdout_fraction)``; folds differ in size by at most one.
    """
    n = int(dataset) if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n < MIN_SPLIT_SIZE:
        raise TooSmall(f"need at least {MIN_SPLIT_SIZE} items to split, got {n}")
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(n)
    n_hold = int(math.floor(n * plan.holdout_fraction))
    rest = perm[n_hold:]
    return Split(np.sort(perm[:n_hold]), [np.sort(f) for f in np.array_split(rest, plan.k)])


def split_by_group(groups, plan: SplitPlan = SplitPlan()) -> Split:
    """Like :func:`split` but whole groups (e.g. subjects) stay on one side."""
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if len(labels) < plan.k + 1:
        raise TooSmall(f"need at least {plan.k + 1} groups for a group split, got {len(labels)}")
    rng = np.random.default_rng(plan.seed)
    perm = labels[rng.permutation(len(labels))]
    n_hold = max(1, int(math.floor(len(labels) * plan.holdout_fraction)))

    def members(chosen):
        return np.flatnonzero(np.isin(groups, chosen))

    return Split(members(perm[:n_hold]), [members(f) for f in np.array_split(perm[n_hold:], plan.k)])


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    r2_train: float | None
    r2_val: float | None
    r2_holdout: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


@dataclass
class UnitResult:
    unit: str
    n_segments: int
    n_holdout: int
    r2_holdout: float
    folds: list[FoldResult] = field(default_factory=list)
    predictions: list[tuple[str, float, float, float]] = field(default_factory=list, repr=False)


def _sd(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


@dataclass
class ExperimentReport:
    config: dict
    seeds: dict
    units: list[UnitResult]
    split_note: str = ""

    @property
    def per_unit(self) -> dict[str, float]:
        return {u.unit: u.r2_holdout for u in self.units}

    def aggregate_values(self) -> list[float]:
        """Values summarized by mean/SD: per-subject holdout R^2 (intra) or per-fold holdout R^2 (inter)."""
        if len(self.units) == 1:
            return [f.r2_holdout for f in self.units[0].folds]
        return [u.r2_holdout for u in self.units]

    @property
    def mean(self) -> float:
        return float(np.mean(self.aggregate_values()))

    @property
    def sd(self) -> float:
        return _sd(self.aggregate_values())

    def to_json(self) -> dict:
        units = []
        for u in self.units:
            d = asdict(u)
            d.pop("predictions")
            units.append(d)
        return {
            "config": self.config,
            "seeds": self.seeds,
            "split_note": self.split_note,
            "units": units,
            "aggregate": {"mean_r2": self.mean, "sd_r2": self.sd, "n": len(self.aggregate_values())},
        }


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_report(report: ExperimentReport, out_dir, name: str = "report") -> dict[str, Path]:
    """JSON report plus per-unit, loss-curve and prediction CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "json": out_dir / f"{name}.json",
        "units": out_dir / f"{name}_units.csv",
        "curves": out_dir / f"{name}_curves.csv",
        "predictions": out_dir / f"{name}_predictions.csv",
    }
    files["json"].write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files["units"].write_text(
        _csv_text(["unit", "r2"], [(u.unit, repr(u.r2_holdout)) for u in report.units]), encoding="utf-8")
    curve_rows = []
    for u in report.units:
        for f in u.folds:
            for e, tl in enumerate(f.train_loss):
                vl = f.val_loss[e] if e < len(f.val_loss) else ""
                curve_rows.append((u.unit, f.fold, e + 1, repr(tl), repr(vl) if vl != "" else ""))
    files["curves"].write_text(
        _csv_text(["unit", "fold", "epoch", "train_loss", "val_loss"], curve_rows), encoding="utf-8")
    files["predictions"].write_text(_csv_text(
        ["unit", "trial_id", "timestamp_s", "measured_N", "estimated_N"],
        [(u.unit, t, repr(ts), repr(m), repr(e)) for u in report.units for (t, ts, m, e) in u.predictions],
    ), encoding="utf-8")
    return files


# --------------------------------------------------------------------------
# experiment drivers
# --------------------------------------------------------------------------

def collect_segments(source, config: ExperimentConfig) -> list[TrialSegments]:
    """Segments for the configured condition/subjects from a manifest or a segment list."""
    if isinstance(source, DatasetManifest):
        segs = segment_manifest(source, config.segment_ms, config.condition, config.subjects)
    else:
        keep = None if config.subjects is None else set(config.subjects)
        segs = [
            s for s in source
            if s.condition == config.condition and s.segment_ms == config.segment_ms
            and (keep is None or s.subject_id in keep)
        ]
    segs = [s for s in segs if len(s)]
    if not segs:
        raise EmptySet(f"no {config.condition} segments at {config.segment_ms} ms for the selected subjects")
    return segs


def experiment_units(segments: list[TrialSegments], config: ExperimentConfig) -> list[tuple[str, SegmentBatch]]:
    if config.scheme == "intra":
        subjects = sorted({s.subject_id for s in segments})
        return [
            (sid, SegmentBatch.from_segments([s for s in segments if s.subject_id == sid]))
            for sid in subjects
        ]
    return [("pooled", SegmentBatch.from_segments(segments))]


def _unit_split(batch: SegmentBatch, config: ExperimentConfig) -> Split:
    plan = SplitPlan(config.holdout_fraction, config.k_folds, config.seed, config.scheme)
    if config.scheme == "inter" and config.subject_disjoint:
        subj = np.asarray(batch.subject_ids)[batch.trial_index]
        return split_by_group(subj, plan)
    return split(len(batch), plan)


def _fold_model(config: ExperimentConfig, fold: int):
    return build_model(
        config.scheme, config.condition, config.fusion, config.segment_ms,
        modalities=config.modalities, imu_channels=config.imu_channels,
        width=config.width, seed=config.seed + fold,
    )


def _predict_newtons(model, st: Standardizer, batch: SegmentBatch) -> np.ndarray:
    return st.destandardize_target(model.predict(st.transform(batch)))


def run_unit(name: str, batch: SegmentBatch, config: ExperimentConfig, model_dir=None) -> UnitResult:
    sp = _unit_split(batch, config)
    hold = batch.take(sp.holdout)
    folds, hold_preds = [], []
    for fold in range(config.n_folds_run):
        tr_idx, va_idx = sp.train_val(fold)
        tr, va = batch.take(tr_idx), batch.take(va_idx)
        st = Standardizer.fit(tr)
        model = _fold_model(config, fold)
        res = train(model, st.transform(tr), st.transform(va), config.train_config(config.seed + fold))
        pred_hold = _predict_newtons(model, st, hold)
        hold_preds.append(pred_hold)
        folds.append(FoldResult(
            fold=fold,
            r2_train=r_squared(tr.force, _predict_newtons(model, st, tr)),
            r2_val=r_squared(va.force, _predict_newtons(model, st, va)),
            r2_holdout=r_squared(hold.force, pred_hold),
            train_loss=[float(v) for v in res.train_loss],
            val_loss=[float(v) for v in res.val_loss],
        ))
        if model_dir is not None and fold == 0:
            save_model(model, Path(model_dir) / f"{name}.fpck", st)
        log.info("%s fold %d: holdout R2 %.4f", name, fold, folds[-1].r2_holdout)
    first = hold_preds[0]
    predictions = [
        (batch.trial_ids[ti], float(ts), float(m), float(e))
        for ti, ts, m, e in zip(hold.trial_index, hold.time_s, hold.force, first)
    ]
    return UnitResult(
        unit=name,
        n_segments=len(batch),
        n_holdout=len(hold),
        r2_holdout=float(np.mean([f.r2_holdout for f in folds])),
        folds=folds,
        predictions=predictions,
    )


def _seeds(config: ExperimentConfig) -> dict:
    return {
        "split": config.seed,
        "model_init": [config.seed + f for f in range(config.n_folds_run)],
        "shuffle": [config.seed + f for f in range(config.n_folds_run)],
    }


def _split_note(config: ExperimentConfig) -> str:
    if config.scheme == "inter" and config.subject_disjoint:
        return "inter-subject, subject-disjoint holdout and folds"
    if config.scheme == "inter":
        return "inter-subject, random segment-level split of pooled data (not subject-disjoint)"
    return "intra-subject, random segment-level split per subject"


def run_experiment(source, config: ExperimentConfig, model_dir=None, segments=None) -> ExperimentReport:
    """Train and evaluate per subject (intra) or on pooled data (inter).

    ``source`` is a :class:`DatasetManifest` or a list of
    :class:`TrialSegments` (e.g. from the segment store).
    """
    segs = collect_segments(source if segments is None else segments, config)
    units = experiment_units(segs, config)
    workers = min(threads_from_env(), len(units))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda u: run_unit(u[0], u[1], config, model_dir), units))
    else:
        results = [run_unit(n, b, config, model_dir) for n, b in units]
    return ExperimentReport(config=config.to_dict(), seeds=_seeds(config), units=results,
                            split_note=_split_note(config))


def evaluate_saved(source, config: ExperimentConfig, model_dir) -> ExperimentReport:
    """Re-evaluate checkpoints written by :func:`run_experiment` on their holdout sets."""
    segs = collect_segments(source, config)
    results = []
    for name, batch in experiment_units(segs, config):
        path = Path(model_dir) / f"{name}.fpck"
        model, st = load_model(path)
        if st is None:
            raise MissingModel(f"{path} has no standardization statistics")
        hold = batch.take(_unit_split(batch, config).holdout)
        pred = _predict_newtons(model, st, hold)
        r2 = r_squared(hold.force, pred)
        results.append(UnitResult(
            unit=name, n_segments=len(batch), n_holdout=len(hold), r2_holdout=r2,
            folds=[FoldResult(0, None, None, r2)],
            predictions=[(batch.trial_ids[ti], float(ts), float(m), float(e))
                         for ti, ts, m, e in zip(hold.trial_index, hold.time_s, hold.force, pred)],
        ))
    return ExperimentReport(config=config.to_dict(), seeds=_seeds(config), units=results,
                            split_note=_split_note(config))


# --------------------------------------------------------------------------
# ablation and fusion comparison
# --------------------------------------------------------------------------

MODALITY_SUBSETS = {
    "time+freq": ("emg_time", "emg_freq"),
    "time+imu": ("emg_time", "imu"),
    "freq+imu": ("emg_freq", "imu"),
    "time+freq+imu": ("emg_time", "emg_freq", "imu"),
}
IMU_SUBSETS = {
    "imu": None,
    "acc": IMU_SENSORS["acc"],
    "gyro": IMU_SENSORS["gyro"],
    "mag": IMU_SENSORS["mag"],
}


@dataclass
class ComparisonReport:
    kind: str
    rows: dict[str, ExperimentReport]

    def summary(self) -> list[dict]:
        return [
            {"name": name, "mean_r2": rep.mean, "sd_r2": rep.sd, "per_unit": rep.per_unit}
            for name, rep in self.rows.items()
        ]

    def to_json(self) -> dict:
        return {"kind": self.kind, "rows": self.summary(),
                "reports": {k: v.to_json() for k, v in self.rows.items()}}


def ablation_configs(config: ExperimentConfig) -> dict[str, ExperimentConfig]:
    out = {name: config.replace(modalities=mods, imu_channels=None) for name, mods in MODALITY_SUBSETS.items()}
    for name, chans in IMU_SUBSETS.items():
        out[f"{name}-only"] = config.replace(modalities=("imu",), imu_channels=chans)
    return out


def run_ablation(source, config: ExperimentConfig, rows=None) -> ComparisonReport:
    """Modality-subset and IMU-sensor ablation under one seed set."""
    segs = collect_segments(source, config)
    cfgs = ablation_configs(config)
    if rows is not None:
        cfgs = {k: v for k, v in cfgs.items() if k in rows}
    return ComparisonReport("ablation", {name: run_experiment(segs, cfg) for name, cfg in cfgs.items()})


def fusion_compare(source, config: ExperimentConfig) -> ComparisonReport:
    segs = collect_segments(source, config)
    return ComparisonReport("fusion", {
        f: run_experiment(segs, config.replace(fusion=f)) for f in ("feature", "input", "score")
    })


def write_comparison(report: ComparisonReport, out_dir, name: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"json": out_dir / f"{name}.json", "csv": out_dir / f"{name}.csv"}
    files["json"].write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files["csv"].write_text(_csv_text(
        ["name", "mean_r2", "sd_r2"],
        [(r["name"], repr(r["mean_r2"]), repr(r["sd_r2"])) for r in report.summary()],
    ), encoding="utf-8")
    return files


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

# studentized range statistic / sqrt(2) at alpha = 0.05, indexed by k (number of methods)
NEMENYI_Q_005 = {
    2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850,
    7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164,
}


@dataclass
class NemenyiResult:
    critical_difference: float
    mean_ranks: np.ndarray
    significant: np.ndarray   # k x k boolean, symmetric

    def pairs(self, names=None) -> list[tuple[str, str, float, bool]]:
        k = len(self.mean_ranks)
        names = list(names) if names is not None else [str(i) for i in range(k)]
        return [
            (names[i], names[j], float(abs(self.mean_ranks[i] - self.mean_ranks[j])), bool(self.significant[i, j]))
            for i in range(k) for j in range(i + 1, k)
        ]


@dataclass
class StatTestResult:
    statistic: float
    p_value: float
    mean_ranks: np.ndarray
    k: int
    n: int
    nemenyi: NemenyiResult | None = None


def _check_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise DegenerateInput("scores must be a methods x blocks matrix")
    if not np.all(np.isfinite(s)):
        raise DegenerateInput("scores must be finite")
    k, n = s.shape
    if k < 3 or n < 2:
        raise DegenerateInput(f"need k >= 3 methods and n >= 2 blocks, got {k} x {n}")
    return s


def block_ranks(scores) -> np.ndarray:
    """Rank methods within each block (column); 1 = highest score, ties averaged."""
    s = np.asarray(scores, dtype=np.float64)
    return np.apply_along_axis(lambda col: sps.rankdata(-col, method="average"), 0, s)


def friedman_test(scores) -> StatTestResult:
    """Friedman chi-square test over a methods x blocks score matrix."""
    s = _check_scores(scores)
    k, n = s.shape
    mean_ranks = block_ranks(s).mean(axis=1)
    stat = 12.0 * n / (k * (k + 1)) * (np.sum(mean_ranks**2) - k * (k + 1) ** 2 / 4.0)
    stat = max(float(stat), 0.0)
    p = float(np.clip(sps.chi2.sf(stat, k - 1), 0.0, 1.0))
    return StatTestResult(stat, p, mean_ranks, k, n)


def nemenyi_cd(k: int, n: int) -> float:
    if k not in NEMENYI_Q_005:
        raise DegenerateInput(f"Nemenyi table covers 2 <= k <= 10, got k={k}")
    if n < 1:
        raise DegenerateInput("need at least one block")
    return NEMENYI_Q_005[k] * math.sqrt(k * (k + 1) / (6.0 * n))


def nemenyi_posthoc(scores) -> NemenyiResult:
    """Pairwise significance at alpha = 0.05: mean-rank gap strictly above the CD."""
    s = _check_scores(scores)
    k, n = s.shape
    cd = nemenyi_cd(k, n)
    mean_ranks = block_ranks(s).mean(axis=1)
    gap = np.abs(mean_ranks[:, None] - mean_ranks[None, :])
    return NemenyiResult(cd, mean_ranks, gap > cd)


def rank_statistics(scores, force_posthoc: bool = False, alpha: float = 0.05) -> StatTestResult:
    """Friedman test, followed by Nemenyi when it rejects (or when forced)."""
    res = friedman_test(scores)
    if force_posthoc or res.p_value < alpha:
        res.nemenyi = nemenyi_posthoc(scores)
    return res
