"""Command-line interface: ``cimeta {transport,loso,diagnose,screen} CONFIG``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 estimation
failure (outputs that could be computed are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import evaluate, transport
from .ipd_core import (
    Covariate, CovariateSchema, DataError, MetaDataset, apply_transforms, load_dataset, partition,
)

log = logging.getLogger("cimeta")

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3
IMPLIED_WEIGHT_TOLERANCE = 0.2

_KEYS = {
    "": {"config_version", "data", "covariates", "transforms", "analysis", "bootstrap", "screening",
         "output"},
    "data": {"path", "treatment", "control"},
    "covariates": {"name", "kind", "levels"},
    "transforms": {"covariate", "kind"},
    "analysis": {"target", "estimators", "participation_method", "clip_epsilon", "bandwidth_method",
                 "bandwidth_seed", "outcome_covariates", "participation_covariates",
                 "treatment_covariates", "meta_regression_covariates", "n_jobs"},
    "bootstrap": {"replicates", "seed", "level"},
    "screening": {"alpha", "candidates"},
    "output": {"dir"},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data_path: Path
    schema: CovariateSchema
    treatment_pair: tuple[str, str]
    target: str = "loso"
    estimators: tuple[str, ...] = ("om",)
    participation_method: str = "logistic"
    clip_epsilon: float = 0.0
    bandwidth_method: str = "likelihood-cv"
    bandwidth_seed: int = 0
    outcome_covariates: tuple[str, ...] | None = None
    participation_covariates: tuple[str, ...] | None = None
    treatment_covariates: tuple[str, ...] | None = None
    meta_regression_covariates: tuple[str, ...] | None = None
    n_jobs: int = 1
    bootstrap_replicates: int = 0
    bootstrap_seed: int | None = None
    ci_level: float = 0.95
    screening_alpha: float = 0.05
    screening_candidates: tuple[str, ...] | None = None
    transforms: tuple[tuple[str, str], ...] = ()
    output_dir: Path = field(default_factory=lambda: Path("cimeta-output"))

    @property
    def settings(self) -> evaluate.EstimatorSettings:
        return evaluate.EstimatorSettings(
            participation_method=self.participation_method, clip_epsilon=self.clip_epsilon,
            outcome_covariates=self.outcome_covariates,
            participation_covariates=self.participation_covariates,
            treatment_covariates=self.treatment_covariates,
            meta_regression_covariates=self.meta_regression_covariates,
            bandwidth_seed=self.bandwidth_seed)

    @property
    def bootstrap(self) -> evaluate.BootstrapSpec | None:
        if self.bootstrap_replicates <= 0:
            return None
        return evaluate.BootstrapSpec(self.bootstrap_replicates, self.bootstrap_seed)


def _locate(text: str, section: str, key: str) -> str:
    """Best-effort ``line N`` for ``key`` inside ``[section]`` of the raw config text."""
    current = ""
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[\[?\s*([^\]]+?)\s*\]\]?\s*$", line)
        if m:
            current = m.group(1)
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return f"line {i}"
    return "line ?"


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration; every problem names its field and line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    def fail(section, key, message):
        where = _locate(text, section, key)
        name = f"[{section}].{key}" if section else key
        raise ConfigError(f"{path}: {where}: {name}: {message}")

    def check_keys(table, section):
        if not isinstance(table, dict):
            fail("", section, "must be a table")
        for k in table:
            if k not in _KEYS[section]:
                fail(section, k, "unknown key")

    check_keys(raw, "")
    version = raw.get("config_version")
    if version != CONFIG_VERSION:
        fail("", "config_version", f"must be {CONFIG_VERSION}, got {version!r}")

    def get(section, key, kind, default=None, required=False):
        table = raw.get(section, {})
        if key not in table:
            if required:
                fail(section, key, "is required")
            return default
        value = table[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind == "strlist":
            if not isinstance(value, list) or not all(isinstance(v, (str, int)) for v in value):
                fail(section, key, "must be a list of strings")
            return tuple(str(v) for v in value)
        if kind is str and isinstance(value, int) and not isinstance(value, bool):
            value = str(value)
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            fail(section, key, f"must be of type {kind.__name__}")
        return value

    for section in ("data", "analysis", "bootstrap", "screening", "output"):
        if section in raw:
            check_keys(raw[section], section)
    if "data" not in raw:
        fail("", "data", "section is required")

    data_path = Path(get("data", "path", str, required=True))
    if not data_path.is_absolute():
        data_path = path.parent / data_path
    pair = (get("data", "treatment", str, required=True), get("data", "control", str, required=True))
    if pair[0] == pair[1]:
        fail("data", "control", "must differ from treatment")

    entries = raw.get("covariates", [])
    if not isinstance(entries, list):
        fail("", "covariates", "must be an array of tables [[covariates]]")
    covs = []
    for i, entry in enumerate(entries):
        check_keys(entry, "covariates")
        try:
            covs.append(Covariate(str(entry.get("name", "")), entry.get("kind", "continuous"),
                                  tuple(entry.get("levels", ()))))
        except (ValueError, TypeError) as exc:
            fail("covariates", "name", f"entry {i + 1}: {exc}")
    try:
        schema = CovariateSchema(tuple(covs))
    except ValueError as exc:
        fail("covariates", "name", str(exc))

    transforms = []
    for entry in raw.get("transforms", []):
        check_keys(entry, "transforms")
        name, kind = entry.get("covariate"), entry.get("kind")
        if name not in schema.names or schema[name].is_categorical:
            fail("transforms", "covariate", f"{name!r} is not a declared continuous covariate")
        if kind not in ("log", "standardize"):
            fail("transforms", "kind", f"must be 'log' or 'standardize', got {kind!r}")
        transforms.append((name, kind))

    estimators = get("analysis", "estimators", "strlist", ("om",))
    for e in estimators:
        if e not in evaluate.ESTIMATOR_IDS:
            fail("analysis", "estimators", f"unknown estimator {e!r}; choose from {list(evaluate.ESTIMATOR_IDS)}")
    method = get("analysis", "participation_method", str, "logistic")
    if method not in ("logistic", "kernel"):
        fail("analysis", "participation_method", "must be 'logistic' or 'kernel'")
    clip = get("analysis", "clip_epsilon", float, 0.0)
    if not 0 <= clip < 0.5:
        fail("analysis", "clip_epsilon", "must lie in [0, 0.5)")
    bw = get("analysis", "bandwidth_method", str, "likelihood-cv")
    if bw != "likelihood-cv":
        fail("analysis", "bandwidth_method", "only 'likelihood-cv' is supported")
    cov_lists = {}
    for key in ("outcome_covariates", "participation_covariates", "treatment_covariates",
                "meta_regression_covariates"):
        value = get("analysis", key, "strlist")
        if value is not None:
            unknown = [v for v in value if v not in schema.names]
            if unknown:
                fail("analysis", key, f"unknown covariates {unknown}")
        cov_lists[key] = value
    n_jobs = get("analysis", "n_jobs", int, 1)
    if n_jobs < 1:
        fail("analysis", "n_jobs", "must be >= 1")

    reps = get("bootstrap", "replicates", int, 0)
    if reps < 0:
        fail("bootstrap", "replicates", "must be >= 0")
    seed = get("bootstrap", "seed", int)
    if reps > 0 and seed is None:
        fail("bootstrap", "seed", "is required when replicates > 0")
    level = get("bootstrap", "level", float, 0.95)
    if not 0 < level < 1:
        fail("bootstrap", "level", "must lie in (0, 1)")
    alpha = get("screening", "alpha", float, 0.05)
    if not 0 < alpha < 1:
        fail("screening", "alpha", "must lie in (0, 1)")
    candidates = get("screening", "candidates", "strlist")
    if candidates is not None and any(c not in schema.names for c in candidates):
        fail("screening", "candidates", "lists covariates missing from [[covariates]]")
    out = Path(get("output", "dir", str, "cimeta-output"))
    if not out.is_absolute():
        out = path.parent / out

    return RunConfig(
        data_path=data_path, schema=schema, treatment_pair=pair,
        target=str(get("analysis", "target", str, "loso")), estimators=estimators,
        participation_method=method, clip_epsilon=clip, bandwidth_method=bw,
        bandwidth_seed=get("analysis", "bandwidth_seed", int, 0), n_jobs=n_jobs,
        bootstrap_replicates=reps, bootstrap_seed=seed, ci_level=level,
        screening_alpha=alpha, screening_candidates=candidates, transforms=tuple(transforms),
        output_dir=out, **cov_lists)


def load_run_dataset(config: RunConfig) -> MetaDataset:
    ds = load_dataset(config.data_path, config.schema, config.treatment_pair)
    return apply_transforms(ds, config.transforms)


# ------------------------------------------------------------------------------------------------
# formatting
# ------------------------------------------------------------------------------------------------

def fmt3(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "NA"
    s = f"{x:.3f}"
    return "0.000" if s == "-0.000" else s


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _dumps(record) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False)


COLUMN_TITLES = {"om": "OM", "ipw": "IPW", "ipw-h": "IPW-h", "np-ipw": "np IPW", "np-ipw-h": "np IPW-h",
                 "dr": "DR", "fe-ma": "FE MA", "re-ma": "RE MA", "meta-reg": "Meta-reg"}


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = []
    for r in rows:
        first = r[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join([first, *rest]).rstrip())
    return "\n".join(lines) + "\n"


def render_report_table(report: evaluate.EvalReport) -> str:
    """Aligned text table: one row per target, then the two summary rows."""
    header = ["Target Study", "Observed TE", *(COLUMN_TITLES[e] for e in report.estimators)]
    rows = [header]
    notes = []
    for t in report.targets:
        row = [t, fmt3(report.observed[t].te)]
        for e in report.estimators:
            cell = report.cells[(t, e)]
            if cell.ok:
                row.append(fmt3(cell.estimate))
            else:
                row.append("FAIL")
                notes.append(f"  target {t}, {e}: {cell.failure}")
        rows.append(row)
    summaries = [report.summary(e) for e in report.estimators]
    rows.append(["Avg Abs Diff", "", *(fmt3(s.avg_abs_diff) for s in summaries)])
    rows.append(["St Abs Diff", "", *(fmt3(s.st_abs_diff) for s in summaries)])
    text = _align(rows)
    if notes:
        text += "\nFailed cells:\n" + "\n".join(notes) + "\n"
    return text


def report_records(report: evaluate.EvalReport) -> list[dict]:
    records = []
    for t in report.targets:
        obs = report.observed[t]
        for e in report.estimators:
            c = report.cells[(t, e)]
            rec = {"kind": "cell", "target": t, "estimator": e,
                   "estimate": _num(c.estimate), "estimate_display": fmt3(c.estimate) if c.ok else "FAIL",
                   "failure": c.failure, "observed_te": _num(obs.te), "observed_te_display": fmt3(obs.te),
                   "observed_se": _num(obs.se), "n_a": obs.n_a, "n_a_prime": obs.n_a_prime}
            if c.ci is not None:
                rec.update(ci_level=c.ci[0], ci_lo=_num(c.ci[1]), ci_hi=_num(c.ci[2]))
            records.append(rec)
    for e in report.estimators:
        s = report.summary(e)
        for metric, value in (("avg_abs_diff", s.avg_abs_diff), ("st_abs_diff", s.st_abs_diff),
                              ("st_abs_diff_sum", s.st_abs_diff_sum)):
            records.append({"kind": "summary", "metric": metric, "estimator": e, "value": _num(value),
                            "display": fmt3(value), "n_ok": s.n_ok, "n_failed": s.n_failed})
    return records


def _write_lines(path: Path, records) -> None:
    path.write_text("".join(_dumps(r) + "\n" for r in records), encoding="utf-8")


def _diagnostics_record(diag: transport.WeightDiagnostics) -> dict:
    return {
        "n_target": diag.n_target,
        "normalized": diag.normalized,
        "implied_weight_sum": _num(diag.implied_weight_sum),
        "imbalance_term": _num(diag.imbalance_term),
        "ess_a": _num(diag.ess_a), "ess_a_prime": _num(diag.ess_a_prime),
        "n_a": int(diag.is_arm_a.sum()), "n_a_prime": int((~diag.is_arm_a).sum()),
        "top_decile_share": _num(diag.top_decile_share),
        "n_no_support": diag.n_no_support,
        "separation_detected": diag.separation_detected,
        "studies": [{"study": s.study_id, "n_a": s.n_a, "n_a_prime": s.n_a_prime,
                     "weight_a": _num(s.weight_a), "weight_a_prime": _num(s.weight_a_prime),
                     "implied_weight": _num(s.implied_weight), "implied_te": _num(s.implied_te)}
                    for s in diag.studies],
    }


# ------------------------------------------------------------------------------------------------
# commands
# ------------------------------------------------------------------------------------------------

def _single_target(config: RunConfig, override: str | None) -> str:
    target = override or config.target
    if target == "loso":
        raise ConfigError("[analysis].target: this command needs a named study (or --target)")
    return target


def cmd_transport(config: RunConfig, target: str | None = None) -> int:
    """Run the configured estimators against one target study and write table, records and diagnostics."""
    target = _single_target(config, target)
    ds = load_run_dataset(config)
    assign = partition(ds, target)
    cells = evaluate.estimate_cells(ds, assign, config.estimators, config.settings, config.bootstrap,
                                    config.ci_level, config.n_jobs)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = [["Estimator", "Estimate", "CI lo", "CI hi"]]
    records, diagnostics = [], {}
    for c in cells:
        ci = c.ci or (None, None, None)
        rows.append([COLUMN_TITLES[c.estimator], fmt3(c.estimate) if c.ok else "FAIL",
                     fmt3(ci[1]) if c.ci else "", fmt3(ci[2]) if c.ci else ""])
        rec = {"kind": "estimate", "target": target, "estimator": c.estimator,
               "estimate": _num(c.estimate), "estimate_display": fmt3(c.estimate) if c.ok else "FAIL",
               "failure": c.failure, "n_target": assign.n_target}
        if c.ok and c.result.arm_means is not None:
            rec.update(mean_a=_num(c.result.arm_means[0]), mean_a_prime=_num(c.result.arm_means[1]))
        if c.ci:
            rec.update(ci_level=c.ci[0], ci_lo=_num(c.ci[1]), ci_hi=_num(c.ci[2]),
                       ci_lo_display=fmt3(c.ci[1]), ci_hi_display=fmt3(c.ci[2]))
        records.append(rec)
        if c.ok and c.result.diagnostics is not None:
            diagnostics[c.estimator] = _diagnostics_record(c.result.diagnostics)
    text = f"Target study {target} (n = {assign.n_target})\n" + _align(rows)
    failed = [c for c in cells if not c.ok]
    if failed:
        text += "\nFailed estimators:\n" + "".join(f"  {c.estimator}: {c.failure}\n" for c in failed)
    stem = f"transport_{_safe(target)}"
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    _write_lines(out / f"{stem}.jsonl", records)
    (out / f"{stem}_diagnostics.json").write_text(
        json.dumps(diagnostics, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    sys.stdout.write(text)
    for c in failed:
        sys.stderr.write(f"estimation failed: {c.estimator}: {c.failure}\n")
    return EXIT_ESTIMATION if failed else EXIT_OK


def cmd_loso(config: RunConfig) -> int:
    """Leave-one-study-out evaluation over every study; writes ``loso.txt`` and ``loso.jsonl``."""
    ds = load_run_dataset(config)
    report = evaluate.loso_evaluate(ds, config.estimators, config.settings, config.bootstrap,
                                    config.ci_level, config.n_jobs)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    text = render_report_table(report)
    (out / "loso.txt").write_text(text, encoding="utf-8")
    _write_lines(out / "loso.jsonl", report_records(report))
    sys.stdout.write(text)
    failed = [c for c in report.cells.values() if not c.ok]
    return EXIT_ESTIMATION if failed else EXIT_OK


def overlap_summary(ds: MetaDataset, assign) -> dict:
    """Per-covariate target-versus-contributing ranges (continuous) or level shares (categorical)."""
    out = {}
    for cov in ds.schema:
        x = ds.column(cov.name)
        t, c = x[assign.target_rows], x[assign.contributing_rows]
        if cov.is_categorical:
            out[cov.name] = {
                "target": {lv: float(np.mean(t == lv)) for lv in cov.levels},
                "contributing": {lv: float(np.mean(c == lv)) for lv in cov.levels}}
        else:
            entry = {}
            for label, v in (("target", t), ("contributing", c)):
                entry[label] = {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean())}
            lo, hi = entry["target"]["min"], entry["target"]["max"]
            entry["contributing_share_in_target_range"] = float(np.mean((c >= lo) & (c <= hi)))
            entry["target_share_in_contributing_range"] = float(
                np.mean((t >= entry["contributing"]["min"]) & (t <= entry["contributing"]["max"])))
            out[cov.name] = entry
    return out


def diagnose(ds: MetaDataset, target: str, settings: evaluate.EstimatorSettings) -> dict:
    """Weight diagnostics for one target, as a JSON-ready dict plus the weights table rows."""
    assign = partition(ds, target)
    part = transport.fit_participation(assign, ds, settings.participation_method, settings.clip_epsilon,
                                       settings.participation_covariates, seed=settings.bandwidth_seed)
    treat = transport.fit_treatment_model(assign, ds, settings.treatment_covariates)
    diag = transport.compute_transport_weights(assign, ds, part, treat)
    record = {"target": target, "participation_method": settings.participation_method,
              "clip_epsilon": settings.clip_epsilon, **_diagnostics_record(diag)}
    dev = abs(diag.implied_weight_sum - 1.0)
    record["implied_weight_flag"] = bool(dev > IMPLIED_WEIGHT_TOLERANCE)
    try:
        record["hajek_implied_weight_sum"] = _num(diag.hajek().implied_weight_sum)
    except transport.TransportError:
        record["hajek_implied_weight_sum"] = None
    q = np.quantile(diag.weights, [0.0, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0])
    record["weight_quantiles"] = dict(zip(["min", "q25", "median", "q75", "q90", "q99", "max"],
                                          (float(v) for v in q)))
    record["overlap"] = overlap_summary(ds, assign)
    rows = [(int(r), str(ds.study[r]), str(ds.arm[r]), float(w), float(p), float(e))
            for r, w, p, e in zip(diag.rows, diag.weights, diag.participation_prob, diag.treatment_prob)]
    return {"record": record, "weights": rows}


def cmd_diagnose(config: RunConfig, target: str | None = None) -> int:
    """Write implied study weights, ESS, overlap summaries and a per-individual weight dump."""
    target = _single_target(config, target)
    ds = load_run_dataset(config)
    result = diagnose(ds, target, config.settings)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = f"diagnose_{_safe(target)}"
    (out / f"{stem}.json").write_text(json.dumps(result["record"], sort_keys=True, indent=2,
                                                 allow_nan=False) + "\n", encoding="utf-8")
    with (out / f"weights_{_safe(target)}.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row_id", "study", "arm", "weight", "participation_prob", "treatment_prob"])
        for row in result["weights"]:
            writer.writerow([row[0], row[1], row[2], *(repr(v) for v in row[3:])])
    rec = result["record"]
    flag = "  <-- overlap problem" if rec["implied_weight_flag"] else ""
    sys.stdout.write(
        f"target {target}: implied weight sum {fmt3(rec['implied_weight_sum'])}{flag}\n"
        f"ESS {fmt3(rec['ess_a'])} / {rec['n_a']} (arm a), {fmt3(rec['ess_a_prime'])} / {rec['n_a_prime']} (arm a')\n"
        f"top-decile weight share {fmt3(rec['top_decile_share'])}\n")
    return EXIT_OK


def cmd_screen(config: RunConfig) -> int:
    ds = load_run_dataset(config)
    candidates = config.screening_candidates or ds.schema.names
    res = evaluate.screen_effect_modifiers(ds, candidates, config.screening_alpha)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    record = {"alpha": res.alpha, "selected": list(res.selected), "pvalues": dict(res.pvalues)}
    (out / "screening.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for name, p in res.pvalues.items():
        sys.stdout.write(f"{name:<24} p = {p:.4g}{'  selected' if name in res.selected else ''}\n")
    return EXIT_OK


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cimeta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("transport", "estimate effects for one target study"),
                            ("loso", "leave-one-study-out evaluation"),
                            ("diagnose", "weight and overlap diagnostics for one target"),
                            ("screen", "screen covariates for treatment interactions")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides [output].dir)")
        if name in ("transport", "diagnose"):
            p.add_argument("--target", help="target study id (overrides [analysis].target)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.out:
            config = RunConfig(**{**config.__dict__, "output_dir": Path(args.out)})
        if args.command == "transport":
            return cmd_transport(config, args.target)
        if args.command == "loso":
            return cmd_loso(config)
        if args.command == "diagnose":
            return cmd_diagnose(config, args.target)
        return cmd_screen(config)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except evaluate.ESTIMATION_ERRORS as exc:
        sys.stderr.write(f"estimation failed: {type(exc).__name__}: {exc}\n")
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
