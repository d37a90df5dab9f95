"""Experiment orchestration: instance generation, multi-trial runs, persistence, comparison.

Every trial owns an RNG stream keyed by (seed, trial index), so results do
not depend on worker count or execution order.  All files are written via
a temporary file and an atomic rename.
"""

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .denoisers import BernoulliGaussianPrior, ClipChannel, clip_power
from .gmamp import COV_MODES, run_bo_gmamp
from .gvamp import gvamp_se, run_gvamp
from .operator import KINDS, InvalidConfig, build_operator, compute_moments
from .records import GlmInstance, IterationTrace, TRACE_SCHEMA, to_db
from .se import run_se

log = logging.getLogger(__name__)

CONFIG_SCHEMA = 1
ALGORITHMS = ("bo-gmamp", "gvamp", "se", "gvamp-se")
PREDICTED = ("se", "gvamp-se")
MIN_NOISE_VARIANCE = 1e-12
RESULT_COLUMNS = ("t", "algorithm", "trial", "mse", "mse_db", "wall_ms")
AGGREGATE_COLUMNS = ("t", "algorithm", "n", "median_mse", "q25_mse", "q75_mse", "median_db")


@dataclass(frozen=True)
class ExperimentConfig:
    """Parameters of one experiment.

    Defaults are the desk-scale clipped-sensing setting: N=2048, kappa=30,
    delta=0.5, 40 dB SNR.
    """

    N: int = 2048
    delta: float = 0.5
    kappa: float = 30.0
    mu: float = 0.1
    clip_c: float = 2.0
    snr_db: float = 40.0
    T: int = 60
    damping_L: int = 3
    algorithms: tuple = ("bo-gmamp", "gvamp")
    trials: int = 20
    seed: int = 0
    cov_mode: str = "oracle"
    xi_optimized: bool = True
    theta_optimized: bool = True
    operator_kind: str = "fast-transform"
    complex_mode: bool = False
    se_samples: int = 200_000
    workers: int = 1
    record_timing: bool = False
    output: str = None
    schema_version: int = CONFIG_SCHEMA

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        self.validate()

    def validate(self):
        if self.schema_version != CONFIG_SCHEMA:
            raise InvalidConfig(f"config schema {self.schema_version} is not supported")
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 2):
            raise InvalidConfig("N must be an integer >= 2")
        if not 0 < self.delta <= 1:
            raise InvalidConfig("delta must lie in (0, 1]")
        if not 0 < self.mu <= 1:
            raise InvalidConfig("mu must lie in (0, 1]")
        if not self.kappa >= 1:
            raise InvalidConfig("kappa must be >= 1")
        if not self.clip_c > 0:
            raise InvalidConfig("clip level must be positive")
        if math.isnan(self.snr_db):
            raise InvalidConfig("snr_db is NaN")
        if self.T < 1 or self.damping_L < 1 or self.trials < 1 or self.workers < 1:
            raise InvalidConfig("T, damping_L, trials and workers must be >= 1")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise InvalidConfig(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
        if self.cov_mode not in COV_MODES:
            raise InvalidConfig(f"cov_mode must be one of {COV_MODES}")
        if self.operator_kind not in KINDS:
            raise InvalidConfig(f"operator_kind must be one of {KINDS}")
        if self.M < 1:
            raise InvalidConfig("delta * N rounds to zero measurements")

    @property
    def M(self):
        return int(round(self.delta * self.N))

    @property
    def L(self):
        return self.damping_L

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "L" in d:
            if "damping_L" in d and d["damping_L"] != d["L"]:
                raise InvalidConfig("both L and damping_L given with different values")
            d["damping_L"] = d.pop("L")
        if isinstance(d.get("algorithms"), str):
            d["algorithms"] = [d["algorithms"]]
        if "algorithm" in d:
            a = d.pop("algorithm")
            d["algorithms"] = [a] if isinstance(a, str) else a
        for key in ("snr_db", "clip_c"):
            if isinstance(d.get(key), str):
                d[key] = float(d[key])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["algorithms"] = list(self.algorithms)
        for key in ("snr_db", "clip_c"):
            if math.isinf(d[key]):
                d[key] = "inf"
        return d

    def config_hash(self):
        """Hash of everything that affects the numbers (not output path or worker count)."""
        d = self.to_dict()
        for key in ("output", "workers"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def expected_z_power(config):
    """E|z_m|^2 = (sum d^2 / M) E|x|^2 = 1/delta for the unit-power prior."""
    prior = BernoulliGaussianPrior(config.mu)
    return prior.second_moment * config.N / config.M


def noise_variance(config, z=None):
    """sigma^2 = P_clip / 10^(snr/10), floored at MIN_NOISE_VARIANCE.

    P_clip is the measured (1/M)||Clip(z)||^2 when ``z`` is given and its
    expectation under z ~ N(0, E|z|^2) otherwise (the state evolution's view).
    """
    if z is None:
        p = clip_power(config.clip_c, expected_z_power(config), config.complex_mode)
    else:
        p = float(np.mean(np.abs(ClipChannel(config.clip_c, 1.0).clip(z)) ** 2))
    s2 = 0.0 if math.isinf(config.snr_db) and config.snr_db > 0 else p / 10 ** (config.snr_db / 10)
    if s2 < MIN_NOISE_VARIANCE:
        log.info("noise variance %.3e raised to the floor %.0e", s2, MIN_NOISE_VARIANCE)
        s2 = MIN_NOISE_VARIANCE
    return float(s2)


def _trial_streams(config, trial):
    ss = np.random.SeedSequence([int(config.seed), int(trial)])
    op_ss, data_ss = ss.spawn(2)
    return int(op_ss.generate_state(1)[0]), np.random.default_rng(data_ss)


def generate_instance(config, trial=0):
    """Draw (operator, x, y) for one trial; deterministic in (config.seed, trial)."""
    op_seed, rng = _trial_streams(config, trial)
    op = build_operator(config.M, config.N, config.kappa, kind=config.operator_kind,
                        seed=op_seed, is_complex=config.complex_mode)
    prior = BernoulliGaussianPrior(config.mu)
    x = prior.sample(rng, config.N, config.complex_mode)
    z = op.apply(x)
    channel = ClipChannel(config.clip_c, noise_variance(config, z))
    y = channel.observe(z, rng)
    return GlmInstance(x_true=x, z_true=z, y=y, op=op, prior=prior, channel=channel,
                       seed=op_seed)


_SE_CACHE = {}


def predicted_trace(config, algorithm="se"):
    """State evolution for the config's spectrum (memoized per process)."""
    key = (algorithm, config.config_hash())
    if key not in _SE_CACHE:
        inst = generate_instance(config, 0)
        moments = compute_moments(inst.op, config.T, rescaled=True)
        channel = ClipChannel(config.clip_c, noise_variance(config))
        if algorithm == "se":
            tr = run_se(inst.prior, channel, moments, config.T, L=config.damping_L,
                        samples=config.se_samples, seed=config.seed,
                        xi_optimized=config.xi_optimized,
                        theta_optimized=config.theta_optimized,
                        is_complex=config.complex_mode)
            tr.controller = None
        else:
            tr = gvamp_se(inst.prior, channel, moments, config.T,
                          samples=config.se_samples, seed=config.seed,
                          is_complex=config.complex_mode)
        _SE_CACHE[key] = tr
    return _SE_CACHE[key]


def run_trial(config, trial, se_trace=None):
    """Simulated algorithms of one trial.  Returns {algorithm: trace or error string}."""
    inst = generate_instance(config, trial)
    moments = None
    out = {}
    for alg in config.algorithms:
        if alg in PREDICTED:
            continue
        try:
            if alg == "gvamp":
                tr = run_gvamp(inst, config.T, record_timing=config.record_timing)
            else:
                if moments is None:
                    moments = compute_moments(inst.op, config.T, rescaled=True)
                tr = run_bo_gmamp(inst, config.T, L=config.damping_L, cov_mode=config.cov_mode,
                                  xi_optimized=config.xi_optimized,
                                  theta_optimized=config.theta_optimized, se_trace=se_trace,
                                  se_samples=config.se_samples, se_seed=config.seed,
                                  moments=moments, record_timing=config.record_timing)
            tr.metadata.update(trial=trial, config_hash=config.config_hash())
            out[alg] = tr
        except Exception as exc:  # a failing trial is recorded, the run goes on
            log.warning("trial %d of %s failed: %r", trial, alg, exc)
            out[alg] = f"{type(exc).__name__}: {exc}"
    return out


def _run_trial_star(args):
    return run_trial(*args)


def _filled(mse, T):
    """Per-iteration MSE padded to length T with the last recorded value."""
    mse = np.asarray(mse, dtype=float)
    if len(mse) == 0:
        return np.full(T, np.nan)
    return np.concatenate([mse, np.full(T - len(mse), mse[-1])]) if len(mse) < T else mse[:T]


def aggregate(traces, T):
    """Median and interquartile range of the MSE across trials, per iteration.

    Traces that stopped early hold their last value.
    """
    curves = np.array([_filled(tr.mse, T) for tr in traces])
    q25, med, q75 = np.nanpercentile(curves, [25, 50, 75], axis=0)
    return {"median": med, "q25": q25, "q75": q75, "n": len(traces)}


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v))


def build_id():
    """Short digest of the package sources, standing in for a VCS revision."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    traces: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


def run_experiment(config, out_dir=None):
    """Run all algorithms over all trials; write traces, CSVs and a manifest if ``out_dir``."""
    out_dir = out_dir if out_dir is not None else config.output
    res = ExperimentResult(config=config)
    se_for_replay = None
    for alg in config.algorithms:
        if alg in PREDICTED:
            res.traces[alg] = [predicted_trace(config, alg)]
    if "bo-gmamp" in config.algorithms and config.cov_mode != "oracle":
        se_for_replay = predicted_trace(config, "se")
    jobs = [(config, k, se_for_replay) for k in range(config.trials)]
    if config.workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            per_trial = list(pool.map(_run_trial_star, jobs))
    else:
        per_trial = [_run_trial_star(j) for j in jobs]
    for k, outcome in enumerate(per_trial):
        for alg, tr in outcome.items():
            if isinstance(tr, str):
                res.failures.append({"trial": k, "algorithm": alg, "error": tr})
            else:
                res.traces.setdefault(alg, []).append(tr)
    for alg in config.algorithms:
        if res.traces.get(alg):
            res.aggregates[alg] = aggregate(res.traces[alg], config.T)
    if out_dir is not None:
        res.files = write_results(res, out_dir)
    return res


def write_results(res, out_dir):
    """Persist an ExperimentResult; returns {relative path: sha256}."""
    out = Path(out_dir)
    cfg = res.config
    written = {}

    def put(rel, text):
        _atomic_write(out / rel, text)
        written[rel] = hashlib.sha256(text.encode()).hexdigest()

    rows = []
    for alg in cfg.algorithms:
        trs = res.traces.get(alg, [])
        payload = {"schema_version": TRACE_SCHEMA, "algorithm": alg,
                   "config_hash": cfg.config_hash(),
                   "traces": [_trace_payload(tr) for tr in trs]}
        put(f"traces/{alg}.json", json.dumps(payload, indent=1, sort_keys=True) + "\n")
        for k, tr in enumerate(trs):
            trial = tr.metadata.get("trial", k)
            for r in tr.records:
                rows.append((r["t"], alg, trial, _fmt(r["mse_x"]), _fmt(r["mse_x_db"]),
                             _fmt(r["wall_ms"])))
    put("results.csv", _csv_text(RESULT_COLUMNS, rows))
    agg_rows = []
    for alg, a in res.aggregates.items():
        for t in range(cfg.T):
            agg_rows.append((t + 1, alg, a["n"], _fmt(a["median"][t]), _fmt(a["q25"][t]),
                             _fmt(a["q75"][t]), _fmt(to_db(a["median"][t]))))
    put("aggregate.csv", _csv_text(AGGREGATE_COLUMNS, agg_rows))
    manifest = {
        "schema_version": CONFIG_SCHEMA,
        "package_version": __version__,
        "build_id": build_id(),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "se_noise_variance": noise_variance(cfg),
        "failures": res.failures,
        "stop_reasons": {alg: [tr.stop_reason for tr in trs] for alg, trs in res.traces.items()},
        "files": dict(sorted(written.items())),
    }
    manifest["config"].pop("output")
    put("manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return written


def _trace_payload(tr):
    d = tr.to_dict()
    d["metadata"].pop("controller", None)
    return d


@dataclass(frozen=True)
class AgreementReport:
    t: np.ndarray
    gap_db: np.ndarray
    max_gap_db: float
    converged_gap_db: float
    tol_db: float
    start_t: int
    passed: bool

    def to_dict(self):
        return {"t": self.t.tolist(), "gap_db": self.gap_db.tolist(),
                "max_gap_db": self.max_gap_db, "converged_gap_db": self.converged_gap_db,
                "tol_db": self.tol_db, "start_t": self.start_t, "passed": self.passed}


def _as_db(curve):
    if isinstance(curve, IterationTrace):
        return curve.mse_db
    return np.array([to_db(v) for v in np.asarray(curve, dtype=float)])


def compare_traces(a, b, tol_db=1.0, start_t=1):
    """Per-iteration dB gaps between two MSE curves (traces or arrays of MSE).

    The maximum is taken over t >= start_t; the converged gap is the one at
    the last iteration.  Passes when the maximum stays below ``tol_db``.
    """
    da, db = _as_db(a), _as_db(b)
    if len(da) != len(db):
        raise ValueError(f"trace lengths differ ({len(da)} vs {len(db)})")
    if len(da) == 0:
        raise ValueError("empty traces")
    t = np.arange(1, len(da) + 1)
    with np.errstate(invalid="ignore"):
        gap = np.where(da == db, 0.0, np.abs(da - db))
    sel = gap[t >= start_t]
    mx = float(np.max(sel)) if len(sel) else 0.0
    conv = float(gap[-1])
    return AgreementReport(t=t, gap_db=gap, max_gap_db=mx, converged_gap_db=conv,
                           tol_db=float(tol_db), start_t=int(start_t),
                           passed=bool(np.isfinite(mx) and mx < tol_db))


def load_curve(path, algorithm=None):
    """Median MSE per iteration from a results.csv or aggregate.csv file."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no rows")
    algs = sorted({r["algorithm"] for r in rows})
    if algorithm is None:
        if len(algs) != 1:
            raise ValueError(f"{path} holds several algorithms {algs}; pick one")
        algorithm = algs[0]
    rows = [r for r in rows if r["algorithm"] == algorithm]
    if not rows:
        raise ValueError(f"{path} has no rows for {algorithm!r}")
    col = "median_mse" if "median_mse" in rows[0] else "mse"
    by_t = {}
    for r in rows:
        by_t.setdefault(int(r["t"]), []).append(float(r[col]))
    ts = sorted(by_t)
    if ts != list(range(1, len(ts) + 1)):
        raise ValueError(f"{path}: iterations are not 1..T")
    return np.array([np.median(by_t[t]) for t in ts])


def iterations_to_within(mse_db, target_db, tol_db=1.0):
    """First iteration whose MSE is within ``tol_db`` of ``target_db`` (None if never)."""
    hit = np.nonzero(np.asarray(mse_db) <= target_db + tol_db)[0]
    return int(hit[0]) + 1 if len(hit) else None
