"""Experiment orchestration: specs, paired evaluation, statistics and report export.

A run is a pure function of its :class:`ExperimentSpec`. Channels for evaluation
come from the ``eval`` random stream, disjoint from the training stream; every
scenario in a run sees the same instances and the same clean allocations.
"""

import csv
import enum
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from .attacks import AttackConfig, Threat, apply_attack, bim, check_budget, fgsm, gaussian_attack, m_uap, make_mask
from .core import evaluate, flatten, to_db, unflatten
from .errors import EmptySamples
from .nn import TrainConfig, init_mlp, load_model, model_digest, predict_allocation, save_model, train
from .rng import stable_hash, stream
from .scenario import NetworkConfig, draw_betas, gen_dataset, load_dataset, save_dataset

BOOTSTRAP_RESAMPLES = 1000
METRICS = ("median_se", "p5_se", "mean_ee", "median_min_se", "p5_min_se", "mean_sum_se")


class AttackKind(str, enum.Enum):
    NONE = "NONE"
    GAUSSIAN = "GAUSSIAN"
    FGSM = "FGSM"
    BIM = "BIM"
    M_UAP = "M_UAP"


# ---------------------------------------------------------------- statistics


def nearest_rank(sorted_values, p):
    """Nearest-rank percentile of ascending ``sorted_values`` (last axis): the ``ceil(p*n)``-th value."""
    n = sorted_values.shape[-1]
    rank = min(max(math.ceil(p * n - 1e-9), 1), n)
    return sorted_values[..., rank - 1]


@dataclass
class EmpiricalCdf:
    values: np.ndarray

    @property
    def probabilities(self):
        n = len(self.values)
        return np.arange(1, n + 1) / n

    def percentile(self, p):
        if not 0 <= p <= 1:
            raise ValueError("p must lie in [0, 1]")
        return float(nearest_rank(self.values, p))

    @property
    def median(self):
        return self.percentile(0.5)

    @property
    def p5(self):
        return self.percentile(0.05)

    def __call__(self, x):
        return np.searchsorted(self.values, x, side="right") / len(self.values)

    def grid(self, points=200):
        """``(value, probability)`` pairs at probabilities ``1/points, ..., 1``."""
        probs = np.arange(1, points + 1) / points
        return [[self.percentile(p), float(p)] for p in probs]


def compute_cdf(samples):
    """Empirical CDF of a sample set.

    >>> cdf = compute_cdf([4, 1, 3, 2])
    >>> cdf.median, cdf.p5
    (2.0, 1.0)
    """
    values = np.sort(np.asarray(samples, dtype=float).ravel())
    if values.size == 0:
        raise EmptySamples("no samples")
    return EmpiricalCdf(values)


def bootstrap_se(groups, statistic, resamples=BOOTSTRAP_RESAMPLES, rng=None, chunk=100):
    """Standard error of ``statistic`` under resampling of instances.

    ``groups`` is ``(n, ...)``; each resample draws ``n`` instances with replacement
    and keeps every value inside a drawn instance, since users of one instance
    share a channel. ``statistic`` maps ``(R, n*...)`` to ``(R,)``.
    """
    groups = np.asarray(groups, dtype=float)
    n = len(groups)
    if n == 0:
        raise EmptySamples("no samples")
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, n, size=(resamples, n))
    stats = np.concatenate(
        [statistic(groups[idx[i : i + chunk]].reshape(len(idx[i : i + chunk]), -1)) for i in range(0, resamples, chunk)]
    )
    return float(stats.std(ddof=1))


def _percentile_stat(p):
    return lambda x: nearest_rank(np.sort(x, axis=-1), p)


def _mean_stat(x):
    return x.mean(axis=-1)


# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class Scenario:
    """One evaluation row. ``fraction`` picks per-instance malicious sets unless ``indices`` is given."""

    attack: AttackKind = AttackKind.NONE
    epsilon: float = 0.0
    threat: Threat = Threat.FULL
    fraction: float = 1.0
    indices: tuple = None
    crafter: str = "surrogate"

    def __post_init__(self):
        object.__setattr__(self, "attack", AttackKind(self.attack))
        object.__setattr__(self, "threat", Threat(self.threat))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "fraction", float(self.fraction))
        if self.indices is not None:
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.epsilon < 0 or not 0 <= self.fraction <= 1:
            raise ValueError("need epsilon >= 0 and 0 <= fraction <= 1")
        if self.crafter not in ("original", "surrogate"):
            raise ValueError("crafter must be 'original' or 'surrogate'")

    @property
    def key(self):
        where = "idx=" + ",".join(map(str, self.indices)) if self.indices is not None else f"f={self.fraction:g}"
        return f"{self.attack.value}/{self.crafter}/{self.threat.value}/{where}/eps={self.epsilon:g}"

    def to_dict(self):
        return {
            "attack": self.attack.value,
            "epsilon": self.epsilon,
            "threat": self.threat.value,
            "fraction": self.fraction,
            "indices": None if self.indices is None else list(self.indices),
            "crafter": self.crafter,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    """A model file, plus how to train it if the file is missing."""

    path: str
    hidden: tuple = (512, 256, 128)
    epochs: int = 200
    seed: int = 0

    def to_dict(self):
        return {"path": self.path, "hidden": list(self.hidden), "epochs": self.epochs, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (512, 256, 128)))
        return cls(**d)


@dataclass
class ExperimentSpec:
    network: NetworkConfig
    dataset: str
    original: ModelSpec
    surrogate: ModelSpec
    scenarios: list = field(default_factory=list)
    num_instances: int = 2000
    output_dir: str = "out"
    seed: int = 0
    num_samples: int = 20000
    bim_iters: int = 10
    alpha_ratio: float = 0.125
    uap_samples: int = 32
    mask_uap: bool = True
    bootstrap_resamples: int = BOOTSTRAP_RESAMPLES
    cdf_points: int = 200
    include_samples: bool = True

    def __post_init__(self):
        if self.num_instances < 1:
            raise ValueError("num_instances must be >= 1")
        self.scenarios = [s if isinstance(s, Scenario) else Scenario.from_dict(s) for s in self.scenarios]

    def attack_config(self, epsilon):
        return AttackConfig(
            epsilon=epsilon,
            alpha=self.alpha_ratio * epsilon if epsilon > 0 else None,
            bim_iters=self.bim_iters,
            uap_samples=self.uap_samples,
            seed=self.seed,
            mask_uap=self.mask_uap,
            total_power=self.network.total_power,
            noise_power=self.network.noise_power,
        )

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["network"] = self.network.to_dict()
        d["original"] = self.original.to_dict()
        d["surrogate"] = self.surrogate.to_dict()
        d["scenarios"] = [s.to_dict() for s in self.scenarios]
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        d["network"] = NetworkConfig.from_dict(d.get("network", {}))
        d["original"] = ModelSpec.from_dict(d["original"])
        d["surrogate"] = ModelSpec.from_dict(d["surrogate"])
        if base_dir is not None:
            d["dataset"] = os.path.join(base_dir, d["dataset"])
            d["output_dir"] = os.path.join(base_dir, d.get("output_dir", "out"))
            for name in ("original", "surrogate"):
                m = d[name]
                d[name] = ModelSpec(os.path.join(base_dir, m.path), m.hidden, m.epochs, m.seed)
        return cls(**d)

    @classmethod
    def load(cls, path):
        """Read a JSON spec; relative paths inside it resolve against the spec's directory."""
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=os.path.dirname(os.path.abspath(path)))


def prepare(spec, log=None):
    """Create the dataset and models named by ``spec`` if their files are missing."""
    if not os.path.exists(spec.dataset):
        dataset = gen_dataset(spec.network, spec.num_samples)
        os.makedirs(os.path.dirname(os.path.abspath(spec.dataset)), exist_ok=True)
        save_dataset(dataset, spec.dataset)
    dataset = None
    for ms in (spec.original, spec.surrogate):
        if os.path.exists(ms.path):
            continue
        dataset = dataset or load_dataset(spec.dataset)
        m, k = spec.network.shape
        model = init_mlp(m * k, list(ms.hidden), m * k, seed=ms.seed)
        model, _ = train(model, dataset, TrainConfig(epochs=ms.epochs, seed=ms.seed), log=log)
        os.makedirs(os.path.dirname(os.path.abspath(ms.path)), exist_ok=True)
        save_model(model, ms.path)


# ---------------------------------------------------------------- evaluation


@dataclass
class ScenarioResult:
    scenario: Scenario
    se: np.ndarray
    ee: np.ndarray
    max_abs_delta: float
    degenerate: int
    max_off_mask: float = 0.0

    @property
    def min_se(self):
        return self.se.min(axis=-1)


def malicious_indices(seed, instance, threat, fraction, m, k):
    """Nested malicious sets: the first ``round(fraction * n)`` entries of a per-instance permutation."""
    if threat is Threat.FULL:
        return ()
    n = m if threat is Threat.MALICIOUS_RUS else k
    perm = stream(seed, "malicious", instance, 0 if threat is Threat.MALICIOUS_RUS else 1).permutation(n)
    return tuple(sorted(perm[: int(round(fraction * n))].tolist()))


class Evaluator:
    """Shared instances, clean allocations and models for a set of scenarios."""

    def __init__(self, spec, original=None, surrogate=None, pool_db=None, chunk_rows=8192):
        self.spec = spec
        self.config = spec.network
        self.original = original if original is not None else load_model(spec.original.path)
        self.surrogate = surrogate if surrogate is not None else load_model(spec.surrogate.path)
        if pool_db is None:
            dataset = load_dataset(spec.dataset)
            pool_db = flatten(to_db(dataset.test[0]))
            self.dataset_digest = dataset_fingerprint(dataset)
        else:
            self.dataset_digest = None
        if len(pool_db) == 0:
            raise EmptySamples("the adversary's pool (test split) is empty")
        self.pool_db = np.asarray(pool_db, dtype=float)
        self.chunk_rows = chunk_rows
        self.beta = draw_betas(self.config, 0, spec.num_instances, purpose="eval", seed=spec.seed)
        self.z_true = flatten(to_db(self.beta))
        self.clean_eta = predict_allocation(self.original, self.beta)

    def masks(self, scenario):
        m, k = self.config.shape
        out = np.empty((len(self.beta), m * k), dtype=bool)
        for i in range(len(self.beta)):
            idx = scenario.indices
            if idx is None:
                idx = malicious_indices(self.spec.seed, i, scenario.threat, scenario.fraction, m, k)
            out[i] = flatten(make_mask(scenario.threat, idx, m, k).modifiable)
        return out

    def pools(self, start, stop, n):
        return np.stack([self.pool_db[stream(self.spec.seed, "pool", i).choice(len(self.pool_db), size=n)] for i in range(start, stop)])

    def craft(self, scenario):
        """Perturbations ``(n, M*K)`` in dB for every instance, plus the tie count from m-UAP."""
        n, d = self.z_true.shape
        cfg = self.spec.attack_config(scenario.epsilon)
        mod = self.masks(scenario)
        model = self.original if scenario.crafter == "original" else self.surrogate
        kind = scenario.attack
        delta = np.zeros((n, d))
        degenerate = 0
        if kind is AttackKind.NONE or scenario.epsilon == 0:
            pass
        elif kind is AttackKind.GAUSSIAN:
            for i in range(n):
                delta[i] = gaussian_attack(self.beta[i], mod[i], cfg, stream(self.spec.seed, "gaussian", i)).delta
        elif kind in (AttackKind.BIM, AttackKind.FGSM):
            step = max(1, self.chunk_rows)
            for s in range(0, n, step):
                z0, sl = self.z_true[s : s + step], slice(s, s + step)
                if kind is AttackKind.BIM:
                    z_adv = bim(model, z0, self.beta[sl], mod[sl], cfg)[0]
                else:
                    z_adv = fgsm(model, z0, self.beta[sl], mod[sl], cfg)
                delta[sl] = z_adv - z0
        else:
            step = max(1, self.chunk_rows // cfg.uap_samples)
            for s in range(0, n, step):
                e = min(s + step, n)
                pert = m_uap(self.z_true[s:e], mod[s:e], mod[s:e], self.pools(s, e, cfg.uap_samples), model, cfg)
                delta[s:e] = pert.delta
                degenerate += int(pert.diagnostics["degenerate"].sum())
        check_budget(delta, scenario.epsilon, mod if (kind is not AttackKind.M_UAP or cfg.mask_uap) else None)
        return delta, degenerate

    def evaluate_scenario(self, scenario):
        m, k = self.config.shape
        delta, degenerate = self.craft(scenario)
        if np.any(delta):
            beta_rep = apply_attack(self.beta, unflatten(delta, m, k))
            eta = predict_allocation(self.original, beta_rep)
        else:
            eta = self.clean_eta
        c = self.config
        metrics = evaluate(self.beta, eta, c.total_power, c.noise_power, c.bandwidth)
        off = np.abs(np.where(self.masks(scenario), 0.0, delta)).max(initial=0.0)
        return ScenarioResult(scenario, metrics.se, metrics.ee, float(np.abs(delta).max(initial=0.0)), degenerate, float(off))

    def summarize(self, result):
        spec = self.spec
        se, ee, min_se = result.se, result.ee, result.min_se
        se_cdf, min_cdf = compute_cdf(se), compute_cdf(min_se)
        rng_seed = stable_hash(result.scenario.key)
        boot = {}
        for name, data, stat in (
            ("median_se", se, _percentile_stat(0.5)),
            ("p5_se", se, _percentile_stat(0.05)),
            ("mean_ee", ee, _mean_stat),
            ("median_min_se", min_se, _percentile_stat(0.5)),
            ("p5_min_se", min_se, _percentile_stat(0.05)),
            ("mean_sum_se", se.sum(axis=-1), _mean_stat),
        ):
            rng = stream(spec.seed, "bootstrap", rng_seed, METRICS.index(name))
            boot[name] = bootstrap_se(data, stat, spec.bootstrap_resamples, rng)
        row = {
            "scenario": result.scenario.to_dict(),
            "key": result.scenario.key,
            "n_instances": int(len(ee)),
            "median_se": se_cdf.median,
            "p5_se": se_cdf.p5,
            "mean_ee": float(ee.mean()),
            "median_min_se": min_cdf.median,
            "p5_min_se": min_cdf.p5,
            "mean_sum_se": float(se.sum(axis=-1).mean()),
            "bootstrap_se": boot,
            "cdf": {"se": se_cdf.grid(spec.cdf_points), "min_se": min_cdf.grid(spec.cdf_points)},
            "budget": {
                "epsilon": result.scenario.epsilon,
                "max_abs_delta": result.max_abs_delta,
                "max_off_mask": result.max_off_mask,
            },
            "degenerate_spectra": result.degenerate,
        }
        if spec.include_samples:
            row["samples"] = {"se": se.ravel().tolist(), "min_se": min_se.tolist(), "ee": ee.tolist()}
        return row

    def fingerprint(self):
        return {
            "version": __version__,
            "seed": self.spec.seed,
            "network": self.config.to_dict(),
            "original_sha256": model_digest(self.original),
            "surrogate_sha256": model_digest(self.surrogate),
            "dataset_sha256": self.dataset_digest,
            "num_instances": self.spec.num_instances,
            "attack": {
                "bim_iters": self.spec.bim_iters,
                "alpha_ratio": self.spec.alpha_ratio,
                "uap_samples": self.spec.uap_samples,
                "mask_uap": self.spec.mask_uap,
            },
            "bootstrap_resamples": self.spec.bootstrap_resamples,
        }

    def run(self, scenarios=None, log=None):
        rows = []
        for scn in self.spec.scenarios if scenarios is None else scenarios:
            if log:
                log(f"evaluating {scn.key}")
            rows.append(self.summarize(self.evaluate_scenario(scn)))
        return EvalReport(rows, self.fingerprint())


def dataset_fingerprint(dataset):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.beta, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(dataset.eta, dtype="<f8").tobytes())
    return h.hexdigest()


def evaluate_scenario(evaluator, scenario):
    """Metrics row for one scenario on the evaluator's shared instances."""
    return evaluator.summarize(evaluator.evaluate_scenario(scenario))


class Axis(str, enum.Enum):
    EPSILON = "EPSILON"
    MALICIOUS_FRACTION = "MALICIOUS_FRACTION"


def sweep_scenarios(base, axis, values):
    """Scenarios for every ``value`` of ``axis`` applied to every base scenario (value-major order)."""
    axis = Axis(axis)
    values = [float(v) for v in values]
    if values != sorted(values):
        raise ValueError("sweep values must be sorted ascending")
    name = "epsilon" if axis is Axis.EPSILON else "fraction"
    out = []
    for v in values:
        for b in base:
            d = b.to_dict()
            d[name] = v
            out.append(Scenario.from_dict(d))
    return out


def sweep(evaluator, base, axis, values, log=None):
    """Evaluate ``base`` scenarios along ``axis`` on the evaluator's paired instances."""
    return evaluator.run(sweep_scenarios(base, axis, values), log=log)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    rows: list
    fingerprint: dict

    def row(self, key):
        for r in self.rows:
            if r["key"] == key:
                return r
        raise KeyError(key)

    def to_dict(self):
        return {"fingerprint": self.fingerprint, "rows": self.rows}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["rows"], d["fingerprint"])

    def to_csv(self):
        """One line per (scenario, metric)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "attack", "crafter", "threat", "fraction", "epsilon", "metric", "value", "bootstrap_se"])
        for r in self.rows:
            s = r["scenario"]
            for name in METRICS:
                w.writerow(
                    [r["key"], s["attack"], s["crafter"], s["threat"], s["fraction"], s["epsilon"], name, repr(r[name]), repr(r["bootstrap_se"][name])]
                )
        return buf.getvalue()

    def cdf_csv(self):
        """CDF series as ``(value, probability)`` pairs for external plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "series", "value", "probability"])
        for r in self.rows:
            for series in ("se", "min_se"):
                for v, p in r["cdf"][series]:
                    w.writerow([r["key"], series, repr(v), repr(p)])
        return buf.getvalue()

    def summary_table(self):
        head = f"{'scenario':<48} {'median SE':>10} {'p5 SE':>8} {'mean EE (Mbit/J)':>17}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r['key']:<48} {r['median_se']:>10.4f} {r['p5_se']:>8.4f} {r['mean_ee'] / 1e6:>17.3f}")
        return "\n".join(lines) + "\n"


def export(report, out_dir, formats=("json", "csv"), stem="report"):
    """Write ``report`` to ``out_dir``; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    payloads = {
        "json": (f"{stem}.json", report.to_json),
        "csv": (f"{stem}.csv", report.to_csv),
        "cdf": (f"{stem}_cdf.csv", report.cdf_csv),
    }
    for fmt in formats:
        if fmt == "csv":
            fmts = ("csv", "cdf")
        else:
            fmts = (fmt,)
        for f in fmts:
            name, make = payloads[f]
            path = os.path.join(out_dir, name)
            with open(path, "w", newline="") as fh:
                fh.write(make())
            written.append(path)
    return written


def load_report(path):
    with open(path) as fh:
        return EvalReport.from_json(fh.read())


def merge_reports(reports):
    """Concatenate rows of reports that share a fingerprint."""
    if not reports:
        raise EmptySamples("no reports")
    fp = reports[0].fingerprint
    for r in reports[1:]:
        if r.fingerprint != fp:
            raise ValueError("reports come from different experiments")
    return EvalReport([row for r in reports for row in r.rows], fp)


__all__ = [
    "AttackKind",
    "Axis",
    "EmpiricalCdf",
    "EvalReport",
    "Evaluator",
    "ExperimentSpec",
    "ModelSpec",
    "Scenario",
    "bootstrap_se",
    "compute_cdf",
    "evaluate_scenario",
    "export",
    "load_report",
    "malicious_indices",
    "merge_reports",
    "nearest_rank",
    "prepare",
    "sweep",
    "sweep_scenarios",
]
