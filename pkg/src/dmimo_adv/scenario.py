"""Network geometry, large-scale fading, and labeled (beta, eta) datasets."""

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import FeatureStats, flatten, from_db, power_violation, to_db
from .errors import NonSquareRuCount, ShapeMismatch
from .rng import stream

DEFAULT_NOISE_W = 10.0 ** (-92.0 / 10.0) / 1000.0


@dataclass(frozen=True)
class NetworkConfig:
    num_rus: int = 16
    num_ues: int = 4
    area_side: float = 500.0
    total_power: float = 0.2
    noise_power: float = DEFAULT_NOISE_W
    bandwidth: float = 20e6
    shadowing_std: float = 8.0
    d0: float = 10.0
    d1: float = 50.0
    carrier_freq: float = 1900.0
    ru_height: float = 15.0
    ue_height: float = 1.65
    master_seed: int = 0

    def __post_init__(self):
        if self.num_rus < 1 or self.num_ues < 0:
            raise ValueError("need at least one RU and a non-negative UE count")
        for name in ("area_side", "total_power", "noise_power", "bandwidth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.shadowing_std < 0:
            raise ValueError("shadowing_std must be non-negative")
        if not 0 < self.d0 < self.d1:
            raise ValueError("need 0 < d0 < d1")

    @property
    def shape(self):
        return (self.num_rus, self.num_ues)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        d = dict(d)
        if "noise_power_dbm" in d:
            d["noise_power"] = 10.0 ** (d.pop("noise_power_dbm") / 10.0) / 1000.0
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Placement:
    ru_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ue_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def place_rus(config):
    """Centered square grid of RUs, offset half a spacing from every edge."""
    side = math.isqrt(config.num_rus)
    if side * side != config.num_rus:
        raise NonSquareRuCount(f"{config.num_rus} RUs cannot form a square grid")
    axis = (np.arange(side) + 0.5) * (config.area_side / side)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return Placement(ru_positions=np.column_stack([xx.ravel(), yy.ravel()]))


def sample_ue_positions(config, rng):
    return Placement(ue_positions=rng.uniform(0.0, config.area_side, size=(config.num_ues, 2)))


def hata_constant(config):
    """COST-231 Hata fixed loss term in dB for the configured carrier and antenna heights."""
    lf = math.log10(config.carrier_freq)
    return (
        46.3
        + 33.9 * lf
        - 13.82 * math.log10(config.ru_height)
        - (1.1 * lf - 0.7) * config.ue_height
        + (1.56 * lf - 0.8)
    )


def pathloss_db(distance, config):
    """Three-slope channel gain in dB (negative) at ``distance`` meters.

    Slopes are 35 dB/decade beyond ``d1``, 20 dB/decade between ``d0`` and ``d1``
    and flat below ``d0``. Distances enter the logarithms in kilometres, as in the
    usual cell-free parameterization; distances under 1 m are floored.
    """
    d = np.maximum(np.asarray(distance, dtype=float), 1.0) / 1000.0
    d0, d1 = config.d0 / 1000.0, config.d1 / 1000.0
    loss = hata_constant(config)
    far = -loss - 35.0 * np.log10(d)
    mid = -loss - 15.0 * np.log10(d1) - 20.0 * np.log10(d)
    near = -loss - 15.0 * np.log10(d1) - 20.0 * np.log10(d0)
    return np.where(d > d1, far, np.where(d > d0, mid, near))


def distances(placement):
    diff = placement.ru_positions[:, None, :] - placement.ue_positions[None, :, :]
    return np.linalg.norm(diff, axis=-1)


def gen_beta(config, placement, rng):
    """Linear-scale ``(M, K)`` large-scale fading: path loss plus i.i.d. log-normal shadowing."""
    gain_db = pathloss_db(distances(placement), config)
    shadow = config.shadowing_std * rng.standard_normal(gain_db.shape)
    return from_db(gain_db + shadow)


def draw_beta(config, index, purpose="sample", seed=None):
    """Channel of sample ``index`` from its own stream; reproducible in isolation."""
    rng = stream(config.master_seed if seed is None else seed, purpose, index)
    ues = sample_ue_positions(config, rng)
    placement = Placement(place_rus(config).ru_positions, ues.ue_positions)
    return gen_beta(config, placement, rng)


def draw_betas(config, start, count, purpose="sample", seed=None):
    return np.stack([draw_beta(config, i, purpose, seed) for i in range(start, start + count)])


@dataclass
class Dataset:
    """Labeled pairs; ``beta`` and ``eta`` are ``(N, M, K)`` with the first ``n_train`` rows for training."""

    config: NetworkConfig
    beta: np.ndarray
    eta: np.ndarray
    n_train: int
    feature_stats: FeatureStats

    def __len__(self):
        return len(self.beta)

    @property
    def train(self):
        return self.beta[: self.n_train], self.eta[: self.n_train]

    @property
    def test(self):
        return self.beta[self.n_train :], self.eta[self.n_train :]


def gen_dataset(config, n_samples, solver=None, train_fraction=0.975, batch_size=2048):
    """Generate ``n_samples`` channels and label each with the max-min-fair allocation.

    ``solver`` maps a ``(B, M, K)`` batch of channels to ``(B, M, K)`` power
    coefficients; the default is the bisection oracle in :mod:`dmimo_adv.mmf`.
    """
    if solver is None:
        from .mmf import SolverConfig, solve_mmf_batch

        cfg = SolverConfig()

        def solver(beta):
            return solve_mmf_batch(beta, config.total_power, config.noise_power, cfg).eta

    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must lie in (0, 1]")
    beta = draw_betas(config, 0, n_samples)
    eta = np.empty_like(beta)
    for start in range(0, n_samples, batch_size):
        eta[start : start + batch_size] = solver(beta[start : start + batch_size])
    n_train = int(round(train_fraction * n_samples))
    return Dataset(
        config=config,
        beta=beta,
        eta=eta,
        n_train=n_train,
        feature_stats=FeatureStats.fit(to_db(beta[:n_train])),
    )


# Binary container: magic, u64 header length, JSON header, then per sample
# M*K beta values in dB followed by M*K eta values, float64 little-endian.
DATASET_MAGIC = b"DMIMODS1"
ORDERING = "row-major, index = m*K + k"


def _write_container(fh, magic, header, payload):
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(magic)
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def _read_container(fh, magic):
    got = fh.read(len(magic))
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    (n,) = struct.unpack("<Q", fh.read(8))
    header = json.loads(fh.read(n).decode())
    payload = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    return header, payload


def save_dataset(dataset, path):
    m, k = dataset.config.shape
    header = {
        "config": dataset.config.to_dict(),
        "num_samples": len(dataset),
        "num_rus": m,
        "num_ues": k,
        "n_train": dataset.n_train,
        "ordering": ORDERING,
        "record": "beta_db[M*K] then eta[M*K]",
        "feature_stats": dataset.feature_stats.to_dict(),
    }
    records = np.concatenate([flatten(to_db(dataset.beta)), flatten(dataset.eta)], axis=1)
    with open(path, "wb") as fh:
        _write_container(fh, DATASET_MAGIC, header, records)


def load_dataset(path):
    with open(path, "rb") as fh:
        header, payload = _read_container(fh, DATASET_MAGIC)
    m, k, n = header["num_rus"], header["num_ues"], header["num_samples"]
    if payload.size != n * 2 * m * k:
        raise ShapeMismatch("dataset payload length does not match header")
    records = payload.reshape(n, 2, m, k)
    return Dataset(
        config=NetworkConfig.from_dict(header["config"]),
        beta=from_db(records[:, 0]),
        eta=records[:, 1].copy(),
        n_train=header["n_train"],
        feature_stats=FeatureStats.from_dict(header["feature_stats"]),
    )


def export_dataset_csv(dataset, fh):
    m, k = dataset.config.shape
    names = [f"{m_}_{k_}" for m_ in range(m) for k_ in range(k)]
    writer = csv.writer(fh)
    writer.writerow(["index", "split"] + [f"beta_db_{n}" for n in names] + [f"eta_{n}" for n in names])
    beta_db = flatten(to_db(dataset.beta))
    eta = flatten(dataset.eta)
    for i in range(len(dataset)):
        split = "train" if i < dataset.n_train else "test"
        writer.writerow([i, split] + [repr(float(v)) for v in beta_db[i]] + [repr(float(v)) for v in eta[i]])


def dataset_csv_text(dataset):
    buf = io.StringIO()
    export_dataset_csv(dataset, buf)
    return buf.getvalue()


def check_labels(dataset, tol=1e-9):
    """Largest per-RU load over all labels; raises if any exceeds ``1 + tol``."""
    worst = float(power_violation(dataset.beta, dataset.eta).max()) if len(dataset) else 0.0
    if worst > 1.0 + tol:
        raise ValueError(f"infeasible label: per-RU load {worst}")
    return worst
