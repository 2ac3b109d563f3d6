"""Acceptance suite at desk scale (16 RUs, 4 UEs).

The dataset and both trained models are cached under ``$DMIMO_ACCEPTANCE_DIR``
(default ``~/.cache/dmimo_adv/acceptance``); the first run builds them. Every
attack scenario is evaluated afresh in each session. One verdict line per
criterion is printed in the terminal summary.
"""

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from dmimo_adv.bench import (
    Evaluator,
    ExperimentSpec,
    ModelSpec,
    Scenario,
    bootstrap_se,
    nearest_rank,
    prepare,
)
from dmimo_adv.cli import main as cli_main
from dmimo_adv.core import compute_se, compute_sinr, evaluate
from dmimo_adv.mmf import solve_mmf, solve_mmf_batch
from dmimo_adv.nn import input_gradient, predict_allocation
from dmimo_adv.rng import stable_hash
from dmimo_adv.scenario import NetworkConfig
from helpers import random_beta, small_model
from oracles import brute_force_mmf_2x2

DESK = NetworkConfig()
NUM_SAMPLES = 20000
NUM_INSTANCES = 500
RESAMPLES = 1000
FRACTIONS = (0.25, 0.5, 0.75, 1.0)
EPSILONS = (2.0, 4.0, 8.0, 12.0, 16.0)

pytestmark = pytest.mark.acceptance


def cache_dir():
    return Path(os.environ.get("DMIMO_ACCEPTANCE_DIR", Path.home() / ".cache" / "dmimo_adv" / "acceptance"))


class Desk:
    """Desk-scale evaluator plus a per-session cache of scenario results."""

    def __init__(self, spec):
        prepare(spec)
        self.ev = Evaluator(spec)
        self.results = {}

    def __call__(self, attack="NONE", epsilon=0.0, threat="FULL", fraction=1.0, crafter="surrogate"):
        s = Scenario(attack, epsilon, threat, fraction, crafter=crafter)
        if s.key not in self.results:
            self.results[s.key] = self.ev.evaluate_scenario(s)
        return self.results[s.key]


@pytest.fixture(scope="session")
def desk():
    root = cache_dir()
    tag = f"{NUM_SAMPLES // 1000}k"
    spec = ExperimentSpec(
        network=DESK,
        dataset=str(root / f"data_{tag}.bin"),
        original=ModelSpec(str(root / f"original_{tag}.model"), (512, 256, 128), epochs=200, seed=1),
        surrogate=ModelSpec(str(root / f"surrogate_{tag}.model"), (256, 128), epochs=200, seed=2),
        num_instances=NUM_INSTANCES,
        num_samples=NUM_SAMPLES,
        output_dir=str(root / "out"),
        bootstrap_resamples=RESAMPLES,
    )
    return Desk(spec)


@pytest.fixture(scope="session")
def analytic(desk):
    ev = desk.ev
    return solve_mmf_batch(ev.beta, DESK.total_power, DESK.noise_power)


def seeded(tag):
    return np.random.default_rng(stable_hash(f"acceptance/{tag}"))


def median_stat(x):
    return nearest_rank(np.sort(x, axis=-1), 0.5)


def p5_stat(x):
    return nearest_rank(np.sort(x, axis=-1), 0.05)


def paired_se(a, b, stat, tag):
    """Bootstrap SE of ``stat(a) - stat(b)`` with instances resampled jointly (rows of ``a`` and ``b`` pair up)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = len(a)
    groups = np.stack([a.reshape(n, -1), b.reshape(n, -1)], axis=1)

    def diff(flat):
        g = flat.reshape(len(flat), n, 2, -1)
        r = len(flat)
        return stat(g[:, :, 0].reshape(r, -1)) - stat(g[:, :, 1].reshape(r, -1))

    return bootstrap_se(groups, diff, RESAMPLES, seeded(tag))


def non_increasing(series, stat, tag):
    """Worst ``stat(next) - stat(prev) - SE`` along ``series``; non-positive means the trend holds."""
    worst = -math.inf
    for j, (prev, nxt) in enumerate(zip(series, series[1:])):
        rise = float(stat(nxt.se.reshape(1, -1))[0] - stat(prev.se.reshape(1, -1))[0])
        se = paired_se(nxt.se, prev.se, stat, f"{tag}/{j}")
        worst = max(worst, rise - se)
    return worst


def test_criterion_01_oracle(criterion, desk, analytic):
    sinr = compute_sinr(desk.ev.beta, analytic.eta, DESK.total_power, DESK.noise_power)
    spread = ((sinr.max(axis=-1) - sinr.min(axis=-1)) / sinr.min(axis=-1)).max()
    worst_grid = 0.0
    for i in range(5):
        rng = seeded(f"grid/{i}")
        beta = 10 ** rng.uniform(-12, -9, (2, 2))
        ours = compute_se(solve_mmf(beta, 0.2, 1e-12).sinr).min()
        ref = math.log2(1 + brute_force_mmf_2x2(beta, 0.2, 1e-12))
        worst_grid = max(worst_grid, abs(ours - ref) / ref)
    passed = len(sinr) == 500 and spread <= 1e-3 and worst_grid <= 0.01
    criterion(1, passed, f"worst SINR spread {spread:.2e} over {len(sinr)} instances; 2x2 grid gap {worst_grid:.2e}")


def test_criterion_02_gradient(criterion):
    p, s = DESK.total_power, DESK.noise_power
    worst = 0.0
    for trial in range(20):
        rng = seeded(f"fd/{trial}")
        m, k = [(4, 2), (16, 4)][trial % 2]
        model = small_model(m, k, hidden=(24, 12), seed=1000 + trial)
        x = rng.normal(size=(1, m * k))
        belief = random_beta(rng, (1, m, k), -115, -65)

        def sum_se(xx):
            return input_gradient(model, xx, belief, p, s)[0][0]

        _, grad = input_gradient(model, x, belief, p, s)
        h = 1e-5
        fd = np.array([(sum_se(x + h * e) - sum_se(x - h * e)) / (2 * h) for e in np.eye(m * k)[:, None, :]])
        worst = max(worst, float(np.abs(grad[0] - fd).max() / np.abs(fd).max()))
    criterion(2, worst < 1e-4, f"max relative error {worst:.2e} over 20 pairs")


def test_criterion_03_clean_quality(criterion, desk, analytic):
    ev = desk.ev
    ref = np.median(evaluate(ev.beta, analytic.eta, DESK.total_power, DESK.noise_power, DESK.bandwidth).min_se)

    def ratio(model):
        eta = predict_allocation(model, ev.beta)
        return np.median(evaluate(ev.beta, eta, DESK.total_power, DESK.noise_power, DESK.bandwidth).min_se) / ref

    r_orig, r_sur = ratio(ev.original), ratio(ev.surrogate)
    criterion(
        3,
        r_orig >= 0.85 and r_sur >= 0.80,
        f"median min-SE ratio original {r_orig:.4f} (>= 0.85), surrogate {r_sur:.4f} (>= 0.80)",
    )


def test_criterion_04_dominance(criterion, desk):
    gauss, uap = desk("GAUSSIAN", 8.0), desk("M_UAP", 8.0)
    margin = float(median_stat(gauss.se.reshape(1, -1))[0] - median_stat(uap.se.reshape(1, -1))[0])
    se = paired_se(gauss.se, uap.se, median_stat, "dominance")
    n = len(uap.se)
    criterion(4, n >= 200 and margin >= 3 * se, f"median SE margin {margin:.4f} = {margin / se:.1f} SE over {n} instances")


def test_criterion_05_white_box(criterion, desk):
    clean, white, black = desk(), desk("M_UAP", 8.0, crafter="original"), desk("M_UAP", 8.0)
    base = median_stat(clean.se.reshape(1, -1))[0]
    d_white = base - median_stat(white.se.reshape(1, -1))[0]
    d_black = base - median_stat(black.se.reshape(1, -1))[0]
    se = paired_se(black.se, white.se, median_stat, "white-box")
    criterion(
        5,
        d_white >= d_black - se,
        f"degradation original-crafted {d_white:.4f}, surrogate-crafted {d_black:.4f}, SE {se:.4f}",
    )


def test_criterion_06_partial_knowledge(criterion, desk):
    worst_trend, worst_gap, parts = -math.inf, -math.inf, []
    for threat in ("MALICIOUS_RUS", "MALICIOUS_UES"):
        uap = [desk("M_UAP", 8.0, threat, f) for f in FRACTIONS]
        gauss = [desk("GAUSSIAN", 8.0, threat, f) for f in FRACTIONS]
        for name, stat in (("median", median_stat), ("p5", p5_stat)):
            w = non_increasing(uap, stat, f"{threat}/{name}")
            worst_trend = max(worst_trend, w)
            parts.append(f"{threat} {name} " + ",".join(f"{stat(r.se.reshape(1, -1))[0]:.3f}" for r in uap))
        for u, g in zip(uap, gauss):
            worst_gap = max(worst_gap, float(median_stat(u.se.reshape(1, -1))[0] - median_stat(g.se.reshape(1, -1))[0]))
    criterion(
        6,
        worst_trend <= 0 and worst_gap <= 0,
        f"worst rise beyond 1 SE {worst_trend:+.4f}; worst m-UAP minus Gaussian median {worst_gap:+.4f}; " + "; ".join(parts),
    )


def test_criterion_07_epsilon_sweep(criterion, desk):
    uap = [desk("M_UAP", e) for e in EPSILONS]
    worst = non_increasing(uap, median_stat, "epsilon")
    medians = ",".join(f"{median_stat(r.se.reshape(1, -1))[0]:.3f}" for r in uap)
    criterion(7, worst <= 0, f"medians {medians}; worst rise beyond 1 SE {worst:+.4f}")


def test_criterion_08_energy_efficiency(criterion, desk):
    clean = desk().ee.mean()
    reductions = [1 - desk("M_UAP", e, "MALICIOUS_RUS", 0.5).ee.mean() / clean for e in EPSILONS]
    at8 = reductions[EPSILONS.index(8.0)]
    growing = all(b > a for a, b in zip(reductions, reductions[1:]))
    criterion(
        8,
        at8 >= 0.05 and growing,
        "mean EE reduction " + ",".join(f"{r:.1%}" for r in reductions) + f" over eps {EPSILONS}",
    )


def test_criterion_09_budget(criterion, desk):
    bad = [
        key
        for key, r in desk.results.items()
        if r.max_abs_delta > r.scenario.epsilon or r.max_off_mask != 0.0
    ]
    n = len(desk.results)
    criterion(9, n > 0 and not bad, f"{n} scenarios checked, violations: {bad or 'none'}")


def _pipeline(root):
    root.mkdir()
    (root / "net.json").write_text(json.dumps({"num_rus": 4, "num_ues": 2}))
    spec = {
        "network": {"num_rus": 4, "num_ues": 2},
        "dataset": "data.bin",
        "original": {"path": "original.model", "hidden": [32, 16], "epochs": 20, "seed": 1},
        "surrogate": {"path": "surrogate.model", "hidden": [16], "epochs": 20, "seed": 2},
        "scenarios": [
            {"attack": "NONE"},
            {"attack": "GAUSSIAN", "epsilon": 8},
            {"attack": "FGSM", "epsilon": 8},
            {"attack": "BIM", "epsilon": 8, "crafter": "original"},
            {"attack": "M_UAP", "epsilon": 8, "threat": "MALICIOUS_RUS", "fraction": 0.5},
        ],
        "num_instances": 40,
        "num_samples": 600,
        "uap_samples": 8,
    }
    (root / "spec.json").write_text(json.dumps(spec))
    codes = [
        cli_main(["attack", "--spec", str(root / "spec.json")]),
        cli_main(["sweep", "--spec", str(root / "spec.json"), "--axis", "fraction", "--values", "0.25,0.5,1",
                  "--threat", "MALICIOUS_UES"]),
    ]
    assert codes == [0, 0]
    names = ["data.bin", "original.model", "surrogate.model"]
    names += [f"out/{s}.{x}" for s in ("attack", "sweep") for x in ("json", "csv")]
    names += ["out/attack_cdf.csv", "out/sweep_cdf.csv"]
    return {n: (root / n).read_bytes() for n in names}


def test_criterion_10_determinism(criterion, desk, tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differing = [n for n in a if a[n] != b[n]]
    s = Scenario("M_UAP", 8.0, "MALICIOUS_RUS", 0.5)
    first = json.dumps(desk.ev.summarize(desk.ev.evaluate_scenario(s)), sort_keys=True)
    fresh = Evaluator(desk.ev.spec)
    again = json.dumps(fresh.summarize(fresh.evaluate_scenario(s)), sort_keys=True)
    desk_same = first == again
    criterion(
        10,
        not differing and desk_same,
        f"{len(a)} pipeline artifacts compared, differing: {differing or 'none'}; desk-scale row identical: {desk_same}",
    )
