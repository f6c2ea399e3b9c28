"""Acceptance criteria at their stated tolerances.

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary. Criteria 3, 4 and 7 run full default experiments and take
from minutes to about an hour each on one CPU.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from actorgrasp import autodiff as ad
from actorgrasp.autodiff import Tensor
from actorgrasp.density import CouplingLayer, FlowModel, MofModel
from actorgrasp.experiments import config_hash, default_config, read_csv, run_experiment
from actorgrasp.toy import entropy_fixed_point_run, saddle_gradient_norm, saddle_loss, saddle_stall_run

from conftest import numeric_grad
from helpers import randomize_last_layers

DATA = Path(__file__).parent / "data"
SIZES = [2000, 5000, 20000]


def csv_bytes(run_dir):
    return {p.name: p.read_bytes() for p in sorted(Path(run_dir).glob("*.csv")) if p.name != "timings.csv"}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Default-config experiment runs shared between criteria."""
    root = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def get(experiment):
        if experiment not in cache:
            cache[experiment] = run_experiment(default_config(experiment), root / "first")
        return cache[experiment]

    get.root = root
    return get


# -- 1 ------------------------------------------------------------------------------------------------------
def test_criterion_1_flow_correctness(report):
    rng = np.random.default_rng(0)
    worst = {"inverse": 0.0, "logdet": 0.0, "quadrature": 0.0, "grad": 0.0}

    for dim in (1, 2, 3, 5):
        m = randomize_last_layers(FlowModel(dim, 2, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng), rng, 0.5)
        feats = m.encoder(rng.standard_normal((500, 2)))
        x = Tensor(3 * rng.standard_normal((1, 500, dim)))
        z, _ = m.flow.inverse(x, feats)
        back, _ = m.flow.forward(z, feats)
        worst["inverse"] = max(worst["inverse"], float(np.max(np.abs(back.data - x.data))))

    for dim in (2, 3, 4):
        layer = CouplingLayer(dim, 3, True, hidden=8, rng=rng)
        for net in (layer.s_net, layer.t_net):
            net.weights[-1].data[...] = 0.5 * rng.standard_normal(net.weights[-1].shape)
        f = Tensor(rng.standard_normal((1, 1, 3)))
        for _ in range(5):
            y = rng.standard_normal(dim)
            jac = np.stack([numeric_grad(lambda v, i=i: layer.forward(Tensor(v[None, None]), f)[0].data[0, 0, i], y)
                            for i in range(dim)])
            ld = layer.forward(Tensor(y[None, None]), f)[1].data[0, 0]
            worst["logdet"] = max(worst["logdet"], abs(np.linalg.slogdet(jac)[1] - ld))

    h = 0.05
    axis = np.arange(-6 + h / 2, 6, h)
    xx, yy = np.meshgrid(axis, axis)
    pts = np.stack([xx.ravel(), yy.ravel()], 1)
    for model in (FlowModel(2, 1, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, rng=rng),
                  MofModel(2, 1, k=2, n_layers=4, hidden=8, feat_dim=4, encoder_hidden=8, init_std=0.7, rng=rng)):
        randomize_last_layers(model, rng, 0.05)
        mass = np.exp(model.log_prob_np(np.ones((len(pts), 1)), pts)).sum() * h * h
        worst["quadrature"] = max(worst["quadrature"], abs(mass - 1))

    m = randomize_last_layers(MofModel(2, 2, k=2, n_layers=2, hidden=4, feat_dim=3, encoder_hidden=4, rng=rng), rng)
    cond, x = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    ad.neg(m.log_prob(cond, x).mean()).backward()
    for p in m.parameters():
        def f(v, p=p):
            old, p.data = p.data, v
            val = -m.log_prob_np(cond, x).mean()
            p.data = old
            return val
        num = numeric_grad(f, p.data.copy())
        worst["grad"] = max(worst["grad"], float(np.max(np.abs(num - p.grad)) / max(1e-8, np.max(np.abs(num)))))

    ok = (worst["inverse"] < 1e-9 and worst["logdet"] < 1e-5 and worst["quadrature"] < 0.01
          and worst["grad"] < 1e-4)
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    assert report("criterion 1 flow correctness", ok, detail)


# -- 2 ------------------------------------------------------------------------------------------------------
def test_criterion_2a_saddle_gradient(report):
    norm = saddle_gradient_norm(n_per_interval=20_000)
    ok = norm < 1e-3
    assert report("criterion 2a saddle gradient norm", ok, f"|grad| = {norm:.6f} (bound 1e-3)")


def test_criterion_2b_saddle_stall(report):
    seeds = range(8)
    ref = saddle_loss()
    gmm = [saddle_stall_run("gmm", s) for s in seeds]
    mof = [saddle_stall_run("mof", s) for s in seeds]
    gmm_stall = np.mean([abs(v - ref) <= 0.5 for v in gmm])
    mof_stall = np.mean([abs(v - ref) <= 0.5 for v in mof])
    ok = gmm_stall >= 0.5 and mof_stall < 0.5
    detail = (f"saddle loss {ref:.4f}; GMM stall rate {gmm_stall:.2f} (mean NLL {np.mean(gmm):.3f}), "
              f"MoF stall rate {mof_stall:.2f} (mean NLL {np.mean(mof):.3f})")
    assert report("criterion 2b saddle stall", ok, detail)


# -- 3 ------------------------------------------------------------------------------------------------------
def test_criterion_3_cem_scaling(report, runs):
    run_dir, _ = runs("scaling")
    rows = read_csv(run_dir / "scaling_summary.csv")
    med = {(int(r["D"]), float(r["r"])): float(r["median"]) for r in rows}
    fails = {(int(r["D"]), float(r["r"])): int(r["failures"]) for r in rows}
    wide = [med[(d, 0.1)] for d in range(1, 7)]
    monotone = all(b >= a for a, b in zip(wide, wide[1:]))
    narrow_fail = sum(fails[(d, 0.03)] for d in range(1, 7))
    actor = read_csv(run_dir / "actor_hypersphere.csv")
    rates = {int(r["D"]): float(r["any_success_rate"]) for r in actor}
    actor_ok = all(rates[d] >= 0.95 for d in (1, 2, 3))
    reference = json.loads((DATA / "scaling_medians.json").read_text())
    narrow = [med[(d, 0.03)] for d in range(1, 7)]
    regression = reference == {"r=0.1": wide, "r=0.03": narrow}
    ok = monotone and narrow_fail > 0 and actor_ok and regression
    detail = (f"r=0.1 medians {wide}; r=0.03 medians {narrow}, failures {narrow_fail}; "
              f"actor one-batch success {rates}; matches archived medians: {regression}")
    assert report("criterion 3 CEM scaling", ok, detail)


# -- 4 ------------------------------------------------------------------------------------------------------
def test_criterion_4_five_point(report, runs):
    _, summary = runs("five-point")
    ll = summary["mean_heldout_ll"]
    mof, mof10, flow, gmm10 = ll["mof@1"], ll["mof@10"], ll["flow@1"], ll["gmm@10"]
    ok = mof - flow >= 0.2 and mof - gmm10 >= 0.2 and abs(mof - mof10) <= 0.1
    detail = (f"held-out LL over {len(summary['seeds'])} seeds: MoF {mof:.3f}, MoF(std 10) {mof10:.3f}, "
              f"RealNVP {flow:.3f}, GMM(std 10) {gmm10:.3f}, GMM(std 1) {ll['gmm@1']:.3f}, "
              f"ground truth {summary['ground_truth_ll']:.3f}")
    assert report("criterion 4 five-point likelihoods", ok, detail)


# -- 5 ------------------------------------------------------------------------------------------------------
def test_criterion_5_entropy_fixed_point(report):
    parts, ok = [], True
    for alpha in (0.5, 1.0):
        ratio = entropy_fixed_point_run(alpha)
        target = math.exp(1 / alpha)
        ok &= abs(ratio / target - 1) <= 0.1
        parts.append(f"alpha {alpha}: ratio {ratio:.3f} vs {target:.3f} ({100 * (ratio / target - 1):+.1f}%)")
    assert report("criterion 5 entropy fixed point", ok, "; ".join(parts))


# -- 6 ------------------------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def inference(runs):
    return runs("inference-time")[1]


def test_criterion_6a_inference_batches(report, inference):
    b, s = inference["forward_batches_per_decision"], inference["scored_samples_per_decision"]
    ok = b["cem"] == 3 * b["actor"] and s["cem"] == 192 and s["actor"] == 64
    detail = f"forward batches cem {b['cem']:g} / actor {b['actor']:g}; scored {s['cem']:g} vs {s['actor']:g}"
    assert report("criterion 6a inference batch count", ok, detail)


def test_criterion_6b_inference_wall_clock(report, inference):
    ratio = inference["cem_over_actor_time"]
    t = inference["mean_seconds"]
    detail = (f"cem/actor wall-clock {ratio:.2f} (bound >= 2.5); actor {1e3 * t['actor']:.2f} ms, "
              f"cem {1e3 * t['cem']:.2f} ms per decision")
    assert report("criterion 6b inference wall-clock", ratio >= 2.5, detail)


# -- 7 ------------------------------------------------------------------------------------------------------
def test_criterion_7a_off_policy_dataset_size(report, runs):
    _, summary = runs("off-policy")
    final = summary["final_success_rate"]
    actor = [final["actor"][str(n)] for n in SIZES]
    critic = [final["critic"][str(n)] for n in SIZES]
    inc = lambda v: all(b > a for a, b in zip(v, v[1:]))
    ok = len(summary["seeds"]) >= 5 and inc(actor) and inc(critic)
    detail = (f"{len(summary['seeds'])} seeds, sizes {SIZES}: actor {[round(v, 3) for v in actor]}, "
              f"critic (CEM) {[round(v, 3) for v in critic]}")
    assert report("criterion 7a off-policy trend", ok, detail)


@pytest.fixture(scope="module")
def on_policy(runs):
    return runs("on-policy")[1]


def _steps(summary, name):
    v = summary["variants"][name]
    return v["mean_steps_to_threshold"], f"{v['mean_steps_to_threshold']:.0f} ({v['reached']}/{v['runs']} reached)"


def test_criterion_7b_on_policy_beats_random(report, on_policy):
    actor, a_txt = _steps(on_policy, "actor_alpha0")
    rand, r_txt = _steps(on_policy, "random_alpha0")
    ok = len(on_policy["seeds"]) >= 5 and actor < rand
    detail = f"env steps to {on_policy['threshold']:.0%} success: actor {a_txt}, random {r_txt}"
    assert report("criterion 7b on-policy vs random", ok, detail)


def test_criterion_7c_entropy_not_slower(report, on_policy):
    reg, g_txt = _steps(on_policy, "actor_alpha0.1")
    plain, p_txt = _steps(on_policy, "actor_alpha0")
    ok = len(on_policy["seeds"]) >= 5 and reg <= plain
    assert report("criterion 7c entropy regularizer", ok, f"alpha 0.1 {g_txt}, alpha 0 {p_txt}")


def test_criterion_7d_actor_critic_ranking(report, runs):
    _, summary = runs("policy-eval")
    table = {r["policy"]: r["mean_success_rate"] for r in summary["table"]}
    ok = len(summary["seeds"]) >= 5 and table["actor+critic"] >= table["actor"]
    detail = ", ".join(f"{k} {v:.3f}" for k, v in table.items())
    assert report("criterion 7d actor+critic vs actor", ok, detail)


# -- 8 ------------------------------------------------------------------------------------------------------
def test_criterion_8_determinism(report, runs):
    same = {}
    for experiment in ("scaling", "inference-time"):
        first, _ = runs(experiment)
        again, _ = run_experiment(default_config(experiment), runs.root / "second")
        a, b = csv_bytes(first), csv_bytes(again)
        same[experiment] = bool(a) and a == b
    small = {
        "five-point": {"five_point": {"steps": 30, "n_test_tasks": 2, "test_samples": 500, "grid_size": 20}},
        "off-policy": {"off_policy": {"dataset_sizes": [500, 1000], "actor_steps": 30, "eval_interval": 15,
                                      "eval_episodes": 10}, "critic": {"steps": 30}},
        "on-policy": {"on_policy": {"warmup_success": 30, "env_step_budget": 1200, "eval_interval": 400,
                                    "eval_episodes": 10}},
        "policy-eval": {"policy_eval": {"dataset_size": 600, "actor_steps": 30, "eval_episodes": 10},
                        "critic": {"steps": 30}},
    }
    from actorgrasp.experiments import config_from_dict
    for experiment, sections in small.items():
        cfg = config_from_dict({"experiment": experiment, "seeds": [0, 1], **sections})
        a, _ = run_experiment(cfg, runs.root / "small-a")
        b, _ = run_experiment(cfg, runs.root / "small-b")
        same[experiment] = bool(csv_bytes(a)) and csv_bytes(a) == csv_bytes(b)
        assert all(blob.startswith(f"# config {config_hash(cfg)}".encode()) for blob in csv_bytes(a).values())
    ok = all(same.values())
    assert report("criterion 8 determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                                          for k, v in same.items()))
