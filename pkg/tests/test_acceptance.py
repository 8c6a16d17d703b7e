"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

The defend criteria share one full pipeline run on configs/default.json
(generate-data, train, evaluate, sweep); the determinism criterion reruns it
into a second directory and compares the two. Expect roughly 15 minutes on
one CPU core.
"""

from pathlib import Path

import numpy as np
import pytest

from helpers import ABS_TOL, REL_TOL, richardson_grad, worst_ratio
from helpers_cli import read_jsonl_stripped
from kcgg import autodiff as ad
from kcgg.cli import main
from kcgg.constraints import StrikeConstraint, StrikeCost
from kcgg.demos import classify_style
from kcgg.diffusion import Normalizer, cosine_schedule, gaussian_point_score, predict_tau0
from kcgg.harness import MetricsReport
from kcgg.kinematics import ArmSpec, forward_kinematics
from kcgg.network import Architecture, ScoreNetwork, load_checkpoint
from kcgg.samplers import SamplerConfig, sample_batch
from kcgg.testbed import mean_error, tune_eta

pytestmark = pytest.mark.slow

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "default.json"
COMMANDS = ("generate-data", "train", "evaluate", "sweep")
PROBES = 100
TESTBED_GRID = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0]
TESTBED_TUNE_SEED = 101
TESTBED_EVAL_SEED = 0

RESULTS: dict[int, tuple[bool, str]] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(ok), detail)
    assert ok, detail


def run_pipeline(out: Path) -> Path:
    for cmd in COMMANDS:
        rc = main([cmd, "--config", str(CONFIG), "--out", str(out)])
        assert rc == 0, f"{cmd} exited {rc}"
    return out


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("accept_a"))


# -- 1. gradient correctness -------------------------------------------------


def _fd_probe(build, x):
    leaf = ad.variable(x)
    ad.backward(build(leaf))
    # the composite amplifies noisy inputs by up to 1/sqrt(alpha_bar), so the
    # plain h^2 truncation error of central differences is too coarse an oracle
    num = richardson_grad(lambda v: float(build(ad.constant(v)).value), x)
    return worst_ratio(leaf.grad, num)


def _op_cases(rng):
    """(name, scalar-valued builder, input) per op; each probe draws fresh inputs."""
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    k = float(rng.uniform(-3, 3))
    bias_of = rng.normal(size=(5, 3))
    arm = ArmSpec()
    return [
        ("add", lambda x: ad.sum(ad.mul(ad.add(x, ad.constant(b)), ad.add(x, ad.constant(b)))), rng.normal(size=(3, 4))),
        ("sub", lambda x: ad.sum(ad.mul(ad.sub(x, ad.constant(b)), ad.sub(x, ad.constant(b)))), rng.normal(size=(3, 4))),
        ("mul", lambda x: ad.sum(ad.mul(ad.mul(x, ad.constant(b)), x)), rng.normal(size=(3, 4))),
        ("scale", lambda x: ad.sum(ad.mul(ad.scale(x, k), x)), rng.normal(size=(3, 4))),
        ("matmul", lambda x: ad.sum(ad.sin(ad.matmul(x, ad.constant(w)))), rng.normal(size=(3, 4))),
        ("matmul_rhs", lambda x: ad.sum(ad.cos(ad.matmul(ad.constant(b), x))), rng.normal(size=(4, 2))),
        ("sum", lambda x: ad.mul(ad.sum(x), ad.sum(x)), rng.normal(size=(3, 4))),
        ("silu", lambda x: ad.sum(ad.mul(ad.silu(x), ad.silu(x))), rng.normal(0, 2, size=(3, 4))),
        ("cos", lambda x: ad.sum(ad.mul(ad.cos(x), x)), rng.normal(0, 2, size=(3, 4))),
        ("sin", lambda x: ad.sum(ad.mul(ad.sin(x), x)), rng.normal(0, 2, size=(3, 4))),
        ("add_bias", lambda x: ad.sum(ad.silu(ad.add_bias(ad.constant(bias_of), x))), rng.normal(size=(1, 3))),
        ("forward_kinematics", lambda x: ad.sum(ad.mul(forward_kinematics(arm, x), forward_kinematics(arm, x))),
         rng.uniform(-1.5, 1.5, size=(4, 3))),
    ]


def _composite_case(rng):
    """tau_i -> score network -> tau0_hat -> denormalize -> FK -> strike cost."""
    arm = ArmSpec()
    H1 = 8
    arch = Architecture(horizon=H1, state_dim=6, width=32, blocks=2, time_dim=8, cond_dim=4)
    net = ScoreNetwork.create(arch, ("none", "a"), seed=int(rng.integers(1 << 30)))
    net.params["out.w"] = rng.normal(0, 0.3, size=net.params["out.w"].shape)
    net.params["out.b"] = rng.normal(0, 0.1, size=net.params["out.b"].shape)
    schedule = cosine_schedule(20)
    i = int(rng.integers(0, 20))
    norm = Normalizer(np.array([-1.6, -2.6, -2.6, -10, -10, -10.0]), np.array([1.6, 2.6, 2.6, 10, 10, 10.0]))
    lo = int(rng.integers(1, H1 - 3))
    targets = {k: tuple(rng.uniform([0.2, -0.4], [0.9, 0.4])) for k in range(lo, lo + 3)}
    guide = StrikeCost(StrikeConstraint(targets, (lo, lo + 2)), arm, norm, H1)

    def build(x):
        return guide.node(predict_tau0(schedule, x, net.score(x, schedule, i, "a"), i))

    return build, rng.normal(0, 0.5, size=(1, arch.flat_dim))


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(1)
    worst: dict[str, float] = {}
    for _ in range(PROBES):
        for name, build, x in _op_cases(rng):
            worst[name] = max(worst.get(name, 0.0), _fd_probe(build, x))
    for _ in range(PROBES):
        build, x = _composite_case(rng)
        worst["fk_through_score_network"] = max(worst.get("fk_through_score_network", 0.0), _fd_probe(build, x))
    bad = {k: round(v, 3) for k, v in worst.items() if v > 1.0}
    detail = (f"{len(worst)} checks x {PROBES} probes, worst error / max({ABS_TOL:g} abs, {REL_TOL:g} rel) = "
              f"{max(worst.values()):.3f}" + (f"; failing {bad}" if bad else ""))
    report(1, not bad, detail)


# -- 2. schedule and formula fidelity ---------------------------------------


def test_criterion_2_schedule_and_formulas():
    problems = []
    for T in (5, 10, 20, 50, 100):
        s = cosine_schedule(T)
        if not np.all(np.diff(s.alpha_bar) < 0):
            problems.append(f"T={T}: alpha_bar not decreasing")
        if not s.alpha_bar[0] > 0.99:
            problems.append(f"T={T}: alpha_bar_0={s.alpha_bar[0]:.4f} not > 0.99")
        if not s.alpha_bar[-1] < 0.01:
            problems.append(f"T={T}: alpha_bar_T={s.alpha_bar[-1]:.4g} not < 0.01")
        if not np.all((s.beta > 0) & (s.beta < 1)):
            problems.append(f"T={T}: beta outside (0, 1)")
        if not np.allclose(s.alpha_bar, np.cumprod(1 - s.beta), rtol=0, atol=1e-15):
            problems.append(f"T={T}: alpha_bar is not the product of alphas")

        rng = np.random.default_rng(T)
        target = rng.normal(size=(1, 16))
        for i in range(T):
            tau_i = rng.normal(size=(1, 16))
            sc = gaussian_point_score(s, tau_i, target, i)
            err = np.max(np.abs(predict_tau0(s, ad.constant(tau_i), ad.constant(sc), i).value - target))
            if err > 1e-10:
                problems.append(f"T={T} i={i}: tau0 error {err:.2e}")
        for i in range(1, T):
            tau_i, tau0 = rng.normal(size=8), rng.normal(size=8)
            a, abp = s.alpha[i], s.alpha_bar_prev[i]
            b = 1.0 - a
            prec = a / b + 1.0 / (1.0 - abp)
            oracle = (np.sqrt(a) / b * tau_i + np.sqrt(abp) / (1.0 - abp) * tau0) / prec
            c1, c2 = s.posterior_coefficients(i)
            err = np.max(np.abs(c1 * tau_i + c2 * tau0 - oracle))
            if err > 1e-12:
                problems.append(f"T={T} i={i}: posterior mean error {err:.2e}")
    report(2, not problems, "all invariants hold" if not problems else "; ".join(problems))


# -- 3. linear-Gaussian guidance oracle --------------------------------------


def test_criterion_3_linear_gaussian_oracle():
    eta_p, _ = tune_eta("projection", TESTBED_GRID, TESTBED_TUNE_SEED)
    eta_k, _ = tune_eta("kcgg", TESTBED_GRID, TESTBED_TUNE_SEED)
    err_u = mean_error("unconstrained", 0.0, TESTBED_EVAL_SEED)
    err_p = mean_error("projection", eta_p, TESTBED_EVAL_SEED)
    err_k = mean_error("kcgg", eta_k, TESTBED_EVAL_SEED)
    detail = (f"mean error over 500 samples: kcgg {err_k:.4f} (eta {eta_k:g}), projection {err_p:.4f} "
              f"(eta {eta_p:g}), unconstrained {err_u:.4f}")
    report(3, err_k < err_p < err_u, detail)


# -- 4. mode coverage --------------------------------------------------------


def _style_draws(ckpt, cond, n=200):
    H1 = ckpt.net.arch.horizon
    rows = []
    for seed in range(n):
        res = sample_batch(ckpt.net, ckpt.schedule, SamplerConfig("unconstrained", None, 1, 0.0, False, seed, 1.0),
                           cond, normalizer=ckpt.normalizer, horizon=H1)
        rows.append(res.best)
    return classify_style(np.array(rows))


def test_criterion_4_mode_coverage(run_a):
    ckpt = load_checkpoint(run_a / "model.kcggnet")
    styles = [c for c in ckpt.net.conditions if c != "none"]
    free = _style_draws(ckpt, "none")
    shares = [float(np.mean(free == k)) for k in range(len(styles))]
    correct = {s: float(np.mean(_style_draws(ckpt, s) == k)) for k, s in enumerate(styles)}
    ok = min(shares) >= 0.20 and min(correct.values()) >= 0.90
    detail = (f"unconditioned shares {dict(zip(styles, shares))}; conditioned correct-style {correct}")
    report(4, ok, detail)


# -- 5, 6. defend ordering and batch-filter ablation -------------------------


def _rates(path):
    return {r.method: r for r in MetricsReport.read(path).rows}


def test_criterion_5_defend_ordering(run_a):
    r = _rates(run_a / "metrics.csv")
    k, p, u, n = (r[m].block_rate for m in ("kcgg", "projection", "unconstrained", "unconstrained_no_filter"))
    eps = {m: r[m].feasible for m in r}
    ok = k > p >= u > n and k - p >= 0.10
    detail = (f"kcgg {k:.3f} > projection {p:.3f} >= unconstrained {u:.3f} > no-filter {n:.3f}, "
              f"gap {100 * (k - p):.1f} points, feasible episodes {eps}")
    report(5, ok, detail)


def test_criterion_6_batch_filter_gap(run_a):
    r = _rates(run_a / "metrics.csv")
    u, n = r["unconstrained"].block_rate, r["unconstrained_no_filter"].block_rate
    report(6, u - n >= 0.15, f"with filter {u:.3f}, without {n:.3f}, gap {100 * (u - n):.1f} points")


# -- 7. sampling-time sweep --------------------------------------------------


def test_criterion_7_sweep(run_a):
    rows = MetricsReport.read(run_a / "sweep.csv").rows
    kcgg = sorted((r for r in rows if r.method == "kcgg"), key=lambda r: r.budget_ms)
    proj = {r.budget_ms: r for r in rows if r.method == "projection"}
    dips = [
        f"{b.budget_ms:g}ms {b.block_rate:.3f} < {a.budget_ms:g}ms lower bound {a.ci_low:.3f}"
        for j, a in enumerate(kcgg) for b in kcgg[j + 1:] if b.block_rate < a.ci_low
    ]
    top = kcgg[-1]
    beats = top.block_rate > proj[top.budget_ms].block_rate
    curve = ", ".join(f"{r.budget_ms:g}ms T={r.T} {r.block_rate:.3f}" for r in kcgg)
    detail = (f"kcgg {curve}; projection at {top.budget_ms:g}ms {proj[top.budget_ms].block_rate:.3f}"
              + (f"; dips {dips}" if dips else ""))
    report(7, not dips and beats, detail)


# -- 8. determinism ----------------------------------------------------------


def _strip_metrics(path):
    return [{k: v for k, v in vars(r).items() if k != "ms_per_step"} for r in MetricsReport.read(path).rows]


def test_criterion_8_determinism(run_a, tmp_path_factory):
    run_b = run_pipeline(tmp_path_factory.mktemp("accept_b"))
    diffs = []
    for name in ("demos.kcggdat", "model.kcggnet", "loss.csv"):
        if (run_a / name).read_bytes() != (run_b / name).read_bytes():
            diffs.append(name)
    for name in ("diagnostics.jsonl", "sweep_diagnostics.jsonl"):
        if read_jsonl_stripped(run_a / name) != read_jsonl_stripped(run_b / name):
            diffs.append(name)
    for name in ("metrics.csv", "sweep.csv"):
        if _strip_metrics(run_a / name) != _strip_metrics(run_b / name):
            diffs.append(name)
    report(8, not diffs, "all non-timing outputs identical" if not diffs else f"differ: {diffs}")
