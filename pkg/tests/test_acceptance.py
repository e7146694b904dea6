"""End-to-end acceptance checks, one test per criterion.

Every test records a PASS/FAIL line; ``conftest.py`` prints them in the
terminal summary. The benchmark pipeline runs once per session through the
command-line interface on the shipped spec and config.
"""
import io
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from modpool import checkpoint as ckpt
from modpool import cli, gradsuite
from modpool.data import sample_episode, split_classes, split_sizes
from modpool.evaluate import DEFAULT_EPISODES, DEFAULT_QUERIES, parse_report
from modpool.pool import (
    ADAPTER,
    CHANNEL,
    RESNET18_INSERTION_WIDTHS,
    ModelPool,
    count_modulator_params,
    embed_array,
    init_base,
)
from modpool.train import best_model_label

RESULTS: dict[str, tuple[bool, str]] = {}

ASSETS = resources.files("modpool.assets")
SPEC = Path(str(ASSETS / "three_domain.spec"))
CONFIG = Path(str(ASSETS / "three_domain.cfg"))
PIPELINE_BUDGET_S = 600


def record(criterion: str, passed: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(passed), detail)
    assert passed, f"criterion {criterion}: {detail}"


def run(*argv) -> str:
    out, err = io.StringIO(), io.StringIO()
    code = cli.main([str(a) for a in argv], out=out, err=err)
    assert code == 0, err.getvalue()
    return out.getvalue()


def train(root: Path, *settings: str) -> Path:
    out = root / "out"
    out.mkdir()
    flags = ["--config", CONFIG, "--set", f"data_dir={root / 'data'}", "--set", f"out_dir={out}"]
    for s in settings:
        flags += ["--set", s]
    run("train-base", *flags)
    run("train-modulators", *flags)
    return out, flags


def evaluate(root: Path, method: str, *flags) -> dict:
    path = root / f"{method}.report"
    run("eval", "--method", method, "--data", root / "data", "--out", path, *flags)
    return parse_report(path.read_text())


def pipeline(root: Path) -> dict:
    """gen-data, all three stages, and the seen-domain evaluations."""
    (root / "data").mkdir(parents=True)
    start = time.perf_counter()
    run("gen-data", SPEC, "--out", root / "data")
    out, flags = train(root)
    run("train-selector", *flags)
    reports = {
        "proto": evaluate(root, "proto", "--checkpoint", out / "base.pool"),
        "dos": evaluate(root, "dos", "--checkpoint", out / "selector.pool"),
        "doa": evaluate(root, "doa", "--checkpoint", out / "modulators.pool"),
    }
    return {"root": root, "out": out, "flags": flags, "reports": reports,
            "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("benchmark"))


@pytest.fixture(scope="session")
def lodo(benchmark, tmp_path_factory):
    """Leave-one-domain-out folds: DoA and Simple-Avg scored on the held-out domain."""
    data = benchmark["root"] / "data"
    folds = {}
    start = time.perf_counter()
    for holdout in cli.load_data_dir(data).names:
        root = tmp_path_factory.mktemp(f"lodo_{holdout}")
        (root / "data").symlink_to(data)
        out, flags = train(root, f"holdout={holdout}")
        run("train-independent", *flags)
        doa = evaluate(root, "doa", "--checkpoint", out / "modulators.pool", "--holdout", holdout)
        sa = evaluate(root, "simple_avg", "--independent", out / "independent.pool", "--holdout", holdout)
        folds[holdout] = (float(doa["header"]["mean"]), float(sa["header"]["mean"]), doa, sa)
    return folds, time.perf_counter() - start


# --- 1 -------------------------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = gradsuite.run(0)
    elapsed = time.perf_counter() - start
    primitive = max(r.error for r in results if r.tolerance == gradsuite.PRIMITIVE_TOL)
    composite = {r.op: r.error for r in results if r.tolerance == gradsuite.COMPOSITE_TOL}
    ok = primitive < 1e-4 and composite["prototypical_loss"] < 1e-3 and all(r.passed for r in results) \
        and elapsed < 30
    record("1", ok, f"{len(results)} checks, worst primitive {primitive:.2e}, prototypical loss "
                    f"{composite['prototypical_loss']:.2e}, {elapsed:.1f}s")


# --- 2 -------------------------------------------------------------------------------------------

def test_criterion_2_identity_initialization():
    cfg = cli.load_config(CONFIG, [f"data_dir={CONFIG.parent}"])
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 16)).astype(np.float32)
    checked = 0
    for normalize in (False, True):
        spec = cli.RunConfig(CONFIG.parent, layer_widths=cfg.layer_widths, normalize=normalize).backbone(16)
        for kind in (ADAPTER, CHANNEL):
            pool = ModelPool.create(spec, init_base(spec, rng), kind, ["a", "b", "c"])
            base = embed_array(x, pool, 0)
            for i in range(1, pool.size):
                assert np.array_equal(embed_array(x, pool, i), base)
                checked += 1
    record("2", True, f"{checked} fresh modulators bitwise equal to the base over widths {cfg.layer_widths}")


# --- 3 -------------------------------------------------------------------------------------------

def test_criterion_3_parameter_accounting():
    total = 8 * count_modulator_params(RESNET18_INSERTION_WIDTHS, CHANNEL)
    record("3", total == 61_440, f"8 channel-wise modulators on ResNet-18 widths = {total:,}")


# --- 4 -------------------------------------------------------------------------------------------

def test_criterion_4_split_reproduction():
    rows = {100: (70, 15, 15), 47: (32, 7, 8), 43: (30, 6, 7), 1623: (1136, 243, 244)}
    got = {c: split_classes(c, seed=0).sizes for c in rows}
    record("4", got == rows and all(split_sizes(c) == s for c, s in rows.items()),
           " ".join(f"{c}->{got[c]}" for c in rows))


# --- 5 -------------------------------------------------------------------------------------------

def _oracle_embed(x, theta, spec, kind, mod):
    h = x.astype(np.float64)
    last = len(spec.layer_widths) - 1
    for l in range(last + 1):
        h = h @ theta[f"layer{l}.weight"].astype(np.float64) + theta[f"layer{l}.bias"]
        if spec.normalize:
            mu, var = h.mean(axis=1, keepdims=True), h.var(axis=1, keepdims=True)
            h = (h - mu) / np.sqrt(var + 1e-5) * theta[f"layer{l}.norm_scale"] + theta[f"layer{l}.norm_shift"]
        if mod and kind == ADAPTER:
            h = h + h @ mod[f"layer{l}.adapter"].astype(np.float64)
        elif mod and kind == CHANNEL:
            h = h * mod[f"layer{l}.scale"] + mod[f"layer{l}.shift"]
        if l < last:
            h = np.maximum(h, 0)
    return h


def _oracle_label(ep, pool):
    counts = []
    for i in range(pool.size):
        mod = pool.modulator(i).params
        s = _oracle_embed(ep.support_x, pool.theta, pool.spec, pool.kind, mod)
        q = _oracle_embed(ep.query_x, pool.theta, pool.spec, pool.kind, mod)
        protos = np.stack([s[ep.support_y == c].mean(axis=0) for c in range(ep.way)])
        d = ((q[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
        counts.append(int((d.argmin(axis=1) == ep.query_y).sum()))
    best = max(counts)
    return counts.index(best), counts


def test_criterion_5_selection_label_oracle(benchmark):
    pool, _ = ckpt.pool_from(*ckpt.load(benchmark["out"] / "selector.pool"))
    data = cli.load_data_dir(benchmark["root"] / "data")
    rng = np.random.default_rng(2024)
    matches = 0
    for _ in range(200):
        k = int(rng.integers(len(data.datasets)))
        part = ("train", "val", "test")[int(rng.integers(3))]
        ep = sample_episode(data.datasets[k], data.splits[k].part(part), 5, 5, 10, rng)
        label = best_model_label(ep, pool)
        oracle, counts = _oracle_label(ep, pool)
        matches += label.y_sel == oracle and list(label.correct) == counts
    record("5", matches == 200, f"{matches}/200 episodes match the float64 brute-force re-scoring")


# --- 6 -------------------------------------------------------------------------------------------

def test_criterion_6_stage_isolation(benchmark):
    records = {s: ckpt.tensor_records((benchmark["out"] / f"{s}.pool").read_bytes())
               for s in ("base", "modulators", "selector")}
    theta = [k for k in records["base"] if k.startswith("theta/")]
    alpha = [k for k in records["modulators"] if k.startswith("alpha")]
    step2 = all(records["modulators"][k] == records["base"][k] for k in theta)
    step3 = all(records["selector"][k] == records["modulators"][k] for k in theta + alpha)
    record("6", step2 and step3 and theta and alpha,
           f"{len(theta)} base tensors unchanged by step 2, {len(theta) + len(alpha)} unchanged by step 3")


# --- 7 -------------------------------------------------------------------------------------------

def test_criterion_7a_dos_beats_proto(benchmark):
    reports = benchmark["reports"]
    dos, proto = float(reports["dos"]["header"]["mean"]), float(reports["proto"]["header"]["mean"])
    # per-episode best single model, read off the DoA report's member counts (same episode streams)
    counts = np.zeros((DEFAULT_EPISODES, len(reports["doa"]["contributions"]) // DEFAULT_EPISODES))
    for ep, model, correct in reports["doa"]["contributions"]:
        counts[ep, model] = correct
    oracle = float((counts.max(axis=1) / (5 * DEFAULT_QUERIES)).mean())
    episodes = len(reports["dos"]["episodes"])
    gain = dos - proto
    record("7a", episodes == 600 and gain >= 0.05 and dos <= oracle + 1e-9,
           f"DoS {dos:.4f} vs Proto {proto:.4f} (gain {100 * gain:.2f} points, oracle selection {oracle:.4f}, "
           f"{episodes} episodes, pipeline {benchmark['seconds']:.0f}s)")


def test_criterion_7b_selector_agreement(benchmark):
    report = benchmark["reports"]["dos"]
    domains = report["header"]["domains"].split(",")
    hits = sum(chosen == domains.index(dom) + 1 for _, dom, _, chosen in report["episodes"])
    rate = hits / len(report["episodes"])
    record("7b", rate >= 0.70, f"selector picked the episode's source slot on {hits}/{len(report['episodes'])} "
                               f"episodes ({100 * rate:.1f}%)")


def test_criterion_7c_lodo_doa_vs_simple_avg(benchmark, lodo):
    folds, seconds = lodo
    per_fold = " ".join(f"{h}: DoA {a:.4f} SA {b:.4f}" for h, (a, b, _, _) in folds.items())
    protocol_ok = all(d["header"]["protocol"] == "unseen" and s["header"]["holdout"] == h
                      for h, (_, _, d, s) in folds.items())
    ok = protocol_ok and len(folds) == 3 and all(a >= b for a, b, _, _ in folds.values())
    record("7c", ok, f"{per_fold} ({seconds:.0f}s for 3 folds)")


def test_criterion_7_pipeline_budget(benchmark):
    record("7-time", benchmark["seconds"] < PIPELINE_BUDGET_S,
           f"gen-data + 3 training stages + 3 evaluations in {benchmark['seconds']:.0f}s "
           f"(budget {PIPELINE_BUDGET_S}s)")


# --- 8 -------------------------------------------------------------------------------------------

def test_criterion_8_protocol_constants(benchmark):
    args = cli.build_parser().parse_args(["eval", "--method", "doa", "--data", "x"])
    header = benchmark["reports"]["doa"]["header"]
    ok = (args.episodes, args.query, args.way) == (600, 10, 5) and header["episodes"] == "600" \
        and header["query"] == "10" and "ci95" in header
    record("8", ok, f"defaults episodes={args.episodes} query={args.query} way={args.way} shot={args.shot}, "
                    f"report ci95={header['ci95']}")


# --- 9 -------------------------------------------------------------------------------------------

def test_criterion_9_determinism(benchmark, tmp_path_factory):
    again = pipeline(tmp_path_factory.mktemp("rerun"))
    names = ["base.pool", "modulators.pool", "selector.pool"]
    same_ckpt = all((again["out"] / n).read_bytes() == (benchmark["out"] / n).read_bytes() for n in names)
    same_reports = all((again["root"] / f"{m}.report").read_bytes() == (benchmark["root"] / f"{m}.report").read_bytes()
                       for m in ("proto", "dos", "doa"))
    record("9", same_ckpt and same_reports, f"{len(names)} checkpoints and 3 reports byte-identical across two runs")


# --- 10 ------------------------------------------------------------------------------------------

def test_criterion_10_probability_rows(benchmark, lodo):
    root, out = benchmark["root"], benchmark["out"]
    folds, _ = lodo
    errors = {m: float(r["header"]["max_prob_row_error"]) for m, r in benchmark["reports"].items()}
    errors["fine_tune"] = float(evaluate(root, "fine_tune", "--checkpoint", out / "base.pool")
                                ["header"]["max_prob_row_error"])
    errors["simple_avg"] = max(float(s["header"]["max_prob_row_error"]) for _, _, _, s in folds.values())
    worst = max(errors.values())
    record("10", worst <= 1e-6 and set(errors) == {"proto", "dos", "doa", "fine_tune", "simple_avg"},
           f"worst |row sum - 1| = {worst:.1e} over {len(errors)} methods x 600 episodes")
