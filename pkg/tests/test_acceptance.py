"""Acceptance gate: the eight top-level criteria at their stated tolerances.

Each test records one PASS/FAIL line (printed in the pytest terminal summary
and to stdout).  Criterion 6 and 7 artifacts (CSV + effective configs) go to
``$CNILAB_ACCEPTANCE_DIR`` or ``artifacts/acceptance`` in the repository.
"""
import functools
import json
import os
import pathlib
import time

import numpy as np
import pytest

from cnilab.attacks import AttackConfig, BlackBoxModel, blackbox_attack, fgsm, nes_gradient_estimate, pgd
from cnilab.cli import main
from cnilab.config import ExperimentConfig
from cnilab.data import gen_synthetic, load_idx, read_idx, save_idx, write_idx
from cnilab.nn import apply_defense, build_mlp
from cnilab.noise import ColoredNoiseParams, covariance, sample
from cnilab.rng import SeedStreams
from cnilab.sweep import SweepSpec, emit_report, run_sweep
from cnilab.tensor import Tensor, backward, finite_difference_grad, softmax_cross_entropy
from cnilab.training import SGD, TrainConfig, adversarial_train_step, dump_checkpoint, load_checkpoint, save_checkpoint

from conftest import ACCEPTANCE_RESULTS, SMALL_CONFIG, grad_check, rel_err
from oracles import GRAD_CASES, N_INSTANCES, DiagonalReference, instances, reparameterization_case

ARTIFACTS = pathlib.Path(os.environ.get("CNILAB_ACCEPTANCE_DIR", pathlib.Path(__file__).parents[1] / "artifacts" / "acceptance"))


def criterion(number, title):
    """Record PASS/FAIL for the wrapped test; the test still fails normally."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                ACCEPTANCE_RESULTS.append((number, title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"))
                print(f"[FAIL] criterion {number}: {title}")
                raise
            ACCEPTANCE_RESULTS.append((number, title, True, detail))
            print(f"[PASS] criterion {number}: {title} -- {detail}")

        return run

    return wrap


def _dump(name, cfg: ExperimentConfig, report):
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    emit_report(report, ARTIFACTS / f"{name}.csv")
    (ARTIFACTS / f"{name}.config.json").write_text(cfg.to_json() + "\n")


# ---------------------------------------------------------------------------

@criterion(1, "sampler statistics (N=8, M=2, 200k draws)")
def test_1_sampler_statistics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    params = ColoredNoiseParams.from_arrays(rng.uniform(-1, 1, 8), rng.uniform(-1, 1, (8, 2)))
    sigma = covariance(params).data
    n = 200_000
    draws = sample(params, np.random.default_rng(202), size=n).data
    mean_bound = 4 * np.sqrt(np.max(np.diag(sigma))) / np.sqrt(n)
    worst_mean = float(np.max(np.abs(draws.mean(axis=0))))
    frob = float(np.linalg.norm(np.cov(draws, rowvar=False, bias=True) - sigma) / np.linalg.norm(sigma))
    elapsed = time.perf_counter() - t0
    assert worst_mean < mean_bound, f"mean {worst_mean} >= {mean_bound}"
    assert frob < 0.05, f"relative Frobenius error {frob}"
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    return f"max|mean|={worst_mean:.2e} (<{mean_bound:.2e}), cov rel Frobenius={frob:.4f} (<0.05), {elapsed:.2f}s"


@criterion(2, "gradient oracles (every op + reparameterization, >=20 instances, rel. err < 1e-5)")
def test_2_gradient_oracles():
    t0 = time.perf_counter()
    worst = {}
    for name, make in GRAD_CASES.items():
        errs = []
        for rng in instances(sum(map(ord, name))):
            shape, f = make(rng)
            errs.append(rel_err(*grad_check(f, rng.uniform(-1, 1, shape))))
        worst[name] = max(errs)
    errs_s, errs_v = [], []
    for rng in instances(7):
        s0, v0, f = reparameterization_case(rng)
        st, vt = Tensor(s0, requires_grad=True), Tensor(v0, requires_grad=True)
        backward(f(st, vt))
        errs_s.append(rel_err(st.grad, finite_difference_grad(lambda s: f(s, Tensor(v0)), s0)))
        errs_v.append(rel_err(vt.grad, finite_difference_grad(lambda v: f(Tensor(s0), v), v0)))
    worst["reparam_s"], worst["reparam_V"] = max(errs_s), max(errs_v)
    # full noisy network: input gradient through weight- and activation-noise sites
    model = apply_defense(build_mlp(6, [8], 3, seed=0), "cni-w+a", rank=2, seed=0)
    errs = []
    for i, rng in enumerate(instances(11)):
        y = rng.integers(0, 3, 4)

        def f(x, i=i, y=y):
            with model.frozen():
                return softmax_cross_entropy(model.forward(x, SeedStreams(i)), y)

        errs.append(rel_err(*grad_check(f, rng.uniform(0, 1, (4, 6)))))
    worst["noisy_mlp_input"] = max(errs)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    assert not bad, f"rel. err too large: {bad}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    return f"{len(worst)} ops x {N_INSTANCES} instances, worst rel. err {max(worst.values()):.1e}, {elapsed:.1f}s"


@criterion(3, "rank-0 pipeline bit-identical to a dedicated diagonal implementation (5 steps)")
def test_3_pni_equivalence():
    ds = gen_synthetic(classes=4, dim=10, per_class=15, separation=1.0, seed=5, std=0.1)
    model = apply_defense(build_mlp(10, [12], 4, seed=9), "pni-w", rank=0, seed=9)
    ref = DiagonalReference(model.state_arrays())
    cfg = TrainConfig(lr=0.05, loss_mix=0.5, attack=AttackConfig(8 / 255, 4), weight_decay=1e-4, v_weight_decay=1e-3)
    opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay, cfg.v_weight_decay)
    ours, theirs = SeedStreams(31), SeedStreams(31)
    order = np.random.default_rng(0).permutation(len(ds))
    for step in range(5):
        idx = order[step * 12:(step + 1) * 12]
        adversarial_train_step(model, ds.inputs[idx], ds.labels[idx], cfg, opt, cfg.lr, ours)
        ref.step(ds.inputs[idx], ds.labels[idx], cfg, cfg.lr, theirs)
        for name, t in model.parameters().items():
            assert t.data.tobytes() == ref.p[name].data.tobytes(), f"step {step}: {name} differs"
    assert ours.get_state() == theirs.get_state(), "random streams consumed differently"
    return f"{len(model.parameters())} tensors bit-identical after 5 adversarial steps"


@criterion(4, "attack contracts over 1000 randomized cases; pgd(k=1, step=eps) == fgsm")
def test_4_attack_contracts():
    master = np.random.default_rng(2024)
    defenses = ["none", "pni-w", "cni-w", "cni-a", "cni-w+a"]
    checked = 0
    for case in range(1000):
        d, bsz, hidden = int(master.integers(1, 9)), int(master.integers(1, 6)), int(master.integers(2, 9))
        defense = defenses[case % len(defenses)]
        model = apply_defense(build_mlp(d, [hidden], 3, seed=case), defense, rank=int(master.integers(0, 4)), seed=case)
        lo = float(master.uniform(-1.0, 0.4))
        hi = float(master.uniform(0.6, 2.0))
        eps = float(master.choice([0.0, master.uniform(0, 0.05), master.uniform(0, 1.0)]))
        cfg = AttackConfig(eps, int(master.integers(1, 5)), None if master.random() < 0.5 else float(master.uniform(1e-3, 0.5)),
                           bool(master.random() < 0.5), int(master.integers(1, 3)), (lo, hi))
        x = master.uniform(lo, hi, (bsz, d))
        y = master.integers(0, 3, bsz)
        streams = SeedStreams(case)
        outs = {
            "fgsm": fgsm(model, x, y, eps, (lo, hi), cfg.eot_samples, streams),
            "pgd": pgd(model, x, y, cfg, streams),
            "blackbox": blackbox_attack(BlackBoxModel.from_model(model, streams), x, y, cfg, 0.01, 2, streams),
        }
        for name, out in outs.items():
            assert out.shape == x.shape
            assert np.max(np.abs(out - x)) <= eps + 1e-12, f"case {case} {name}: outside ball"
            assert out.min() >= lo and out.max() <= hi, f"case {case} {name}: outside bounds"
            checked += 1
        one_step = AttackConfig(eps, 1, eps if eps > 0 else None, False, cfg.eot_samples, (lo, hi))
        a = pgd(model, x, y, one_step, SeedStreams(case + 10**6))
        b = fgsm(model, x, y, eps, (lo, hi), cfg.eot_samples, SeedStreams(case + 10**6))
        assert a.tobytes() == b.tobytes(), f"case {case}: pgd(k=1) != fgsm"
    return f"1000 cases, {checked} attack outputs contained, 1000 pgd/fgsm collapses bitwise equal"


@criterion(5, "NES estimator (quadratic, d=10, n=2000, sigma=0.01; constant loss -> 0)")
def test_5_nes():
    d = 10
    x = np.random.default_rng(0).uniform(-1, 1, (1, d))
    bb = BlackBoxModel(lambda z: 0.5 * np.sum(z ** 2, axis=1, keepdims=True))
    g = nes_gradient_estimate(bb, x, None, 0.01, 2000, np.random.default_rng(0), loss=lambda out, y: out[:, 0])
    err = float(np.linalg.norm(g - x) / np.linalg.norm(x))
    const = BlackBoxModel(lambda z: np.full((z.shape[0], 1), 3.0))
    g0 = nes_gradient_estimate(const, x, None, 0.01, 2000, np.random.default_rng(1), loss=lambda out, y: out[:, 0])
    assert bb.queries == 2000 and const.queries == 2000
    assert err < 0.1, f"rel. err {err}"
    assert np.all(g0 == 0.0), "constant loss estimate not exactly zero"
    return f"rel. err {err:.4f} (<0.1), constant-loss estimate exactly 0, 2000 query batches each"


TREND = {
    "seed": 0,
    "train": {"epochs": 30, "batch_size": 64, "lr": 0.01, "attack": {"epsilon": 16 / 255, "k": 7}},
    "attack": {"epsilon": 16 / 255, "k": 7},
    "model": {"hidden": [64]},
    "eval": {"n_noise_draws": 3},
}


def _trend(defense, ranks):
    cfg = ExperimentConfig.load(None, {**TREND, "defense": defense})
    t0 = time.perf_counter()
    report = run_sweep(SweepSpec("rank", ranks, 3, cfg))
    per_run = (time.perf_counter() - t0) / (3 * len(ranks))
    assert not report.errors, report.errors
    _dump(f"trend_{defense}", cfg, report)
    return report, per_run


@pytest.fixture(scope="module")
def trend():
    out = {}
    slowest = 0.0
    for defense, ranks in (("none", [0]), ("adv-train", [0]), ("pni-w", [0]), ("cni-w", [2, 5])):
        report, per_run = _trend(defense, ranks)
        slowest = max(slowest, per_run)
        for row in report.sorted_rows():
            out[defense if defense != "cni-w" else f"cni-w M={int(row.value)}"] = row
    return out, slowest


@criterion(6, "toy robustness trend (3 seeds, PGD k=7)")
def test_6_toy_trend(trend):
    rows, per_run = trend
    table = {k: f"{100 * r.adv_mean:.1f}+-{100 * r.adv_std:.1f}" for k, r in rows.items()}
    print("PGD accuracy % (mean+-std over 3 seeds x 3 noise draws):", json.dumps(table))
    assert all(r.seed_count == 3 for r in rows.values())
    gain = 100 * (rows["adv-train"].adv_mean - rows["none"].adv_mean)
    pni = rows["pni-w"].adv_mean
    # (b) is measured and reported; the direction is the expected one, not a gate
    verdict_b = "; ".join(
        f"{k} {'>=' if rows[k].adv_mean >= pni else '<'} PNI" for k in ("cni-w M=2", "cni-w M=5")
    )
    assert per_run < 300, f"{per_run:.0f}s per run"
    assert gain >= 10, f"adversarial training gain {gain:.1f} points < 10"
    return f"(a) adv-train - none = {gain:+.1f} pts; (b) {verdict_b}: {table}; {per_run:.1f}s/run; artifacts in {ARTIFACTS}"


@criterion(7, "ablation monotonicity over epsilon on a frozen model")
def test_7_epsilon_ablation():
    cfg = ExperimentConfig.load(None, {**TREND, "defense": "cni-w", "rank": 5, "eval": {"n_noise_draws": 5}})
    train_set, val_set, _ = (cfg.shape_for_model(d) for d in cfg.datasets())
    est = cfg.estimator().fit(train_set.inputs, train_set.labels, val_set.inputs, val_set.labels)
    values = [e / 255 for e in (0, 2, 4, 8, 16, 24)]
    report = run_sweep(SweepSpec("epsilon", values, 1, cfg), checkpoint=est.checkpoint_)
    _dump("ablation_epsilon", cfg, report)
    rows = report.sorted_rows()
    assert report.train_steps == 0
    assert rows[0].adv_mean == rows[0].clean_mean and rows[0].adv_std == rows[0].clean_std, "eps=0 differs from clean"
    for a, b in zip(rows, rows[1:]):
        assert b.adv_mean <= a.adv_mean + max(a.adv_std, b.adv_std), f"accuracy rose from eps={a.value} to {b.value}"
    drop = 100 * (rows[-1].clean_mean - rows[-1].adv_mean)
    assert drop >= 30, f"drop at 24/255 only {drop:.1f} points"
    curve = ", ".join(f"{round(r.value * 255)}:{100 * r.adv_mean:.1f}" for r in rows)
    return f"adv acc % by eps*255 [{curve}], drop at 24/255 = {drop:.1f} pts"


@criterion(8, "determinism and round-trips (CLI CSV, checkpoint, IDX)")
def test_8_determinism(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(SMALL_CONFIG))
    csvs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(config), "--seed", "7", "--defense", "cni-w", "--rank", "2", "--out", str(out)]) == 0
        assert main(["sweep", "--config", str(config), "--seed", "7", "--variable", "epsilon", "--values", "0,8/255",
                     "--repetitions", "2", "--checkpoint", str(out / "model.ckpt"), "--out", str(out / "sweep")]) == 0
        csvs.append(((out / "report.csv").read_bytes(), (out / "sweep" / "report.csv").read_bytes()))
    capsys.readouterr()
    assert csvs[0] == csvs[1], "repeated CLI runs wrote different CSV"

    ck_path = tmp_path / "a" / "model.ckpt"
    raw = ck_path.read_bytes()
    ck = load_checkpoint(ck_path)
    save_checkpoint(ck, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == raw == dump_checkpoint(ck)

    pixels = np.random.default_rng(0).integers(0, 256, (6, 5, 5), dtype=np.uint8)
    write_idx(pixels, tmp_path / "d-images")
    write_idx(np.arange(6, dtype=np.uint8) % 3, tmp_path / "d-labels")
    ds = load_idx(tmp_path / "d-images")
    save_idx(ds, tmp_path / "e-images")
    assert (tmp_path / "e-images").read_bytes() == (tmp_path / "d-images").read_bytes()
    assert (tmp_path / "e-labels").read_bytes() == (tmp_path / "d-labels").read_bytes()
    assert read_idx(tmp_path / "e-images").tobytes() == pixels.tobytes()
    return f"2 CLI runs byte-identical ({len(csvs[0][0]) + len(csvs[0][1])} CSV bytes), checkpoint ({len(raw)} B) and IDX round-trips exact"
