"""Acceptance checks. Each test prints one PASS/FAIL line, then asserts.

Criteria 6 to 8 train full-size toy models (about half an hour on one core
for the ladder, a few minutes more for the sweep models).
"""

import filecmp
import time

import numpy as np
import pytest
import torch

import oracles
from viplab.bench.evaluation import evaluate_ap, interpolated_ap
from viplab.bench.matching import Detection, solve_assignment
from viplab.experiment import (
    ExperimentConfig,
    load_config,
    run_ablation_ladder,
    run_prompt_count_sweep,
    run_training,
    variant_config,
)
from viplab.fusion import GATE_SENTINEL, FusionLayer, attention_weights
from viplab.integration import integrate_prompt_rows
from viplab.losses import (
    FocalParams,
    LossWeights,
    Temperatures,
    alignment_loss,
    box_regression_loss,
    focal_classification_loss,
    relation_distillation_loss,
    supervised_contrastive_loss,
    total_loss,
)
from viplab.metrics import LabeledEmbeddings, iisr, pair_counts, similarity_distributions
from viplab.prompt_encoder import BoxSpec

D = torch.float64
CUMULATIVE = ["baseline", "+align", "+global", "+distill"]


def announce(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def rows(seed, n, d, positive=False):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return np.abs(x) + 0.1 if positive else x


# 1. gradients against central differences

def _loss_fixtures(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(3, 7)), int(rng.integers(3, 6))
    labels = list(rng.integers(0, 3, size=n))
    labels[:2] = [labels[0]] * 2  # at least one positive pair
    logits = torch.tensor(rng.standard_normal((2, n, 3)), dtype=D, requires_grad=True)
    targets = torch.tensor(rng.uniform(size=(2, n, 3)) < 0.3, dtype=D)
    centre = rng.uniform(0.3, 0.7, size=(n, 2))
    size = rng.uniform(0.1, 0.3, size=(n, 2))
    pred = torch.tensor(np.hstack([centre, size]), dtype=D, requires_grad=True)
    gt = torch.tensor(np.hstack([centre + rng.normal(0, 0.05, (n, 2)), size * rng.uniform(0.7, 1.3, (n, 2))]),
                      dtype=D)
    prompts = torch.tensor(rng.standard_normal((n, d)), dtype=D, requires_grad=True)
    texts = torch.tensor(rng.standard_normal((3, d)), dtype=D)
    fp = FocalParams(0.25, 2.0)
    temps = Temperatures(0.07, 0.1)
    row_texts = texts[torch.tensor(labels)]
    return {
        "focal": (lambda z: focal_classification_loss(torch.sigmoid(z), targets, fp), logits),
        "l1": (lambda b: box_regression_loss(b, gt)[0], pred),
        "giou": (lambda b: box_regression_loss(b, gt)[1], pred),
        "align": (lambda p: alignment_loss(p, texts, labels, 0.07), prompts),
        "scl": (lambda p: supervised_contrastive_loss(p, labels, 0.1), prompts),
        "distill": (lambda p: relation_distillation_loss(p, row_texts, temps), prompts),
        "total": (lambda p: total_loss({"align": alignment_loss(p, texts, labels, 0.07),
                                        "distill": relation_distillation_loss(p, row_texts, temps)},
                                       LossWeights()), prompts),
    }


def test_criterion_1_gradients(capsys):
    start = time.perf_counter()
    failures = []
    for seed in range(20):
        for name, (fn, x) in _loss_fixtures(seed).items():
            ok = torch.autograd.gradcheck(fn, (x,), eps=1e-5, atol=1e-8, rtol=1e-4, raise_exception=False)
            if not ok:
                failures.append((name, seed))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    announce(capsys, 1, ok, f"7 losses x 20 fixtures, rtol 1e-4, {elapsed:.1f}s, failures={failures}")
    assert ok


# 2. brute-force oracles

def test_criterion_2_oracles(capsys):
    start = time.perf_counter()
    worst = {}

    def track(name, got, want):
        worst[name] = max(worst.get(name, 0.0), abs(float(got) - float(want)))

    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 12))
        labels = [0, 0, 1, 1, 2, 2] + [int(v) for v in rng.integers(0, 3, size=n - 6)]
        emb = rows(seed, n, 5, positive=True)
        track("iisr", iisr(LabeledEmbeddings(emb, labels)), oracles.iisr(emb, labels))
        intra, inter = oracles.pair_lists(emb, labels)
        ci, ce = pair_counts(labels)
        track("pair_counts", abs(ci - len(intra)) + abs(ce - len(inter)), 0)
        rep = similarity_distributions(LabeledEmbeddings(emb, labels))
        for got, want in ((rep.intra_values, intra), (rep.inter_values, inter)):
            track("pair_values", np.abs(np.sort(got) - np.sort(want)).max(), 0)
        p = torch.tensor(rows(seed + 100, n, 4), dtype=D)
        t = torch.tensor(rows(seed + 200, n, 4), dtype=D)
        track("scl", supervised_contrastive_loss(p, labels, 0.1), oracles.scl(p.numpy(), labels, 0.1))
        track("distill", relation_distillation_loss(p, t, Temperatures(0.07, 0.1)),
              oracles.distill(p.numpy(), t.numpy(), 0.07, 0.1))
        r, c = rng.integers(1, 7, size=2)
        cost = rng.standard_normal((r, c))
        track("hungarian", sum(cost[i, j] for i, j in solve_assignment(cost)), oracles.min_assignment(cost))
        tp = (rng.uniform(size=int(rng.integers(1, 15))) < 0.5).astype(float)
        n_gt = max(1, int(tp.sum()) + int(rng.integers(0, 3)))
        track("ap_curve", interpolated_ap(tp, n_gt), oracles.interpolated_ap(tp, n_gt))

    g1, g2 = BoxSpec(0.25, 0.25, 0.2, 0.2), BoxSpec(0.75, 0.75, 0.2, 0.2)
    dets = [Detection(BoxSpec(0.25, 0.25, 0.2, 0.19), 0.9, 0),
            Detection(BoxSpec(0.5, 0.1, 0.1, 0.1), 0.8, 0),
            Detection(BoxSpec(0.75, 0.75, 0.19, 0.2), 0.7, 0)]
    hand = (51 * 1.0 + 50 * (2 / 3)) / 101
    ap_hand = abs(evaluate_ap([dets], [[(g1, 0), (g2, 0)]]).mAP - hand)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and ap_hand <= 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    announce(capsys, 2, ok, f"max abs error: {detail}; AP hand fixture {ap_hand:.1e}; {elapsed:.1f}s")
    assert ok


# 3. distillation optimum

def test_criterion_3_distillation_optimum(capsys):
    gaps, rises = [], []
    for seed in range(10):
        t = torch.tensor(rows(seed, 6, 5), dtype=D)
        tau = 0.07
        at_opt = float(relation_distillation_loss(t.clone(), t, Temperatures(tau, tau)))
        gaps.append(abs(at_opt - oracles.teacher_entropy(t.numpy(), tau)))
        rng = np.random.default_rng(seed + 50)
        for row in range(6):
            p = t.clone()
            p[row] += torch.tensor(rng.standard_normal(5) * 0.05, dtype=D)
            rises.append(float(relation_distillation_loss(p, t, Temperatures(tau, tau))) - at_opt)
    ok = max(gaps) <= 1e-9 and min(rises) > 0
    announce(capsys, 3, ok, f"|loss - teacher entropy| max {max(gaps):.1e}; smallest perturbation rise "
                            f"{min(rises):.2e} over {len(rises)} perturbations")
    assert ok


# 4. gates

@torch.no_grad()
def test_criterion_4_gates(capsys):
    torch.manual_seed(0)
    q, k = torch.randn(6, 8, dtype=D) * 5, torch.randn(4, 8, dtype=D) * 5
    gate = torch.tensor([0.0, GATE_SENTINEL, 0.0, GATE_SENTINEL], dtype=D)
    gated_mass = float(attention_weights(q, k, gate)[:, [1, 3]].sum(-1).max())

    x, p = torch.randn(2, 5, 8, dtype=D), torch.randn(2, 3, 8, dtype=D)
    torch.manual_seed(1)
    sel = FusionLayer(8, "selective").double()
    torch.manual_seed(1)
    full = FusionLayer(8, "full").double()
    sel.aux_bias.fill_(50.0)
    (xs, ps), (xf, pf) = sel(x, p), full(x, p)
    open_gap = max(float((xs - xf).abs().max()), float((ps - pf).abs().max()))

    sel.aux_bias.fill_(0.0)
    x = torch.rand(1, 6, 8, dtype=D) + 0.5
    p = torch.rand(1, 3, 8, dtype=D) + 0.5
    p[0, 2] = -3.0
    xo, po = sel(x, p)
    closed = float(sel.last_scores[0, :, 2].max()) < sel.threshold
    p2 = p.clone()
    p2[0, 2] += torch.randn(8, dtype=D) * 0.5
    xo2, po2 = sel(x, p2)
    leak = max(float((xo - xo2).abs().max()), float((po[0, :2] - po2[0, :2]).abs().max()))
    ok = gated_mass <= 1e-12 and open_gap <= 1e-6 and closed and leak <= 1e-9
    announce(capsys, 4, ok, f"gated mass {gated_mass:.1e}; open-gate vs full {open_gap:.1e}; "
                            f"gated-prompt perturbation leak {leak:.1e}")
    assert ok


# 5. global integration

def test_criterion_5_global_integration(capsys):
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.standard_normal((7, 4)), dtype=D)
    labels = ["a", "b", "a", "c", "a", "b", "c"]
    bank = integrate_prompt_rows(x, labels)
    mean_err = 0.0
    for lbl, proto in zip(bank.labels, bank.prototypes):
        idx = [i for i, l in enumerate(labels) if l == lbl]
        exact = [sum(float(x[i, d]) for i in idx) / len(idx) for d in range(4)]
        mean_err = max(mean_err, float(np.abs(proto.numpy() - exact).max()))

    # scene 0 holds prompt rows 0-1, scene 1 rows 2-3; both have category "dog"
    prompts = torch.tensor(rng.standard_normal((4, 4)), dtype=D)
    scene_labels = ["dog", "cat", "dog", "cow"]
    feature = torch.tensor(rng.standard_normal(4), dtype=D)

    def scene0_score(rows_):
        b = integrate_prompt_rows(rows_, scene_labels)
        return float(b.prototypes[b.labels.index("dog")] @ feature)

    bumped = prompts.clone()
    bumped[2] += 0.1  # scene 1's dog prompt
    shift_global = abs(scene0_score(bumped) - scene0_score(prompts))
    local = lambda r: float(integrate_prompt_rows(r[:2], scene_labels[:2]).prototypes[0] @ feature)
    shift_local = abs(local(bumped) - local(prompts))
    ok = mean_err <= 1e-12 and shift_global > 1e-6 and shift_local == 0.0
    announce(capsys, 5, ok, f"prototype vs exact mean {mean_err:.1e}; scene-0 score shift from a scene-1 "
                            f"prompt: global {shift_global:.2e}, current-image {shift_local:.1e}")
    assert ok


# 6 and 8. ablation ladder on the default corpus

@pytest.fixture(scope="module")
def ladder(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_ladder")
    start = time.perf_counter()
    report = run_ablation_ladder(ExperimentConfig(), n_seeds=5, variants=CUMULATIVE, include_scl=True,
                                 out_dir=out)
    return report, time.perf_counter() - start


def test_criterion_6_ablation_trend(ladder, capsys):
    report, elapsed = ladder
    iisr_means = [report.mean(v, "iisr") for v in CUMULATIVE]
    map_means = [report.mean(v, "map_g") for v in CUMULATIVE]
    scl_map = report.mean("scl", "map_g")
    rising = lambda v: all(b > a for a, b in zip(v, v[1:]))
    ok = rising(iisr_means) and rising(map_means) and map_means[-1] > scl_map and elapsed < 1800
    announce(capsys, 6, ok,
             "IISR " + " < ".join(f"{v:.3f}" for v in iisr_means) + "; mAP "
             + " < ".join(f"{v:.3f}" for v in map_means)
             + f"; +distill {map_means[-1]:.3f} vs SCL {scl_map:.3f}; {elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_visual_i_vs_g(ladder, capsys):
    report, _ = ladder
    vi, vg = report.mean("+distill", "map_i"), report.mean("+distill", "map_g")
    ok = vi >= vg
    announce(capsys, 8, ok, f"+distill model, 5-seed mean: Visual-I {vi:.4f} vs Visual-G {vg:.4f}")
    assert ok


# 7. fusion robustness across prompt counts

SWEEP_EPOCHS = 3
FULL_FUSION = dict(align=True, global_integration=True, distill=True, encoder="full", decoder="full")
SELECTIVE_FUSION = dict(align=True, global_integration=True, distill=True, encoder="selective",
                        decoder="selective")


def test_criterion_7_fusion_robustness(tmp_path, capsys):
    start = time.perf_counter()
    base = ExperimentConfig().replace(run__epochs=SWEEP_EPOCHS)
    ckpts = {mode: [run_training(variant_config(base, flags, seed=s), tmp_path / mode).checkpoint
                    for s in range(5)]
             for mode, flags in (("full", FULL_FUSION), ("selective", SELECTIVE_FUSION))}
    sweep = run_prompt_count_sweep(ckpts, out_dir=tmp_path)
    elapsed = time.perf_counter() - start
    k = max(sweep.counts)
    sf, ss = sweep.spread("full"), sweep.spread("selective")
    full1, fullk = sweep.mean_map("full", 1), sweep.mean_map("full", k)
    sel1, selk = sweep.mean_map("selective", 1), sweep.mean_map("selective", k)
    ok = sf >= 2 * ss and full1 < fullk and sel1 >= 0.9 * selk and elapsed < 900
    announce(capsys, 7, ok, f"spread full {sf:.4f} vs selective {ss:.4f}; full mAP(1) {full1:.3f} vs "
                            f"mAP({k}) {fullk:.3f}; selective mAP(1) {sel1:.3f} vs mAP({k}) {selk:.3f}; "
                            f"{elapsed / 60:.1f} min")
    assert ok


# 9. determinism of ladder CSVs

def test_criterion_9_determinism(tmp_path, capsys):
    small = load_config(None, ["corpus.train_scenes=40", "corpus.support_scenes=30", "corpus.test_scenes=10",
                               "run.epochs=1", "run.steps_per_epoch=20"], env={})
    names = ["ladder.csv", "ladder_runs.csv", "iisr_vs_map.csv"]
    for tag in ("a", "b"):
        run_ablation_ladder(small, n_seeds=2, variants=["baseline", "+distill", "+decoder_selective"],
                            include_scl=True, out_dir=tmp_path / tag)
    same = [filecmp.cmp(tmp_path / "a" / n, tmp_path / "b" / n, shallow=False) for n in names]
    ok = all(same)
    announce(capsys, 9, ok, "bit-identical " + ", ".join(f"{n}={s}" for n, s in zip(names, same)))
    assert ok
