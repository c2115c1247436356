"""End-to-end acceptance checks.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion. Campaign-level checks run on the pretrained
fixtures and cache their campaigns in a workspace keyed by the package
sources, so a rerun with unchanged code only re-reads manifests.
"""

import copy
import re
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import yaml

from aptbench.attack import locality_radius_unit
from aptbench.cli import main
from aptbench.config import InversionConfig, LossWeights, RunConfig
from aptbench.data import Dataset
from aptbench.evaluate import accuracy_confidence, emitted_set, fid
from aptbench.experiments import campaign_for, run_ablation, run_d_sweep, run_robustify, with_seed
from aptbench.inversion import invert_batch
from aptbench.losses import apt_total, fooling_loss, locality_sample, loss_pt, loss_rec, pg_from_scores
from aptbench.models import classify, clone_weights

from conftest import SRC, cache_root, linked_workspace, micro_fixtures, source_digest
from test_evaluate import _random_psd, _stats, sampled_fid_case

SEEDS = (0, 1, 2)
BASE = RunConfig()
# 11 per class leaves at least 100 images after the target's misclassifications are dropped
ACC = replace(BASE, campaign=replace(BASE.campaign, per_class=11))
F64 = torch.float64

slow = pytest.mark.slow


@pytest.fixture(scope="module")
def acc_ws(trained_home):
    key = source_digest(*sorted(p.name for p in SRC.glob("*.py")))
    return linked_workspace(trained_home, cache_root() / f"acceptance-{key}")


def full_campaign(ws, seed):
    return campaign_for(ws, with_seed(ACC, seed), tag="full")


def majority(flags):
    return sum(flags) * 2 > len(flags)


# ---------------------------------------------------------------------------
# 1-3: numerical invariants on micro models


def _apt_problem(seed=0):
    fx = micro_fixtures(seed)
    G = fx.G
    g = torch.Generator().manual_seed(seed)
    c = torch.tensor([1])
    with torch.no_grad():
        w_p = G.map_latent(G.sample_z(1, g), c)
        w_z = G.map_latent(G.sample_z(1, g), c)
    x = torch.rand(1, 1, 4, 4, generator=g, dtype=F64) * 2 - 1
    noise = G.make_noise(1, g)
    theta = {k: v.detach() for k, v in G.synthesis.params().items()}
    theta_hat = {k: v + 0.05 * torch.randn(v.shape, generator=g, dtype=F64) for k, v in theta.items()}
    W = LossWeights()
    c_any = torch.tensor([2])

    def objective(th):
        L_rec, parts = loss_rec(x, w_p, noise, G.synthesize, theta, th, w_z, 0.5, W, fx.pnet.features)
        xs = parts["x_p_star"]
        L_CE = fooling_loss(classify(fx.classifiers["target"], xs), c_any)
        total, _ = apt_total(L_rec, parts, L_CE, pg_from_scores(fx.D(xs)), W)
        return total.sum()

    return G, theta_hat, objective


@pytest.mark.criterion(1, "gradient fidelity of L_APT on the micro generator")
def test_c01_gradient_matches_finite_differences(record_property):
    start = time.perf_counter()
    G, theta_hat, objective = _apt_problem()
    assert sum(v.numel() for v in theta_hat.values()) == sum(p.numel() for p in G.synthesis.parameters())
    leaves = {k: v.clone().requires_grad_(True) for k, v in theta_hat.items()}
    grads = dict(zip(leaves, torch.autograd.grad(objective(leaves), list(leaves.values()))))
    h = 1e-3
    worst = 0.0
    with torch.no_grad():
        for name, base in theta_hat.items():
            fd = torch.zeros_like(base)
            for idx in np.ndindex(*base.shape):
                th = clone_weights(theta_hat)
                th[name][idx] += h
                up = objective(th)
                th[name][idx] -= 2 * h
                fd[idx] = (up - objective(th)) / (2 * h)
            err = float((grads[name] - fd).norm() / fd.norm().clamp_min(1e-12))
            worst = max(worst, err)
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(theta_hat)} tensors, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 60


def _np_perceptual(fa, fb):
    total = 0.0
    for a, b in zip(fa, fb):
        a, b = a[0].numpy(), b[0].numpy()
        if a.ndim == 1:
            a, b = a[:, None, None], b[:, None, None]
        ua = a / np.sqrt((a**2).sum(axis=0, keepdims=True) + 1e-10)
        ub = b / np.sqrt((b**2).sum(axis=0, keepdims=True) + 1e-10)
        total += ((ua - ub) ** 2).sum(axis=0).mean()
    return total


@pytest.mark.criterion(2, "loss recomposition over 100 random inputs")
def test_c02_composite_losses_recompose(record_property):
    worst = 0.0
    for k in range(100):
        fx = micro_fixtures(k % 5)
        G, feats = fx.G, fx.pnet.features
        g = torch.Generator().manual_seed(1000 + k)
        rng = np.random.default_rng(k)
        lam = rng.uniform(0.01, 2.0, size=5)
        W = LossWeights(lambda_l2_p=lam[0], lambda_l2_r=lam[1], lambda_ce=lam[2], lambda_pg=lam[3], lambda_rec=lam[4])
        alpha = float(rng.uniform(0.1, 3.0))
        x = torch.rand(1, 1, 4, 4, generator=g, dtype=F64) * 2 - 1
        w_p = torch.randn(1, G.cfg.num_layers, G.cfg.style_dim, generator=g, dtype=F64)
        w_z = torch.randn(1, G.cfg.num_layers, G.cfg.style_dim, generator=g, dtype=F64)
        noise = G.make_noise(1, g)
        theta = G.synthesis.params()
        theta_hat = {n: v + 0.1 * torch.randn(v.shape, generator=g, dtype=F64) for n, v in theta.items()}
        c_any = torch.tensor([int(rng.integers(3))])
        with torch.no_grad():
            L_rec, parts = loss_rec(x, w_p, noise, G.synthesize, theta, theta_hat, w_z, alpha, W, feats)
            xs = parts["x_p_star"]
            probs = classify(fx.classifiers["target"], xs)
            scores = fx.D(xs)
            total, br = apt_total(L_rec, parts, fooling_loss(probs, c_any), pg_from_scores(scores), W)
            # independent recomputation of every term
            diff = (w_z - w_p).numpy()
            w_r = torch.from_numpy(w_p.numpy() + alpha * diff / np.sqrt((diff**2).sum()))
            x_p = G.synthesize(w_p, noise, theta_hat)
            x_rs = G.synthesize(w_r, noise, theta_hat)
            x_r = G.synthesize(w_r, noise, theta)
            l2_p = float(((x - x_p).numpy() ** 2).mean())
            l2_r = float(((x_r - x_rs).numpy() ** 2).mean())
            pt = _np_perceptual(feats(x), feats(x_p)) + W.lambda_l2_p * l2_p
            r = _np_perceptual(feats(x_r), feats(x_rs)) + W.lambda_l2_r * l2_r
            ce = -np.log(probs[0, c_any[0]].item())
            pg = sum(np.log(1.0 - s.item()) for s in scores)
            want = {
                "l2": l2_p,
                "L_pt": pt,
                "L_R": r,
                "L_rec": pt + r,
                "L_CE": ce,
                "L_PG": pg,
                "total": W.lambda_rec * (pt + r) + W.lambda_ce * ce + W.lambda_pg * pg,
            }
        got = br.record(0)
        worst = max(worst, max(abs(got[n] - v) for n, v in want.items()))
    record_property("detail", f"max abs deviation {worst:.1e}")
    assert worst <= 1e-12


@slow
@pytest.mark.criterion(3, "locality radius over 1000 draws")
def test_c03_locality_radius(trained_home, record_property):
    G = copy.deepcopy(trained_home.fixtures([]).G).double()
    alpha = ACC.attack.alpha_rel * locality_radius_unit(G)
    g = torch.Generator().manual_seed(3)
    devs = []
    for _ in range(10):
        c = torch.randint(0, G.cfg.num_classes, (100,), generator=g)
        with torch.no_grad():
            w_p = G.map_latent(G.sample_z(100, g), c) + 0.1 * torch.randn(100, G.cfg.num_layers, G.cfg.style_dim, generator=g, dtype=F64)
            w_r = locality_sample(w_p, G.sample_z(100, g), c, alpha, G.map_latent, g)
        devs.append(((w_r - w_p).flatten(1).norm(dim=1) - alpha).abs())
    worst = float(torch.cat(devs).max())
    record_property("detail", f"alpha {alpha:.4f}, max |norm - alpha| {worst:.1e}")
    assert worst <= 1e-6


# ---------------------------------------------------------------------------
# 4-6: a 100-image campaign on the pretrained fixtures


@slow
@pytest.mark.criterion(4, "every emitted image is within the distance bound")
def test_c04_emission_bound(acc_ws, record_property):
    c = full_campaign(acc_ws, 0)
    assert len(c.records) >= 100
    pnet = copy.deepcopy(acc_ws.fixtures([]).pnet).double()
    data = acc_ws.dataset(ACC)
    worst, drift, n = 0.0, 0.0, 0
    for r in c.emitted:
        img = torch.from_numpy(np.load(c.directory / "images" / f"{r.image_id}.npy")).double()[None]
        src = torch.from_numpy(data.by_ids([r.image_id]).images).double()
        with torch.no_grad():
            lpt = float(loss_pt(src, img, ACC.attack.weights, pnet.features)[0])
        worst = max(worst, lpt)
        drift = max(drift, abs(lpt - r.L_pt_at_emission))
        n += lpt <= ACC.attack.d
    record_property("detail", f"{n}/{len(c.emitted)} within d={ACC.attack.d} of {len(c.records)} attacked; max L_pt {worst:.4f}")
    assert n == len(c.emitted)
    assert drift < 1e-4


@slow
@pytest.mark.criterion(5, "inversion quality")
def test_c05_inversion_quality(trained_home, record_property):
    start = time.perf_counter()
    fx = trained_home.fixtures([])
    G, inv = fx.G, InversionConfig()
    g = torch.Generator().manual_seed(5)
    c = torch.arange(32) % G.cfg.num_classes
    with torch.no_grad():
        x = G.synthesize(G.map_latent(G.sample_z(32, g), c), G.make_noise(32, g))
    gan = invert_batch(x, c, G, fx.pnet, inv, image_ids=range(32))
    real = Dataset(ACC.data.dataset_id, trained_home.data_root).split("test")
    xr, yr = real.tensors()
    pivots = invert_batch(xr[:32], yr[:32], G, fx.pnet, inv, image_ids=real.ids[:32])
    elapsed = time.perf_counter() - start
    gan_worst = max(p.final_loss for p in gan)
    ratio = max(p.trace[-1][0] / p.trace[0][0] for p in pivots)
    record_property("detail", f"GAN samples max final loss {gan_worst:.2e}; real images max ratio {ratio:.3f}; {elapsed:.0f}s")
    assert gan_worst <= 1e-2
    assert ratio <= 0.5
    assert elapsed < 600


@slow
@pytest.mark.criterion(6, "attack lowers target accuracy and confidence")
def test_c06_attack_effectiveness(acc_ws, record_property):
    c = full_campaign(acc_ws, 0)
    assert len(c.records) >= 100
    data = acc_ws.dataset(ACC)
    clean = data.by_ids([r.image_id for r in c.records])
    x, y = clean.tensors()
    # an attack that emitted nothing leaves its input unchanged
    adv = x.clone()
    for k, r in enumerate(c.records):
        if r.emitted:
            adv[k] = torch.from_numpy(r.image)
    target = acc_ws.fixtures([ACC.attack.target]).handle(ACC.attack.target)
    acc0, conf0 = accuracy_confidence(target, x, y)
    acc1, conf1 = accuracy_confidence(target, adv, y)
    budget = max(r.iterations_used for r in c.records)
    record_property("detail", f"acc {acc0:.3f} -> {acc1:.3f}, conf {conf0:.3f} -> {conf1:.3f}, n={len(y)}, max iters {budget}")
    assert acc0 - acc1 >= 0.15
    assert conf1 < conf0
    assert budget <= 1000


# ---------------------------------------------------------------------------
# 7-8, 10-11: three-seed comparisons


@slow
@pytest.mark.criterion(7, "ablation ordering, majority of 3 seeds")
def test_c07_ablation_ordering(acc_ws, record_property):
    checks = {"fooling full > no_ce": [], "realness full > no_pg": [], "preservation full > latent": []}
    for s in SEEDS:
        rep, _ = run_ablation(acc_ws, with_seed(ACC, s), variants=("full", "no_ce", "no_pg", "latent"))
        assert len(rep["image_ids"]) >= 100
        v = rep["variants"]
        checks["fooling full > no_ce"].append(v["full"]["fooling_rate"] > v["no_ce"]["fooling_rate"])
        checks["realness full > no_pg"].append(v["full"]["mean_realness"] > v["no_pg"]["mean_realness"])
        checks["preservation full > latent"].append(v["full"]["class_preservation"] > v["latent"]["class_preservation"])
    record_property("detail", "; ".join(f"{k}: {sum(f)}/3" for k, f in checks.items()))
    assert all(majority(f) for f in checks.values())


@slow
@pytest.mark.criterion(8, "d-sweep monotone on 3-seed averages")
def test_c08_d_sweep_monotone(acc_ws, record_property):
    fooling, preserved = {}, {}
    for s in SEEDS:
        rep, _ = run_d_sweep(acc_ws, with_seed(ACC, s))
        for k, v in rep["d"].items():
            assert v["bound_violations"] == 0
            fooling.setdefault(float(k), []).append(v["fooling_rate"])
            preserved.setdefault(float(k), []).append(v["class_preservation"])
    ds = sorted(fooling)
    f = [float(np.mean(fooling[d])) for d in ds]
    p = [float(np.mean(preserved[d])) for d in ds]
    record_property("detail", f"d {ds}: fooling {[round(v, 4) for v in f]}, preservation {[round(v, 4) for v in p]}")
    assert all(b >= a for a, b in zip(f, f[1:]))
    assert all(b <= a for a, b in zip(p, p[1:]))


@slow
@pytest.mark.criterion(10, "attacked classifier is the least accurate on its own attack set")
def test_c10_transfer(acc_ws, record_property):
    others = [cid for cid in dict.fromkeys([*ACC.campaign.transfer, ACC.campaign.oracle]) if cid != ACC.attack.target]
    zoo = acc_ws.fixtures([ACC.attack.target, *others]).classifiers
    wins, notes = [], []
    for s in SEEDS:
        x, y = emitted_set(full_campaign(acc_ws, s).records)
        acc = {cid: accuracy_confidence(zoo[cid], x, y)[0] for cid in [ACC.attack.target, *others]}
        wins.append(all(acc[ACC.attack.target] <= acc[o] for o in others))
        notes.append("s%d " % s + " ".join(f"{k}={v:.3f}" for k, v in acc.items()))
    record_property("detail", "; ".join(notes))
    assert majority(wins)


@slow
@pytest.mark.criterion(11, "fine-tuning on attacked images does not hurt")
def test_c11_robustify(acc_ws, record_property):
    gains, clean = [], []
    for s in SEEDS:
        rep, _ = run_robustify(acc_ws, with_seed(ACC, s))
        gains.append(rep["delta"]["acc"])
        clean.append(rep["delta"]["clean_acc"])
    med = statistics.median(gains)
    record_property("detail", f"attack-set acc gains {[round(g, 4) for g in gains]} (median {med:.4f}); clean deltas {[round(c, 4) for c in clean]}")
    assert med >= 0
    assert min(clean) >= -0.05


# ---------------------------------------------------------------------------
# 9: FID oracles


@pytest.mark.criterion(9, "FID oracles")
def test_c09_fid_oracles(record_property):
    rng = np.random.default_rng(9)
    s = _stats(rng.normal(size=6), _random_psd(rng, 6))
    self_fid = abs(fid(s, s))
    shift = fid(_stats([0, 0], np.eye(2)), _stats([1, 0], np.eye(2)))
    scale = fid(_stats([0, 0], np.eye(2)), _stats([0, 0], 4 * np.eye(2)))
    asym = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 8))
        a = _stats(rng.normal(size=n), _random_psd(rng, n))
        b = _stats(rng.normal(size=n), _random_psd(rng, n))
        asym = max(asym, abs(fid(a, b) - fid(b, a)))
    analytic, est = sampled_fid_case(0)
    rel = abs(est - analytic) / analytic
    record_property("detail", f"self {self_fid:.1e}, shift {shift}, scale {scale}, sampled rel err {rel:.3f}, asymmetry {asym:.1e}")
    assert self_fid < 1e-6
    assert shift == pytest.approx(1.0, abs=1e-12) and scale == pytest.approx(2.0, abs=1e-12)
    assert rel < 0.05
    assert asym < 1e-6


# ---------------------------------------------------------------------------
# 12: reproducibility through the command line

SMALL = {
    "campaign": {"per_class": 1},
    "attack": {"max_iters": 60},
    "inversion": {"iterations": 150, "warmup_iters": 10, "cosine_tail_iters": 40, "class_mean_samples": 128},
}


def _pipeline(home, config, monkeypatch, capsys):
    monkeypatch.setenv("APTBENCH_HOME", str(home))
    assert main(["attack", "--config", str(config), "--seed", "4"]) == 0
    cid = re.search(r"attack: (\S+)", capsys.readouterr().out).group(1)
    assert main(["eval", cid, "--config", str(config), "--seed", "4"]) == 0
    assert main(["report", cid, "--config", str(config), "--seed", "4"]) == 0
    capsys.readouterr()
    files = sorted(p for sub in ("runs", "reports") for p in (home / sub).rglob("*") if p.is_file())
    return {str(p.relative_to(home)): p.read_bytes() for p in files}


@slow
@pytest.mark.criterion(12, "byte-identical reruns")
def test_c12_reproducible_outputs(trained_home, tmp_path, monkeypatch, capsys, record_property):
    config = tmp_path / "small.yaml"
    config.write_text(yaml.safe_dump(SMALL))
    a = _pipeline(linked_workspace(trained_home, tmp_path / "a").home, config, monkeypatch, capsys)
    b = _pipeline(linked_workspace(trained_home, tmp_path / "b").home, config, monkeypatch, capsys)
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    record_property("detail", f"{len(a)} files compared, {len(differ)} differ")
    assert any(k.endswith("manifest.jsonl") for k in a)
    assert any(k.startswith("reports/") for k in a)
    assert not differ, differ[:5]
