"""End-to-end acceptance suite: one test and one printed PASS/FAIL line per criterion.

Criterion 7 trains the full default-config ablation (5 arms x 5 seeds) and
takes over an hour on a single core.
"""

import itertools
import json
import math
import os
import sys
import time

import numpy as np
import pytest

import oracles
from drpc import cli, config
from drpc import consistency as C
from drpc import metrics as M
from drpc import pyramid as P
from drpc import sceneforge as sf
from drpc import stylizer as st
from drpc import tensor as T
from drpc import trainer as tr

RESULTS = {}


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    RESULTS[number] = line
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# 1. gradients -----------------------------------------------------------------------


def _check(build, arrays, rng):
    """Max violation of |analytic - numeric| <= 1e-4 (1 + |numeric|) for <build(...), w>."""
    params = [T.parameter(a) for a in arrays]
    out = build(*params)
    w = rng.normal(size=out.shape)
    (out * T.Tensor(w)).sum().backward() if out.size > 1 else (out * float(w)).backward()
    numeric = oracles.numeric_grad(lambda: float((build(*[T.Tensor(p.data) for p in params]).data * w).sum()),
                                   [p.data for p in params], 1e-5)
    worst = -np.inf
    for p, n in zip(params, numeric):
        worst = max(worst, float((np.abs(p.grad - n) - 1e-4 * (1 + np.abs(n))).max()))
    return worst


def _gradient_cases(seed):
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(8, 12)), int(rng.integers(8, 12))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(n, c, h, w))
    kernel = rng.normal(size=(int(rng.integers(1, 4)), c, k, k))
    bias = rng.normal(size=kernel.shape[0])
    yield "conv2d", lambda a, b, d: T.conv2d(a, b, d, stride, k // 2), [x, kernel, bias]

    mode = ("nearest", "bilinear", "area")[seed % 3]
    oh, ow = int(rng.integers(2, 12)), int(rng.integers(2, 12))
    yield "resize2d", lambda a: T.resize2d(a, oh, ow, mode), [x.copy()]

    r = rng.normal(size=(c, h, w))
    r[np.abs(r) < 1e-3] = 0.5
    yield "relu", T.relu, [r]

    m = rng.normal(size=(c, h, w))
    yield "spp", lambda a: P.spp(a).values, [m]
    crop = P.CropSpec(int(rng.integers(0, h - 7)), int(rng.integers(0, w - 7)), 8, 8, 8 / h)
    yield "spp_region", lambda a: P.spp_region(a, crop).values, [m.copy()]

    logits = rng.normal(size=(n, 6, 5, 5))
    labels = rng.integers(0, 6, size=(n, 5, 5))
    yield "seg_loss", lambda a: C.seg_loss(a, labels), [logits]

    stack = rng.normal(size=(int(rng.integers(2, 5)), c, 85))
    target = stack.mean(axis=0)  # detached, so held fixed under perturbation
    yield "pcd_loss", lambda a: C.pcd_from_stack(a, target), [stack]

    full = rng.normal(size=(c, 85))
    yield "pci_loss", lambda a: C.pci_loss(P.PyramidVector(T.Tensor(full), ()), P.PyramidVector(a, ())), \
        [rng.normal(size=(c, 85))]

    cfg = C.LossConfig(beta=float(rng.uniform(0.1, 2)), pci_weight=float(rng.uniform(0, 2)))
    yield "total_loss", lambda a: C.total_loss(a[0], [a[i] for i in range(1, 6)], a[6], cfg), [rng.normal(size=7)]


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(10_000 + seed)
        for name, build, arrays in _gradient_cases(seed):
            worst[name] = max(worst.get(name, -np.inf), _check(build, arrays, rng))
    elapsed = time.perf_counter() - t0
    bad = sorted(k for k, v in worst.items() if v > 0)
    ok = not bad and elapsed < 120 and len(worst) == 9
    report(1, ok, f"{len(worst)} ops x 20 seeds, failing ops {bad or 'none'}, {elapsed:.1f}s (< 120s)")


# 2. pooling oracle ---------------------------------------------------------------------


def test_criterion_2_pooling_oracle():
    err, mean_err, area_err = 0.0, 0.0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(20_000 + seed)
        c = int(rng.integers(1, 9))
        h, w = int(rng.integers(8, 34)), int(rng.integers(8, 34))
        m = rng.normal(size=(c, h, w))
        v = P.spp(m).values.data
        err = max(err, np.abs(v - oracles.spp(m)).max())
        ch, cw = int(rng.integers(8, h + 1)), int(rng.integers(8, w + 1))
        top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        region = P.spp_region(m, P.CropSpec(top, left, ch, cw, ch / h)).values.data
        err = max(err, np.abs(region - oracles.spp(m[:, top:top + ch, left:left + cw])).max())
        mean_err = max(mean_err, np.abs(v[:, 0] - m.mean(axis=(1, 2))).max())
        offset = 1
        for s in (2, 4, 8):
            rows, cols = P.bin_edges(h, s), P.bin_edges(w, s)
            area = np.outer(np.diff(rows), np.diff(cols)).reshape(-1) / (h * w)
            bins = v[:, offset:offset + s * s]
            area_err = max(area_err, np.abs(bins @ area - m.mean(axis=(1, 2))).max())
            offset += s * s
    ok = err <= 1e-12 and mean_err <= 1e-12 and area_err <= 1e-9
    report(2, ok, f"100 maps, brute-force max err {err:.1e}, column-0 err {mean_err:.1e}, "
                  f"area-weighted err {area_err:.1e}")


# 3. PCD identities --------------------------------------------------------------------


def _pyr(a):
    return P.PyramidVector(T.Tensor(a), ())


def test_criterion_3_pcd_identities():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(4, 85))
    zero = C.pcd_loss([_pyr(p)] * 6).item()
    pair = 0.0
    for _ in range(100):
        a, b = rng.normal(size=(3, 85)), rng.normal(size=(3, 85))
        pair = max(pair, abs(C.pcd_loss([_pyr(a), _pyr(b)]).item() - np.abs(a - b).mean()))
    perm = 0.0
    for members in (2, 3, 4):
        ps = [rng.normal(size=(2, 85)) for _ in range(members)]
        ref = C.pcd_loss([_pyr(x) for x in ps]).item()
        for order in itertools.permutations(range(members)):
            perm = max(perm, abs(C.pcd_loss([_pyr(ps[i]) for i in order]).item() - ref))
    ok = zero == 0.0 and pair <= 1e-12 and perm <= 1e-12
    report(3, ok, f"identical -> {zero}, two-domain err {pair:.1e}, permutation spread {perm:.1e}")


# 4. PCI exactness ---------------------------------------------------------------------


def test_criterion_4_pci_exactness():
    rng = np.random.default_rng(4)
    image = rng.uniform(size=(1, 3, 64, 64))

    def net(x):
        return T.resize2d(T.Tensor(x), x.shape[2] // 2, x.shape[3] // 2, "area")

    worst = 0.0
    for _ in range(20):
        # integer rescale factor 64 / size keeps every pooling bin on whole pixels
        size = int(rng.choice([16, 32]))
        top, left = (int(rng.integers(0, (64 - size) // 8 + 1)) * 8 for _ in range(2))
        patch = image[:, :, top:top + size, left:left + size]
        rescaled = T.resize2d(T.Tensor(patch), 64, 64, "nearest").data
        region = P.spp_region(net(image)[0], P.feature_crop(P.CropSpec(top, left, size, size, size / 64), 64, 32))
        worst = max(worst, C.pci_loss(region, P.spp(net(rescaled)[0])).item())
    whole = net(image)[0]
    at_one = C.pci_loss(P.spp_region(whole, P.full_crop(32, 32)), P.spp(whole)).item()
    ok = worst <= 1e-9 and at_one == 0.0
    report(4, ok, f"aligned crops max PCI {worst:.1e}, rho=1 PCI {at_one}")


# 5. metric arithmetic -----------------------------------------------------------------


def test_criterion_5_metric_arithmetic():
    g = M.g_perf({"Cityscapes": 36.11, "Mapillary": 31.56, "BDDS": 32.25})
    cm = M.accumulate(M.ConfusionMatrix(2), np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]))
    _, value = M.miou(cm)
    ok = abs(g - 33.31) <= 0.005 and abs(value - 7 / 12) <= 1e-12
    report(5, ok, f"g_perf = {g:.4f} (33.31 +- 0.005), 2x2 mIoU = {value!r} (7/12)")


# 6. objective degeneracy --------------------------------------------------------------


def test_criterion_6_degeneracy():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        logits = rng.normal(size=(int(rng.integers(1, 4)), 6, 7, 7))
        labels = rng.integers(0, 6, size=(logits.shape[0], 7, 7))
        cfg = C.LossConfig(beta=0.0)
        total = C.total_loss(C.seg_loss(T.Tensor(logits), labels), [None] * 5, None, cfg).item()
        worst = max(worst, abs(total - oracles.cross_entropy(logits, labels)))
    uniform = C.seg_loss(T.Tensor(np.zeros((2, 6, 4, 4))), np.zeros((2, 4, 4), int)).item()
    ok = worst <= 1e-12 and abs(uniform - math.log(6)) <= 1e-9
    report(6, ok, f"K=0, beta=0 vs CE max err {worst:.1e}; uniform CE {uniform:.12f} vs ln 6")


# 7. desk-scale ablation ---------------------------------------------------------------


def _ablation_dir():
    return os.environ.get("DRPC_ACCEPTANCE_OUT", os.path.join(os.path.dirname(__file__), "..", "runs", "acceptance"))


def test_criterion_7_desk_scale_ablation():
    cfg = config.load(env={})
    workers = min(8, os.cpu_count() or 1)
    s = cfg.values["scene"]
    ds = sf.build_dataset(cfg.scene_spec(), cfg.registry(), s["n_train"], s["n_val"], s["n_test"])
    t0 = time.perf_counter()
    result = tr.ablate(cfg.train_config(), ds, cfg.registry(), seeds=cfg.get("eval", "seeds"), workers=workers)
    elapsed = time.perf_counter() - t0
    result.write(_ablation_dir())
    print(result.format(), file=sys.__stdout__, flush=True)

    rows = {r["arm"]: r["perDomain"] for r in result.rows}
    fcn, dr, full = rows["FCN"], rows["+DR"], rows["All"]
    # wall time on 8 cores: measured directly when 8 workers ran, otherwise the
    # longest-first schedule of the measured per-job CPU times on 8 workers
    makespan = elapsed if workers >= 8 else tr.projected_makespan([r["cpu"] for r in result.runs], 8)
    checks = []
    for d in result.domains:
        checks.append(full[d] >= dr[d] >= fcn[d])
        checks.append(dr[d] - fcn[d] >= 0.01)
        checks.append(full[d] - dr[d] >= 0)
    ok = all(checks) and makespan <= 45 * 60
    detail = "; ".join(f"{d}: FCN {fcn[d]:.4f} DR {dr[d]:.4f} All {full[d]:.4f}" for d in result.domains)
    with open(os.path.join(_ablation_dir(), "timing.json"), "w", encoding="utf-8") as fh:
        json.dump({"elapsed": elapsed, "workers": workers, "makespan8": makespan}, fh, indent=2)
    report(7, ok, f"{detail}; 8-core makespan {makespan / 60:.1f} min (<= 45)")


# 8. determinism -----------------------------------------------------------------------

TINY = """\
[scene]
n_train = 4
n_val = 2
n_test = 2
[registry]
k = 3
[network]
channels_base = 4
[trainer]
steps = 4
batch_images = 8
eval_every = 2
"""


def test_criterion_8_determinism(tmp_path):
    conf = tmp_path / "tiny.ini"
    conf.write_text(TINY)
    codes = []
    for run in ("a", "b"):
        codes.append(cli.main(["gen-data", "--config", str(conf), "--out", str(tmp_path / run / "data")]))
        codes.append(cli.main(["train", "--config", str(conf), "--mode", "full", "--dataset", str(tmp_path / run / "data"),
                               "--out", str(tmp_path / run / "train")]))
        codes.append(cli.main(["eval", "--checkpoint", str(tmp_path / run / "train" / "checkpoints" / "final"),
                               "--dataset", str(tmp_path / run / "data"), "--out", str(tmp_path / run / "eval")]))
    compared = []
    for rel in ("data/manifest.tsv", "train/config.snapshot", "train/logs/losses.csv", "train/logs/val.csv",
                "train/reports/metrics.json", "train/reports/metrics.csv", "eval/metrics.json"):
        compared.append((tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes())
    params = sorted(os.listdir(tmp_path / "a" / "train" / "checkpoints" / "final"))
    for name in params:
        a = (tmp_path / "a" / "train" / "checkpoints" / "final" / name).read_bytes()
        compared.append(a == (tmp_path / "b" / "train" / "checkpoints" / "final" / name).read_bytes())
    ok = codes == [0] * 6 and all(compared)
    report(8, ok, f"{sum(compared)}/{len(compared)} logged artifacts bit-identical across reruns")


# 9. stylizer safety -------------------------------------------------------------------


def test_criterion_9_stylizer_safety():
    reg = st.default_registry()
    styles = reg.train + reg.test + reg.validation
    spec = sf.SceneSpec()
    rng = np.random.default_rng(9)
    violations, identity_ok = 0, True
    for i in range(200):
        image, label = sf.render_scene(spec, i) if i % 2 else (rng.uniform(size=(3, 64, 64)), rng.integers(0, 6, (64, 64)))
        before = label.copy()
        for s in styles:
            group = st.make_group(image, label, st.DomainRegistry([s]))
            out = group.images[1]
            if group.label.tobytes() != before.tobytes() or out.min() < 0 or out.max() > 1:
                violations += 1
        same = st.apply(st.IDENTITY, image)
        identity_ok &= same.tobytes() == image.tobytes()
    ok = violations == 0 and identity_ok
    report(9, ok, f"{len(styles)} stylizers x 200 images, {violations} violations, identity bit-exact {identity_ok}")
