"""End-to-end acceptance checks, one or more tests per criterion.

Each check prints a ``PASS``/``FAIL`` line; the lines are repeated in the
pytest terminal summary under "acceptance criteria".
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from bavt import cli, config, imgproc, metrics, phantom, sdt, train, vit
from conftest import ACCEPTANCE_LINES, CONFIGS
from oracles import exhaustive_sq_distance, naive_forward, pairwise_auc
from test_train import gradient_check, gradient_problem


def check(crit, label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {crit}: {label} [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------------ 1. EDT


def test_c1_edt_matches_exhaustive_search():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    masks = [np.array([[0, 1, 0]]), np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]]),
             (np.add.outer(np.arange(8), np.arange(8)) % 2)]
    while len(masks) < 203:
        h, w = rng.integers(1, 65, size=2)
        m = (rng.random((h, w)) < rng.uniform(0.01, 0.95)).astype(np.uint8)
        if 0 < m.sum() < m.size:
            masks.append(m)
    mismatches = 0
    for m in masks:
        phi = sdt.signed_distance_map(m)
        fg = m.astype(bool)
        # recover integer squared distances from the signed map
        sq = np.rint(phi * phi).astype(np.int64)
        exact = np.where(fg, exhaustive_sq_distance(m, 0), exhaustive_sq_distance(m, 1))
        fast = np.where(fg, sdt.edt_squared(~fg), sdt.edt_squared(fg))
        if not (np.array_equal(fast, exact) and np.array_equal(sq, exact)
                and np.all(phi[fg] < 0) and np.all(phi[~fg] > 0)):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    check(1, "fast signed distance map equals exhaustive search", mismatches == 0 and elapsed < 30,
          f"{len(masks)} masks, {mismatches} mismatches, {elapsed:.1f}s < 30s")


# ------------------------------------------------------------- 2. gradients


def test_c2_gradients_match_central_differences():
    t0 = time.perf_counter()
    cfg, params, images, gts, sdms = gradient_problem(0)
    rng = np.random.default_rng(7)
    worst = 0.0
    where = ""
    for mode in sdt.BOUNDARY_MODES:
        for lam in (0.0, 0.01, 1.0):
            errs = gradient_check(params, cfg, images, gts, sdms,
                                  train.LossConfig(lam=lam, boundary_mode=mode), 200, rng)
            cls = max(errs, key=errs.get)
            if errs[cls] > worst:
                worst, where = errs[cls], f"{mode}, lambda={lam}, {cls}"
    elapsed = time.perf_counter() - t0
    check(2, "analytic gradients match central differences", worst <= 1e-4 and elapsed < 300,
          f"max rel err {worst:.2e} <= 1e-4 ({where}), {elapsed:.1f}s < 300s")


# --------------------------------------------------------- 3. forward oracle


def test_c3_forward_matches_naive_reference():
    cfg = vit.tiny_config()
    rng = np.random.default_rng(3)
    params = {k: v + rng.normal(0.0, 0.3, v.shape) for k, v in vit.init_params(cfg, 3).items()}
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(16, 16))
        worst = max(worst, float(np.abs(vit.forward(x, params, cfg) - np.array(naive_forward(x, params, cfg))).max()))
    check(3, "vectorized forward matches naive loops", worst <= 1e-10, f"20 inputs, max abs diff {worst:.1e} <= 1e-10")


# --------------------------------------------------------------- 4. overfit


@pytest.mark.slow
def test_c4_overfit_four_phantoms(tmp_path):
    t0 = time.perf_counter()
    exp = config.load(CONFIGS / "overfit.cfg")
    exp.train.checkpoint_dir = str(tmp_path)
    exp.train.deterministic = True
    pairs = [phantom.generate_phantom(replace(exp.phantom, seed=phantom.derive_seed(7, i))) for i in range(4)]
    result = train.fit(pairs, pairs, exp.vit, exp.train, exp.loss, exp.aug)
    preds = train.predict([im for im, _ in pairs], result.params, exp.vit, exp.aug)
    micro = metrics.micro_average(preds, [m for _, m in pairs])
    macro = metrics.macro_average([metrics.evaluate(p, m) for p, (_, m) in zip(preds, pairs)])
    elapsed = time.perf_counter() - t0
    ok = (micro.iou >= 0.95 and len(result.history) == exp.train.epochs <= 500 and elapsed < 900)
    check(4, "tiny model overfits 4 phantoms (lambda=0.01, signed)", ok,
          f"pooled train IoU {micro.iou:.4f} >= 0.95 (per-image mean {macro.iou:.4f}), "
          f"{len(result.history)} epochs, {elapsed:.0f}s < 900s")


# ----------------------------------------------------------------- 5. sizes


def test_c5_parameter_count():
    n = vit.count_params(vit.vit_base_config())
    check(5, "parameter count within 86M +/- 5%", abs(n - 86e6) <= 0.05 * 86e6,
          f"{n:,} total, {vit.count_params(vit.vit_base_config(), include_decoder=False):,} encoder")


def test_c5_flop_count():
    f = vit.count_flops(vit.vit_base_config())
    g = f["total"] / 1e9
    check(5, "forward cost within [110, 170] GFLOPs", 110 <= g <= 170,
          f"{g:.2f} GFLOPs at 2 FLOPs per multiply-accumulate ({f['macs'] / 1e9:.2f} GMACs)")


def test_c5_token_count():
    n = vit.patchify(np.zeros((512, 512)), 16).shape[0]
    check(5, "512px image with 16px patches gives 1024 tokens", n == 1024, f"{n} tokens")


def test_c5_split_sizes():
    tr, va, te = phantom.split_sizes(134, phantom.DEFAULT_SPLIT)
    check(5, "134 samples split 104/30", (tr, va + te) == (104, 30), f"train {tr}, val {va}, test {te}")


# --------------------------------------------------------------- 6. metrics


def ratio(num, den):
    return num / den if den else 1.0


def test_c6_metric_oracles():
    rng = np.random.default_rng(6)
    bad_closed = 0
    for _ in range(100):
        tp, fp, tn, fn = (int(v) for v in rng.integers(0, 1000, size=4))
        m = metrics.classification_metrics(metrics.ConfusionCounts(tp, fp, tn, fn))
        want = {"sensitivity": ratio(tp, tp + fn), "specificity": ratio(tn, tn + fp),
                "accuracy": ratio(tp + tn, tp + fp + tn + fn), "f1": ratio(2 * tp, 2 * tp + fp + fn),
                "iou": ratio(tp, tp + fp + fn)}
        bad_closed += any(m[k] != want[k] for k in want)
    worst_auc = 0.0
    identity_gap = 0.0
    for i in range(50):
        n = int(rng.integers(20, 400))
        gt = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(np.uint8)
        gt[:2] = (0, 1)
        pred = rng.random(n)
        if i % 2:
            pred = np.round(pred * 10) / 10
        worst_auc = max(worst_auc, abs(metrics.roc_auc(pred, gt) - pairwise_auc(pred, gt)))
        for thr in (0.2, 0.5, 0.8):
            r = metrics.evaluate(pred, gt, thr)
            identity_gap = max(identity_gap, abs(r.f1 - 2 * r.iou / (1 + r.iou)))
    check(6, "closed forms on 100 confusion tuples", bad_closed == 0, f"{bad_closed} mismatches")
    check(6, "trapezoid AUC equals pairwise concordance", worst_auc <= 1e-9, f"max diff {worst_auc:.1e} <= 1e-9")
    check(6, "F1 = 2 IoU / (1 + IoU) on every evaluation", identity_gap <= 1e-12, f"max gap {identity_gap:.1e}")


# ------------------------------------------------------------------ 7. loss


def test_c7_loss_fixtures():
    rng = np.random.default_rng(8)
    gt = (rng.random((16, 16)) < 0.3).astype(np.float64)
    ce_half = train.ce_loss(np.full((16, 16), 0.5), gt)
    check(7, "CE at 0.5 equals ln 2", abs(ce_half - math.log(2)) <= 1e-12, f"|diff| {abs(ce_half - math.log(2)):.1e}")

    line = np.array([[0, 1, 0]])
    phi = sdt.signed_distance_map(line)
    pred = line.astype(np.float64)
    a = sdt.boundary_loss(pred, phi, sdt.ABSOLUTE)
    s = sdt.boundary_loss(pred, phi, sdt.SIGNED)
    check(7, "1x3 boundary loss is 1/3 absolute and -1/3 signed",
          abs(a - 1 / 3) <= 1e-15 and abs(s + 1 / 3) <= 1e-15, f"absolute {a!r}, signed {s!r}")

    pred = rng.random((16, 16))
    gt[0, 0], gt[0, 1] = 1, 0
    sdm = sdt.signed_distance_map(gt)
    tot = train.total_loss(pred, gt, sdm, train.LossConfig(lam=0.0))
    check(7, "lambda=0 total loss equals CE bit-exactly", tot == train.ce_loss(pred, gt),
          f"{tot!r} vs {train.ce_loss(pred, gt)!r}")


# ---------------------------------------------------------- 8. determinism


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    data = root / "data"
    assert cli.main(["gen", "--n", "8", "--size", "64", "--seed", "5", "--config", str(CONFIGS / "tiny.cfg"),
                     "--out", str(data)]) == 0
    return data


def _files_equal(a, b, names):
    return [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]


@pytest.mark.slow
def test_c8_deterministic_reruns(tmp_path, small_dataset):
    args = ["train", "--data", str(small_dataset), "--config", str(CONFIGS / "tiny.cfg"),
            "--epochs", "3", "--batch-size", "2", "--seed", "11", "--deterministic"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    names = ["history.csv", "best.ckpt", "last.ckpt", "final.ckpt"]
    diff = _files_equal(tmp_path / "a", tmp_path / "b", names)

    ev = ["eval", "--data", str(small_dataset), "--split", "val", "--roc", "--deterministic"]
    for run in ("a", "b"):
        assert cli.main(ev + ["--checkpoint", str(tmp_path / run / "final.ckpt"),
                              "--out", str(tmp_path / f"eval_{run}")]) == 0
    diff += _files_equal(tmp_path / "eval_a", tmp_path / "eval_b", ["metrics.csv", "roc.csv"])
    check(8, "deterministic reruns are byte-identical", not diff,
          f"compared {len(names) + 2} files, differing: {diff or 'none'}")


@pytest.mark.slow
def test_c8_resume_matches_uninterrupted(tmp_path, small_dataset):
    base = ["train", "--data", str(small_dataset), "--config", str(CONFIGS / "tiny.cfg"),
            "--epochs", "4", "--batch-size", "2", "--seed", "3", "--deterministic"]
    assert cli.main(base + ["--out", str(tmp_path / "full")]) == 0

    # same run, killed after its second epoch
    exp = config.load(CONFIGS / "tiny.cfg")
    exp.train.epochs, exp.train.batch_size, exp.train.seed, exp.train.deterministic = 4, 2, 3, True
    exp.train.checkpoint_dir = str(tmp_path / "part")
    samples = phantom.load_dataset(small_dataset)
    pairs = lambda split: [(s.image, s.mask) for s in phantom.subset(samples, split)]  # noqa: E731

    class Killed(Exception):
        pass

    def kill(rec, _params):
        if rec.epoch == 1:
            raise Killed

    with pytest.raises(Killed), cli.deterministic_mode(True):
        train.fit(pairs("train"), pairs("val"), exp.vit, exp.train, exp.loss, exp.aug, on_epoch=kill)
    assert cli.main(base + ["--out", str(tmp_path / "part"), "--resume", str(tmp_path / "part" / "last.ckpt")]) == 0
    diff = _files_equal(tmp_path / "full", tmp_path / "part", ["history.csv", "best.ckpt", "last.ckpt", "final.ckpt"])
    check(8, "resume after epoch 2 of 4 equals the uninterrupted run", not diff,
          f"differing: {diff or 'none'}")


# ------------------------------------------------------------- 9. ablation


@pytest.mark.slow
def test_c9_ablation_harness(tmp_path, small_dataset):
    out = tmp_path / "ablate"
    code = cli.main(["ablate", "--data", str(small_dataset), "--config", str(CONFIGS / "tiny.cfg"),
                     "--epochs", "1", "--batch-size", "2", "--lambda", "0.01", "--deterministic", "--out", str(out)])
    rows = [line.split(",") for line in (out / "ablation.csv").read_text().splitlines()]
    shape_ok = (code == 0 and rows[0][2:] == list(metrics.TABLE_HEADERS)
                and [r[0] for r in rows[1:]] == ["baseline", "BAVT"]
                and all(len(r) == 8 for r in rows[1:]))
    check(9, "ablation emits baseline/BAVT rows with six metric columns", shape_ok,
          f"header {','.join(rows[0])}; rows {[r[0] for r in rows[1:]]}")
    grad = [line.split(",") for line in (out / "gradient_check.csv").read_text().splitlines()[1:]]
    diff = float(grad[0][2])
    check(9, "first-step gradients differ between lambda=0 and lambda>0", diff > 0 and grad[0][3] == "1",
          f"max |grad difference| {diff:.3e}")


# ---------------------------------------------------------- 10. augmentation


def test_c10_augmentation_properties():
    image, mask = phantom.generate_phantom(phantom.PhantomConfig(seed=17))
    cfg = imgproc.AugmentConfig(elastic_prob=0.5, norm_mean=0.5, norm_std=0.25)
    non_binary = 0
    for seed in range(100):
        _, out = imgproc.apply_augmentations(image, mask, cfg, seed)
        non_binary += not set(np.unique(out)) <= {0, 1}
    check(10, "mask stays binary over 100 seeded augmentations", non_binary == 0, f"{non_binary} non-binary masks")

    rng = np.random.default_rng(10)
    x = rng.random((64, 64))
    cases = {
        "gamma=1": np.array_equal(imgproc.gamma_correct(x, 1.0), x),
        "angle=0": all(np.array_equal(a, b) for a, b in zip(imgproc.rotate_pair(x, mask, 0.0), (x, mask))),
        "alpha=0": all(np.array_equal(a, b) for a, b in zip(imgproc.elastic_deform(x, mask, 0.0, 4.0, 1), (x, mask))),
        "flips off": all(np.array_equal(a, b) for a, b in zip(imgproc.flip_pair(x, mask), (x, mask))),
    }
    ident = imgproc.AugmentConfig(flip_prob=0, rotation_range_deg=0, gamma_range=(1, 1), elastic_prob=0,
                                  norm_mean=0.5, norm_std=0.25)
    out_img, out_mask = imgproc.apply_augmentations(image, mask, ident, 99)
    cases["pipeline"] = (np.array_equal(out_img, imgproc.preprocess(image, ident))
                         and np.array_equal(out_mask, mask))
    failed = [k for k, v in cases.items() if not v]
    check(10, "identity settings are exact", not failed, f"cases {', '.join(cases)}; failed: {failed or 'none'}")

    worst_excess = 0
    for seed in range(5):
        img = np.clip(rng.normal(0.5, 0.04 * (seed + 1), size=(64, 64)), 0, 1)
        hists, counts = imgproc.clahe_histograms(img, 2.0, 8)
        levels = imgproc.quantize(img)
        bounds = imgproc.tile_bounds(64, 8)
        for i in range(8):
            for j in range(8):
                block = levels[bounds[0][i]:bounds[1][i], bounds[0][j]:bounds[1][j]]
                recount = np.bincount(block.ravel(), minlength=256)
                cap = max(1, math.floor(2.0 * block.size / 256))
                assert hists[i, j].sum() == recount.sum() == counts[i, j]
                worst_excess = max(worst_excess, int(hists[i, j].max()) - cap)
    check(10, "CLAHE clipped histograms respect the clip limit", worst_excess <= 0,
          f"max bin minus cap over 320 tiles: {worst_excess}")
