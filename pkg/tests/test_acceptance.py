"""Acceptance criteria, one test each, printing a PASS/FAIL line with the numbers.

Run with ``pytest -v -s tests/test_acceptance.py``. The training criteria share
one desk-scale dataset and cache their runs for the session.
"""

import dataclasses
import time

import numpy as np
import pytest
from test_arch import closed_form_params, receptive_field_by_intervals, variant_loss_fn
from test_metrics import brute_image_bf, random_label_pair
from test_ops import OP_NAMES, _grad_cases

from segdecode import ops
from segdecode.arch import VariantKind, build_variant, count_params, receptive_field, storage_cost
from segdecode.cli import main as cli_main
from segdecode.data import SynthSpec, generate_synthetic, load_split, prepare_images, synth_sample
from segdecode.gradcheck import check_gradients
from segdecode.metrics import (
    ConfusionMatrix,
    accumulate_confusion,
    bf_score,
    class_average,
    default_theta,
    global_accuracy,
    mean_iou,
)
from segdecode.modelio import dumps, load_checkpoint, load_model, save_model
from segdecode.tensor import Tensor
from segdecode.train import (
    Dataset,
    TrainConfig,
    build_from_config,
    checkpoint_state,
    evaluate,
    median_frequency_weights,
    resume_state,
    train_loop,
)

SEEDS = (0, 1, 2)
# the loss is summed over pixels, so step sizes are small
OVERFIT_LR = 1e-5
DESK_LR = 2e-6
DESK_MAX_EPOCHS = 30
DESK_STOP_VAL_G = 0.92
# FCN-Basic with median weights diverges early at 1e-6 for some seeds; every variant gets the same protocol
COMPARE_LR = 5e-7
COMPARE_EPOCHS = 10


def report(n, ok, detail, elapsed=None):
    tag = "PASS" if ok else "FAIL"
    timing = "" if elapsed is None else f" [{elapsed:.3g} s]"
    print(f"\n{tag} criterion {n}: {detail}{timing}", flush=True)
    return ok


@pytest.fixture
def out(capsys):
    """Print straight to the terminal so the verdict lines survive capture."""
    def emit(*args, **kw):
        with capsys.disabled():
            return report(*args, **kw)
    return emit


# -- accounting ------------------------------------------------------------------


def test_criterion_01_receptive_field(out):
    t = time.perf_counter()
    rf = receptive_field(4, 7)
    dt = time.perf_counter() - t
    ok = rf == 106 == receptive_field_by_intervals(4, 7) and dt < 1e-3
    assert out(1, ok, f"receptive_field(4, 7) = {rf} (want 106)", dt)


def test_criterion_02_storage(out):
    t = time.perf_counter()
    want = {
        "segnet-basic": 1,
        "segnet-basic-encoder-addition": 64,
        "segnet-basic-single-channel-decoder": 1,
        "fcn-basic": 11,
        "fcn-basic-no-addition": 0,
        "fcn-basic-no-dim-reduction": 64,
        "fcn-basic-no-addition-no-dim-reduction": 0,
        "bilinear-interpolation": 0,
    }
    got = {k: storage_cost(build_variant(k, 11), 360, 480) for k in want}
    maps64 = got["segnet-basic-encoder-addition"].bytes_encoder_maps
    maps11 = got["fcn-basic"].bytes_encoder_maps
    idx = got["segnet-basic"].bytes_indices
    mults = {k: r.multiplier for k, r in got.items()}
    flagged = [k for k, r in got.items() if not r.multiplier_applicable]
    dt = time.perf_counter() - t
    ok = (maps64 == 11_059_200 and maps11 == 1_900_800 and idx == 180 * 240 * 64 * 2 // 8
          and mults == want and flagged == ["fcn-basic-no-addition"] and dt < 1)
    assert out(2, ok, f"64 maps {maps64} B, 11 maps {maps11} B, indices {idx} B, "
                      f"multipliers {[mults[k] for k in want]}, flagged n/a {flagged}", dt)


def test_criterion_03_param_counts(out):
    t = time.perf_counter()
    counts = {(k, K): count_params(build_variant(k, K)) for k in VariantKind for K in (2, 11)}
    exact = all(n == closed_form_params(k, K) for (k, K), n in counts.items())
    published = {
        VariantKind.SEGNET_BASIC: 1.425e6,
        VariantKind.SEGNET_BASIC_SINGLE_CHANNEL_DECODER: 0.625e6,
        VariantKind.FCN_BASIC: 0.65e6,
        VariantKind.FCN_BASIC_NO_DIM_REDUCTION: 1.625e6,
    }
    rel = {k: counts[k, 11] / v - 1 for k, v in published.items()}
    dt = time.perf_counter() - t
    ok = exact and all(abs(r) <= 0.06 for r in rel.values()) and dt < 1
    detail = ", ".join(f"{k.value} {r:+.2%}" for k, r in rel.items())
    assert out(3, ok, f"closed form exact={exact}; vs published: {detail}", dt)


# -- algebra and oracles -----------------------------------------------------------


def test_criterion_04_gradient_suite(out):
    t = time.perf_counter()
    worst, failures, checks = 0.0, [], 0
    for seed in range(20):
        cases = _grad_cases(np.random.default_rng(1000 + seed))
        for name in OP_NAMES:
            f, inputs = cases[name]
            err = check_gradients(f, inputs)
            worst, checks = max(worst, err), checks + 1
            if not err < 1e-4:
                failures.append((name, seed, err))
        for kind in VariantKind:
            f, tensors = variant_loss_fn(kind, seed)
            # full variants have a few thousand weights; probe a random subset of each tensor
            err = check_gradients(f, tensors, max_entries=12, seed=seed)
            worst, checks = max(worst, err), checks + 1
            if not err < 1e-4:
                failures.append((kind.value, seed, err))
    dt = time.perf_counter() - t
    ok = not failures and dt < 300
    assert out(4, ok, f"{checks - len(failures)}/{checks} checks over 20 seeds, worst relative error {worst:.2e}, "
                      f"failures {failures}", dt)


def test_criterion_05_pool_unpool(out):
    t = time.perf_counter()
    r = np.random.default_rng(5)
    bad = 0
    for _ in range(1000):
        n, c = r.integers(1, 3), r.integers(1, 4)
        h, w = r.integers(1, 6, 2)
        _, idx = ops.maxpool2x2(Tensor(r.standard_normal((n, c, 2 * h, 2 * w))))
        y = r.uniform(0, 5, idx.shape)
        y[r.random(y.shape) < 0.2] = 0.0
        up = ops.max_unpool2x2(Tensor(y), idx).data
        back = ops.maxpool2x2(Tensor(up))[0].data
        win = up.reshape(n, c, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w, 4)
        if not (np.array_equal(back, y) and np.count_nonzero(up) <= y.size and ((win != 0).sum(-1) <= 1).all()):
            bad += 1
    dt = time.perf_counter() - t
    assert out(5, bad == 0 and dt < 10, f"{1000 - bad}/1000 random cases round-trip with sparse windows", dt)


def test_criterion_06_metric_oracles(out):
    t = time.perf_counter()
    cm = accumulate_confusion(ConfusionMatrix(2), np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    hand = (global_accuracy(cm), class_average(cm), mean_iou(cm)) == (3 / 4, 3 / 4, (1 / 2 + 2 / 3) / 2)
    r = np.random.default_rng(6)
    matched = 0
    while matched < 100:
        pred, gt = random_label_pair(r)
        theta = float(r.choice([1.0, 1.5, 2.0, default_theta(*gt.shape)]))
        ref = brute_image_bf(pred, gt, theta)
        if ref is None:
            continue
        if bf_score(pred, gt, theta) != ref:
            break
        matched += 1
    theta = default_theta(360, 480)
    dt = time.perf_counter() - t
    ok = hand and matched == 100 and theta == 4.5 and dt < 60
    assert out(6, ok, f"hand cases exact={hand}; BF equals brute force on {matched}/100 pairs; "
                      f"default_theta(360, 480) = {theta}", dt)


def test_criterion_07_median_balancing(out):
    t = time.perf_counter()
    r = np.random.default_rng(7)
    antitone = anchored = odd = 0
    for _ in range(1000):
        k = int(r.integers(2, 16))
        f = r.dirichlet(np.ones(k))
        w = np.asarray(median_frequency_weights(f))
        order = np.argsort(f)
        antitone += bool(np.all(np.diff(w[order]) < 0))
        # an even count has no single median class
        if k % 2:
            odd += 1
            anchored += bool(w[order[k // 2]] == 1.0)
    dt = time.perf_counter() - t
    assert out(7, antitone == 1000 and anchored == odd and dt < 1,
               f"strictly antitone {antitone}/1000; median class weight exactly 1 in {anchored}/{odd} "
               "odd-length vectors", dt)


# -- training --------------------------------------------------------------------


def desk_config(**kw):
    base = dict(lr=DESK_LR, eval_every=17, lcn=False, ignore_label=255)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The fixed-seed desk benchmark: 64x64, K=6, 200/50/50, skewed class sizes."""
    m = generate_synthetic(SynthSpec(), tmp_path_factory.mktemp("desk"))
    return {split: load_split(m, split, 4, lcn=False) for split in ("train", "val", "test")}


@pytest.fixture(scope="session")
def compare_runs(desk):
    """Test-set reports of best-validation checkpoints, trained on demand and cached."""
    cache = {}

    def get(variant, balancing, seed):
        key = (variant, balancing, seed)
        if key not in cache:
            cfg = desk_config(lr=COMPARE_LR, max_epochs=COMPARE_EPOCHS, variant=variant, balancing=balancing,
                              seed=seed)
            t = time.perf_counter()
            res = train_loop(build_from_config(cfg, 6), desk["train"], desk["val"], cfg)
            cache[key] = (evaluate(res.best_model, desk["test"], 255), time.perf_counter() - t)
        return cache[key]

    return get


def test_criterion_08_learning_sanity(out, desk):
    t0 = time.perf_counter()
    img, lab = synth_sample(SynthSpec(), np.random.default_rng(8))
    one = Dataset(prepare_images(img[None], lcn=False), lab[None].astype(np.int64))
    cfg = desk_config(lr=OVERFIT_LR, batch_size=1, eval_every=10, max_epochs=500, balancing="natural_frequency")
    res = train_loop(build_from_config(cfg, 6), one, one, cfg, callback=lambda e: e.G > 0.99)
    overfit_g, overfit_it = res.history[-1].G, res.iterations
    t1 = time.perf_counter()

    cfg = desk_config(max_epochs=DESK_MAX_EPOCHS, balancing="natural_frequency")
    res = train_loop(build_from_config(cfg, 6), desk["train"], desk["val"], cfg,
                     callback=lambda e: e.G >= DESK_STOP_VAL_G)
    test_g = evaluate(res.best_model, desk["test"], 255).G
    epochs = res.iterations / 17
    dt = time.perf_counter() - t0
    ok = overfit_g > 0.99 and overfit_it <= 500 and test_g > 0.90 and epochs <= 30 and dt < 1800
    assert out(8, ok, f"single sample G {overfit_g:.4f} after {overfit_it} iterations ({t1 - t0:.0f} s); "
                      f"desk test G {test_g:.4f} after {epochs:.0f} epochs", dt)


def test_criterion_09_variant_ordering(out, compare_runs):
    rows, c_ok, bf_ok, total = [], 0, 0, 0.0
    for seed in SEEDS:
        r = {v: compare_runs(v, "median_frequency", seed) for v in ("bilinear-interpolation", "segnet-basic",
                                                                    "fcn-basic")}
        total += sum(dt for _, dt in r.values())
        bil, seg, fcn = (r[v][0] for v in ("bilinear-interpolation", "segnet-basic", "fcn-basic"))
        c_ok += bil.C < min(seg.C, fcn.C)
        bf_ok += bil.BF < min(seg.BF, fcn.BF)
        rows.append(f"seed {seed}: C bil/seg/fcn {bil.C:.3f}/{seg.C:.3f}/{fcn.C:.3f}, "
                    f"BF {bil.BF:.3f}/{seg.BF:.3f}/{fcn.BF:.3f}")
    ok = c_ok == 3 and bf_ok >= 2 and total < 7200
    assert out(9, ok, f"bilinear lowest C in {c_ok}/3, lowest BF in {bf_ok}/3; " + "; ".join(rows), total)


def test_criterion_10_balancing_direction(out, compare_runs):
    rows, c_ok, g_ok, extra = [], 0, 0, 0.0
    g_med, g_nat = [], []
    for seed in SEEDS:
        med, _ = compare_runs("segnet-basic", "median_frequency", seed)
        nat, dt = compare_runs("segnet-basic", "natural_frequency", seed)
        extra += dt
        c_ok += med.C > nat.C
        g_ok += nat.G >= med.G
        g_med.append(med.G)
        g_nat.append(nat.G)
        rows.append(f"seed {seed}: C med/nat {med.C:.3f}/{nat.C:.3f}, G med/nat {med.G:.3f}/{nat.G:.3f}")
    g_mean_ok = np.mean(g_nat) >= np.mean(g_med)
    # the natural-frequency runs are the only training this criterion adds
    ok = c_ok == 3 and g_mean_ok and extra < 3600
    assert out(10, ok, f"median C higher in {c_ok}/3; natural G >= median G in {g_ok}/3 "
                       f"(mean {np.mean(g_nat):.3f} vs {np.mean(g_med):.3f}); " + "; ".join(rows), extra)


TINY_DATA = "classes = 3\nheight = 16\nwidth = 16\nn_train = 4\nn_val = 2\nn_test = 2\n"
TINY_TRAIN = ("lr = 0.001\nbatch_size = 2\neval_every = 1\nmax_epochs = 2\ndepth = 2\nchannels = 4\n"
              "kernel = 3\nprecision = float64\n")


def _cli_run(root):
    root.mkdir()
    (root / "data.cfg").write_text(TINY_DATA)
    (root / "train.cfg").write_text(TINY_TRAIN)
    m = root / "ds" / "manifest.txt"
    codes = [
        cli_main(["gen-data", "--spec", str(root / "data.cfg"), "--out", str(root / "ds")]),
        cli_main(["train", "--config", str(root / "train.cfg"), "--data", str(m), "--out", str(root / "model"),
                  "--history", str(root / "hist")]),
        cli_main(["eval", "--model", str(root / "model"), "--data", str(m), "--report", str(root / "report")]),
    ]
    return codes, [(root / f).read_bytes() for f in ("hist", "model", "report")]


def test_criterion_11_determinism_and_persistence(out, desk, tmp_path):
    t = time.perf_counter()
    codes_a, files_a = _cli_run(tmp_path / "a")
    codes_b, files_b = _cli_run(tmp_path / "b")
    same = codes_a == codes_b == [0, 0, 0] and files_a == files_b

    spec = build_from_config(desk_config(), 6)
    save_model(spec, tmp_path / "full.model")
    back = load_model(tmp_path / "full.model")
    exact = dumps(back) == dumps(spec) and all(
        np.array_equal(back.params[n].data, p.data) and back.params[n].data.dtype == p.data.dtype
        for n, p in spec.params.items())

    train, val = (Dataset(d.images[:24], d.labels[:24]) for d in (desk["train"], desk["val"]))
    val = Dataset(val.images[:4], val.labels[:4])
    cfg = desk_config(max_epochs=2, eval_every=1, max_iterations=4)
    unbroken = train_loop(build_from_config(cfg, 6), train, val, cfg)
    half = dataclasses.replace(cfg, max_iterations=3)
    part = train_loop(build_from_config(half, 6), train, val, half)
    save_model(part.final_model, tmp_path / "ck", checkpoint_state(part, part.iterations, len(train), 12))
    ck_spec, extra = load_checkpoint(tmp_path / "ck")
    rest = train_loop(ck_spec, train, val, cfg, resume=resume_state(extra))
    want, got = unbroken.history[3].train_loss, rest.history[0].train_loss
    dt = time.perf_counter() - t
    ok = same and exact and want == got and dt < 300
    assert out(11, ok, f"two CLI runs byte-identical={same}; SegNet-Basic save/load bit-exact={exact}; "
                       f"loss at iteration 4 unbroken {want!r} resumed {got!r}", dt)
