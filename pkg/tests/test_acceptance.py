"""End-to-end acceptance checks, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line that is repeated in the
terminal summary.  The desk training run is shared through a module fixture
and driven through the command line at ``--threads 1``; criterion 9 repeats
it from scratch.  Expect well over an hour on a single core.
"""

import time

import numpy as np
import pytest

from _oracles import band_limited_field, rayleigh_sommerfeld
from dlpr import autodiff as ad
from dlpr.cli import main
from dlpr.datasets import load_dataset
from dlpr.experiments import filter_activation
from dlpr.network import NetworkSpec, PhaseNet, load_checkpoint
from dlpr.optics import PropagationConfig, propagate
from dlpr.training import null_baseline
from test_autodiff import OPS

pytestmark = pytest.mark.slow

DESK = PropagationConfig()
DISTANCES = "0.25,0.3,0.375,0.45,0.55"
FAR = 1.075  # the failure distance; desk and paper share d0 = 0.375 m, so no rescaling


def run(*argv):
    code = main([*argv, "--threads", "1"])
    assert code == 0, f"dlpr {' '.join(argv)} exited {code}"


def read_csv(path):
    lines = path.read_text().splitlines()
    keys = lines[0].split(",")
    return [dict(zip(keys, line.split(","))) for line in lines[1:]]


def build_and_train(root):
    run("gen-data", "--procedural", "blobs", "--count", "2200", "--split", "0.909", "--seed", "0",
        "--distance", "0.375", "--out", str(root / "blobs"))
    start = time.perf_counter()
    run("train", "--data", str(root / "blobs"), "--epochs", "20", "--seed", "0", "--out", str(root / "run"))
    return time.perf_counter() - start


def sweep(root, ckpt, axis, values, name):
    run("sweep", "--checkpoint", str(ckpt), "--data", str(root / "blobs"), "--axis", axis, "--values", values,
        "--out", str(root / name))
    return root / name / f"sweep-{axis}.csv"


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    seconds = build_and_train(root)
    train = load_dataset(root / "blobs", "train")
    test = load_dataset(root / "blobs", "test")
    model, meta = load_checkpoint(root / "run" / "final.ckpt")
    return {
        "root": root,
        "seconds": seconds,
        "train": train,
        "test": test,
        "model": model,
        "ckpt": root / "run" / "final.ckpt",
        "history": read_csv(root / "run" / "history.csv"),
        "null": null_baseline(test, train),
    }


# -- 1 -------------------------------------------------------------------------------


def test_criterion_1_point_source_oracle(report):
    start = time.perf_counter()
    cfg = DESK.replace(distance=0.05)
    u = np.zeros((64, 64), complex)
    u[32, 32] = 1.0
    ref = rayleigh_sommerfeld(u, cfg.wavelength, cfg.pixel_pitch, cfg.distance)
    err = np.linalg.norm(propagate(u, cfg) - ref) / np.linalg.norm(ref)
    elapsed = time.perf_counter() - start
    ok = err < 1e-3 and elapsed < 60
    report(1, ok, f"point source vs Rayleigh-Sommerfeld rel L2 {err:.3e} (< 1e-3), {elapsed:.1f} s (< 60 s)")
    assert ok


# -- 2 -------------------------------------------------------------------------------


def test_criterion_2_optics_invariants(report):
    rng = np.random.default_rng(2024)
    fields = [band_limited_field(rng, 64) for _ in range(20)]
    base = DESK.replace(pad_mode="zero", pad_factor=2)
    drift = identity = round_trip = semigroup = 0.0
    for u in fields:
        peak = np.max(np.abs(u))
        e0 = np.sum(np.abs(u) ** 2)
        for d in (0.02, 0.05):
            drift = max(drift, abs(np.sum(np.abs(propagate(u, base.replace(distance=d))) ** 2) - e0) / e0)
        identity = max(identity, np.max(np.abs(propagate(u, base.replace(distance=0.0)) - u)))
        back = propagate(propagate(u, base.replace(distance=0.02)), base.replace(distance=-0.02))
        round_trip = max(round_trip, np.max(np.abs(back - u)) / peak)
        two = propagate(propagate(u, base.replace(distance=0.008)), base.replace(distance=0.012))
        semigroup = max(semigroup, np.max(np.abs(two - propagate(u, base.replace(distance=0.02)))) / peak)
    ok = drift <= 1e-6 and identity <= 1e-10 and round_trip <= 1e-8 and semigroup <= 1e-8
    report(2, ok, f"20 fields: energy drift {drift:.1e}, d=0 {identity:.1e}, "
                  f"round trip {round_trip:.1e}, semigroup {semigroup:.1e}")
    assert ok


# -- 3 -------------------------------------------------------------------------------


def test_criterion_3_gradient_suite(report):
    start = time.perf_counter()
    worst_op = 0.0
    with ad.precision(np.float64):
        for name, op in sorted(OPS.items()):
            rng = np.random.default_rng(8)
            x = ad.parameter(rng.standard_normal((2, 2, 6, 6)))
            params = [
                ad.parameter(rng.standard_normal((3, 2, 3, 3)) * 0.4),
                ad.parameter(rng.standard_normal(3) * 0.1),
                ad.parameter(rng.standard_normal((2, 3, 4, 4)) * 0.4),
                ad.parameter(rng.standard_normal(3) * 0.1),
            ]
            weights = ad.Tensor(np.random.default_rng(9).standard_normal(op(rng, x, params).shape))
            err = ad.grad_check(lambda: ad.tsum(ad.mul(op(rng, x, params), weights)), [x] + params, samples=8)
            worst_op = max(worst_op, err)
        y = ad.parameter(np.random.default_rng(10).standard_normal((3, 1, 4, 4)))
        target = np.random.default_rng(11).standard_normal((3, 1, 4, 4))
        worst_op = max(worst_op, ad.grad_check(lambda: ad.l1_loss(y, target), [y], samples=12))

        model = PhaseNet(NetworkSpec(), seed=0, dtype=np.float64)
        x = ad.Tensor(np.random.default_rng(12).standard_normal((2, 1, 64, 64)))
        truth = -np.pi * np.random.default_rng(13).random((2, 1, 64, 64))
        net_err = ad.grad_check(lambda: ad.l1_loss(model.forward(x), truth), model.parameters(), samples=3)

        adjoint = 0.0
        for h, k, stride, dilation, padding in [(8, 3, 2, 1, 1), (8, 4, 2, 1, 1), (9, 3, 1, 2, 2), (8, 2, 2, 1, 0)]:
            rng = np.random.default_rng(14)
            xa, w = rng.standard_normal((2, 3, h, h)), rng.standard_normal((5, 3, k, k))
            ax = ad.conv2d(ad.Tensor(xa), ad.Tensor(w), None, stride, dilation, padding).data
            ya = rng.standard_normal(ax.shape)
            base = (ax.shape[2] - 1) * stride - 2 * padding + dilation * (k - 1) + 1
            aty = ad.conv2d_transpose(ad.Tensor(ya), ad.Tensor(w), None, stride, padding, h - base, dilation).data
            lhs, rhs = np.vdot(ax, ya), np.vdot(xa, aty)
            adjoint = max(adjoint, abs(lhs - rhs) / max(abs(lhs), 1.0))
    elapsed = time.perf_counter() - start
    ok = worst_op < 1e-4 and net_err < 1e-4 and adjoint < 1e-5 and elapsed < 300
    report(3, ok, f"ops {worst_op:.1e}, desk network {net_err:.1e} (< 1e-4); adjoint {adjoint:.1e} (< 1e-5); "
                  f"{elapsed:.0f} s (< 300 s)")
    assert ok


# -- 4 -------------------------------------------------------------------------------


def test_criterion_4_desk_training(desk, report):
    h = desk["history"]
    final_test = float(h[-1]["test_l1"])
    first_train, last_train = float(h[0]["train_l1"]), float(h[-1]["train_l1"])
    sizes = (len(desk["train"]), len(desk["test"]))
    ok = (
        sizes == (2000, 200)
        and len(h) == 20
        and final_test < 0.5 * desk["null"]
        and last_train < first_train
        and desk["seconds"] < 1800
    )
    report(4, ok, f"{sizes[0]}/{sizes[1]} blobs, test MAE {final_test:.4f} vs 0.5 x null {0.5 * desk['null']:.4f}; "
                  f"train L1 {first_train:.4f} -> {last_train:.4f}; {desk['seconds'] / 60:.1f} min (< 30)")
    assert ok


# -- 5 -------------------------------------------------------------------------------


def test_criterion_5_generalization(desk, report):
    root = desk["root"]
    kinds = ("digits", "characters", "gratings", "null")
    for kind in kinds:
        run("gen-data", "--procedural", kind, "--count", "200", "--split", "0", "--seed", "5",
            "--distance", "0.375", "--out", str(root / kind))
    run("eval", "--checkpoint", str(desk["ckpt"]), "--data", str(root / "blobs"),
        *[str(root / k) for k in kinds], "--out", str(root / "eval"))
    table = {r["dataset"]: float(r["mae"]) for r in read_csv(root / "eval" / "mae.csv")}
    digits = load_dataset(root / "digits", "test")
    digits_null = null_baseline(digits, desk["train"])
    lowest = min(table, key=table.get)
    ok = table["digits"] < digits_null and lowest == "null"
    summary = ", ".join(f"{k} {v:.4f}" for k, v in table.items())
    report(5, ok, f"digits MAE {table['digits']:.4f} vs null predictor {digits_null:.4f} "
                  f"(own-mean {null_baseline(digits):.4f}); lowest class {lowest} [{summary}]")
    assert ok


# -- 6 -------------------------------------------------------------------------------


def test_criterion_6_distance(desk, report):
    root = desk["root"]
    rows = read_csv(sweep(root, desk["ckpt"], "distance", DISTANCES, "sweep-d"))
    far = read_csv(sweep(root, desk["ckpt"], "distance", str(FAR), "sweep-far"))[0]
    mae = {float(r["value"]): float(r["mae"]) for r in rows}
    best = min(mae, key=mae.get)
    far_mae = float(far["mae"])
    ok = best == 0.375 and far_mae >= 0.9 * desk["null"]
    curve = ", ".join(f"{d}: {m:.4f}" for d, m in mae.items())
    report(6, ok, f"argmin {best} m [{curve}]; d={FAR} MAE {far_mae:.4f} vs 0.9 x null {0.9 * desk['null']:.4f}")
    assert ok


# -- 7 -------------------------------------------------------------------------------


def test_criterion_7_rotation_and_shift(desk, report):
    root = desk["root"]
    before_bytes = desk["ckpt"].read_bytes()
    before_digest = desk["model"].digest()
    rot = read_csv(sweep(root, desk["ckpt"], "rotation", "0,90,180,270", "sweep-rot"))
    shift = read_csv(sweep(root, desk["ckpt"], "shift", "0,2,4,8,16", "sweep-shift"))
    after_model, _ = load_checkpoint(desk["ckpt"])
    unchanged = desk["ckpt"].read_bytes() == before_bytes and after_model.digest() == before_digest
    rot_min = min(rot, key=lambda r: float(r["mae"]))["value"]
    shift_min = min(shift, key=lambda r: float(r["mae"]))["value"]
    ok = len(rot) == 4 and len(shift) == 5 and unchanged and rot_min == "0" and shift_min == "0"
    fmt = lambda rows: ", ".join(f"{r['value']}: {float(r['mae']):.4f}" for r in rows)  # noqa: E731
    report(7, ok, f"rotation [{fmt(rot)}] min {rot_min}; shift [{fmt(shift)}] min {shift_min}; "
                  f"checkpoint unchanged {unchanged}")
    assert ok


# -- 8 -------------------------------------------------------------------------------


def test_criterion_8_maximally_activated_patterns(desk, report):
    root = desk["root"]
    run("maps", "--checkpoint", str(desk["ckpt"]), "--layer", "1", "--filters", "0..15", "--steps", "100",
        "--step-size", "0.1", "--seed", "0", "--out", str(root / "maps"))
    traces = {}
    for r in read_csv(root / "maps" / "map-layer1-trace.csv"):
        traces.setdefault(int(r["filter"]), []).append(float(r["activation"]))
    model = desk["model"]
    rising, ratios = [], []
    for f in range(16):
        t = np.array(traces[f])
        rising.append(bool(np.all(np.diff(t[:11]) > 0)))
        noise = np.random.default_rng(100 + f).standard_normal((1, 1, 64, 64))
        base = float(filter_activation(model, ad.Tensor(noise), 1, f).data)
        ratios.append(t[-1] / base if base > 0 else np.inf if t[-1] > 0 else 0.0)
    maps = len(list((root / "maps").glob("map-layer1-filter*.pgm")))
    ok = maps == 16 and all(rising) and min(ratios) >= 5
    report(8, ok, f"{maps} patterns; rising over 10 steps {sum(rising)}/16; "
                  f"final / noise activation min {min(ratios):.2f} (>= 5)")
    assert ok


# -- 9 -------------------------------------------------------------------------------


def test_criterion_9_determinism(desk, tmp_path, report):
    build_and_train(tmp_path)
    first_sweep = desk["root"] / "sweep-d" / "sweep-distance.csv"
    if not first_sweep.exists():
        sweep(desk["root"], desk["ckpt"], "distance", DISTANCES, "sweep-d")
    second_sweep = sweep(tmp_path, tmp_path / "run" / "final.ckpt", "distance", DISTANCES, "sweep-d")

    def numeric(path):
        # the seconds column is wall-clock time; compare everything else byte for byte
        return "\n".join(line.rsplit(",", 1)[0] for line in path.read_text().splitlines()).encode()

    h1, h2 = desk["root"] / "run" / "history.csv", tmp_path / "run" / "history.csv"
    history_same = numeric(h1) == numeric(h2)
    sweep_same = first_sweep.read_bytes() == second_sweep.read_bytes()
    ckpt_same = desk["ckpt"].read_bytes() == (tmp_path / "run" / "final.ckpt").read_bytes()
    ok = history_same and sweep_same
    report(9, ok, f"history identical (excluding wall-clock seconds) {history_same}; "
                  f"distance sweep CSV identical {sweep_same}; final checkpoint identical {ckpt_same}")
    assert ok
