"""Acceptance battery. Each criterion prints one line:

    criterion N: PASS|FAIL  <title>  (<measurements>)

Run under pytest (``pytest tests/test_acceptance.py``) or directly
(``python tests/test_acceptance.py``). Criteria 3, 4, 5 and 8 share one
sweep of the bundled config over 16 seeds, which takes a few minutes.
"""

import contextlib
import hashlib
import io
import itertools
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from mstl import cli, ops
from mstl.checkpoint import Checkpoint, load_checkpoint
from mstl.config import bundled_config, load_config
from mstl.data import SyntheticDomainConfig, gen_synthetic_domains
from mstl.errors import GradientCheckError
from mstl.gradcheck import grad_check
from mstl.graph import ArchitectureSpec, attach_head, build_micro_densenet, build_micro_resnet, build_model
from mstl.metrics import confusion, metrics, pairwise_auc, roc_auc
from mstl.softlabel import adjusted_rand_index, create_soft_labels, kmeans_fit, select_k
from mstl.tensor import Tensor, make_result
from mstl.transfer import verify_ordering

SWEEP_SEEDS = range(16)
TIME_LIMIT_GRAD = 60.0
TIME_LIMIT_SWEEP = 600.0


def line(n, ok, title, detail):
    text = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    return ok, text


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- 1. gradients -----------------------------------------------------------------------------


def _weighted(t, w):
    return make_result((t.data * w).sum(keepdims=True).reshape(1), (t,), lambda g: [g * w], "weighted_sum")


def _op_cases(seed):
    rng = np.random.default_rng(seed)
    x4 = rng.normal(size=(2, 2, 6, 6))
    x2 = rng.normal(size=(4, 5))
    x2[np.abs(x2) < 1e-3] = 0.5
    w2 = rng.normal(size=(4, 5))
    wc = rng.normal(size=(1, 5, 3, 3))
    lab = rng.integers(0, 4, size=6)
    y = rng.integers(0, 2, size=(6, 1))
    stride, pad = 1 + seed % 2, seed % 2
    return [
        ("conv2d", lambda a, k, b: ops.conv2d(a, k, b, stride=stride, padding=pad),
         [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        ("dense", ops.dense, [rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)]),
        ("pool_avg2d", lambda a: ops.pool_avg2d(a, 2, 2 if seed % 2 else 1), [x4]),
        ("pool_global_avg", ops.pool_global_avg, [x4]),
        ("flatten+residual_add", lambda a, b: ops.flatten(ops.residual_add(a, b)), [x4, rng.normal(size=x4.shape)]),
        ("relu", lambda a: _weighted(ops.relu(a), w2), [x2]),
        ("sigmoid", lambda a: _weighted(ops.sigmoid(a), w2), [x2]),
        ("softmax", lambda a: _weighted(ops.softmax(a), w2), [x2]),
        ("concat_channels", lambda p, q: _weighted(ops.concat_channels([p, q]), wc),
         [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))]),
        ("dropout", lambda p: _weighted(ops.dropout(p, 0.3, np.random.default_rng(seed), True), wc[:, :2]),
         [rng.normal(size=(1, 2, 3, 3))]),
        ("sparse_ce", lambda a: ops.sparse_ce(ops.softmax(a), lab), [rng.normal(size=(6, 4))]),
        ("bce", lambda a: ops.bce(ops.sigmoid(a), y), [rng.normal(size=(6, 1))]),
    ]


def _graph_error(g, seed):
    g = g.astype(np.float64)
    rng = np.random.default_rng(seed)
    for name, p in g.params.items():
        if name.endswith(".bias"):  # keep relus off their kinks
            p.value = rng.normal(scale=0.1, size=p.value.shape)
    x = rng.normal(size=(3, *g.spec.input_shape))
    y = np.array([[0], [1], [1]])
    names = g.trainable_names()

    def loss(*tensors):
        return ops.bce(g.forward(Tensor(x, dtype=np.float64), params=dict(zip(names, tensors))), y)

    return grad_check(loss, [g.params[k].value for k in names], tolerance=np.inf)


def criterion_1():
    t0 = time.perf_counter()
    op_worst, failures = 0.0, []
    for seed in range(5):
        for name, fn, inputs in _op_cases(seed):
            try:
                op_worst = max(op_worst, grad_check(fn, inputs, tolerance=1e-4))
            except GradientCheckError as exc:
                failures.append(f"{name}/seed{seed}: {exc}")
    graph_worst = 0.0
    for seed in range(5):
        res = build_micro_resnet(ArchitectureSpec("residual", 2, [1, 1], 2, 0.5, (1, 6, 6)), seed)
        dense = build_micro_densenet(ArchitectureSpec("dense_block", 2, [2, 2], 2, 0.5, (1, 6, 6)), seed)
        for kind, g in (("resnet", res), ("densenet", dense)):
            err = _graph_error(attach_head(g, "binary", 4, seed=seed), seed)
            graph_worst = max(graph_worst, err)
            if not err < 1e-3:
                failures.append(f"{kind}/seed{seed}: rel err {err:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and op_worst < 1e-4 and graph_worst < 1e-3 and elapsed < TIME_LIMIT_GRAD
    detail = f"ops max rel err {op_worst:.1e} < 1e-4, graphs {graph_worst:.1e} < 1e-3, {elapsed:.1f} s < 60 s"
    if failures:
        detail += "; " + "; ".join(failures[:3])
    return line(1, ok, "gradient correctness", detail)


# -- 2. oracles ----------------------------------------------------------------------------


def _conv_loop(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i, f, yy, xx in itertools.product(range(n), range(o), range(oh), range(ow)):
        acc = b[f]
        for ch, dy, dx in itertools.product(range(c), range(k), range(k)):
            acc += xp[i, ch, yy * stride + dy, xx * stride + dx] * w[f, ch, dy, dx]
        out[i, f, yy, xx] = acc
    return out


def _dense_loop(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i, j in itertools.product(range(x.shape[0]), range(w.shape[1])):
        out[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(x.shape[1]))
    return out


def _pool_loop(x, window, stride):
    n, c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i, ch, yy, xx in itertools.product(range(n), range(c), range(oh), range(ow)):
        out[i, ch, yy, xx] = x[i, ch, yy * stride:yy * stride + window, xx * stride:xx * stride + window].sum() / window ** 2
    return out


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def _best_fixed_point(x, k):
    """Smallest inertia over all assignments that are Lloyd fixed points."""
    best = np.inf
    for assign in itertools.product(range(k), repeat=len(x)):
        lab = np.array(assign)
        if len(set(assign)) < k:
            continue
        cents = np.stack([x[lab == j].mean(0) for j in range(k)])
        d2 = ((x[:, None] - cents[None]) ** 2).sum(2)
        if np.all(d2[np.arange(len(x)), lab] <= d2.min(1) + 1e-12):
            best = min(best, float(d2[np.arange(len(x)), lab].sum()))
    return best


def criterion_2():
    rng = np.random.default_rng(2024)
    f64 = dict(dtype=np.float64)
    conv_err = dense_err = pool_err = 0.0
    for _ in range(100):
        n, c, o = (int(v) for v in rng.integers(1, 4, size=3))
        h, w = (int(v) for v in rng.integers(3, 8, size=2))
        k = int(rng.integers(1, min(h, w, 3) + 1))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        out = ops.conv2d(Tensor(x, **f64), Tensor(wt, **f64), Tensor(b, **f64), stride, pad).data
        conv_err = max(conv_err, _rel(out, _conv_loop(x, wt, b, stride, pad)))
        fin, units = int(rng.integers(1, 8)), int(rng.integers(1, 5))
        xd, wd, bd = rng.normal(size=(n, fin)), rng.normal(size=(fin, units)), rng.normal(size=units)
        dense_err = max(dense_err, _rel(ops.dense(Tensor(xd, **f64), Tensor(wd, **f64), Tensor(bd, **f64)).data,
                                        _dense_loop(xd, wd, bd)))
        window = int(rng.integers(1, min(h, w) + 1))
        pstride = int(rng.integers(1, 3))
        pool_err = max(pool_err, _rel(ops.pool_avg2d(Tensor(x, **f64), window, pstride).data, _pool_loop(x, window, pstride)))

    auc_err = 0.0
    for _ in range(1000):
        size = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size)
        y[0], y[1] = 0, 1
        levels = int(rng.integers(1, 6))
        s = rng.integers(0, levels, size) / max(levels - 1, 1) if rng.uniform() < 0.5 else rng.uniform(size=size)
        auc_err = max(auc_err, abs(roc_auc(s, y)[1] - pairwise_auc(s, y)))

    monotone = True
    for seed in range(20):
        pts = np.random.default_rng(seed).normal(size=(40, 2))
        hist = np.array(kmeans_fit(pts, 3, seed=seed, n_init=1).inertia_history)
        monotone &= bool(np.all(np.diff(hist) <= 1e-12 * hist[0]))
    fixed_err = 0.0
    for seed in range(5):
        sub = np.random.default_rng(100 + seed).normal(size=(8, 2))
        fixed_err = max(fixed_err, abs(kmeans_fit(sub, 3, seed=seed).inertia - _best_fixed_point(sub, 3)))

    ok = conv_err < 1e-6 and dense_err < 1e-6 and pool_err < 1e-6 and auc_err < 1e-9 and monotone and fixed_err < 1e-9
    detail = (f"conv {conv_err:.1e}, dense {dense_err:.1e}, pool {pool_err:.1e} over 100 cases; "
              f"AUC vs pairwise {auc_err:.1e} over 1000 cases; k-means monotone={monotone}, "
              f"exhaustive fixed-point gap {fixed_err:.1e}")
    return line(2, ok, "oracle equivalence", detail)


# -- shared sweep over the bundled config ---------------------------------------------------------


_SWEEP: dict = {}


def run_bundled(seed, out):
    with contextlib.redirect_stdout(io.StringIO()):
        code = cli.main(["mstl", "--config", str(bundled_config()), "--seed", str(seed), "--out", str(out)])
    if code != 0:
        raise RuntimeError(f"mstl run for seed {seed} exited with {code}")
    return Path(out)


def sweep(workdir):
    if not _SWEEP:
        t0 = time.perf_counter()
        runs = {seed: run_bundled(seed, Path(workdir) / f"seed{seed}") for seed in SWEEP_SEEDS}
        _SWEEP.update(runs=runs, elapsed=time.perf_counter() - t0, workdir=Path(workdir))
    return _SWEEP


# -- 3. mechanics -----------------------------------------------------------------------------


def criterion_3(workdir):
    run = sweep(workdir)["runs"][0]
    audit = json.loads((run / "audit.json").read_text())
    arms = json.loads((run / "arms.json").read_text())
    problems = []
    for path, a in audit["stages"].items():
        for key in ("base_unchanged_by_head_policy", "frozen_bit_identical", "checkpoint_roundtrip_bytes_equal"):
            if not a.get(key):
                problems.append(f"{path}: {key}")
        if path != "source":
            for key in ("weight_carry_bit_exact", "head_fresh"):
                if not a.get(key):
                    problems.append(f"{path}: {key}")
    # independent checks on the files
    ckpts = sorted(run.rglob("checkpoint.mstl"))
    for c in ckpts:
        raw = c.read_bytes()
        if Checkpoint.from_bytes(raw).to_bytes() != raw:
            problems.append(f"{c.relative_to(run)}: re-serialised bytes differ")
    n_frozen = 0
    for c in ckpts:
        parent = c.parent.parent / "checkpoint.mstl"
        if c.parent.parent.name == "stages" or not parent.is_file():
            continue
        child, par = load_checkpoint(c), load_checkpoint(parent)
        for k, trainable in child.trainable.items():
            if not trainable:
                n_frozen += 1
                if child.params[k].tobytes() != par.params[k].tobytes():
                    problems.append(f"{c.relative_to(run)}: frozen {k} differs from its parent")
    source_sha = sha(run / "stages/source/checkpoint.mstl")
    roots = {a: v["checkpoint_sha256"][0] for a, v in arms.items()}
    shared = set(roots.values()) == {source_sha} and audit["shared_source_checkpoint"]
    if not shared:
        problems.append(f"arm roots differ: {roots}")
    ok = not problems and n_frozen > 0 and len(ckpts) == 4
    detail = (f"{len(ckpts)} checkpoints, {len(audit['stages'])} stage audits, {n_frozen} frozen tensors checked "
              f"against parents, shared source {source_sha[:12]}")
    if problems:
        detail += "; " + "; ".join(problems[:3])
    return line(3, ok, "MSTL mechanics invariants", detail)


# -- 4. directional reproduction ------------------------------------------------------------------


def sign_test_p(wins, losses):
    n = wins + losses
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2 ** n


def criterion_4(workdir):
    sw = sweep(workdir)
    rows = []
    for seed, run in sw["runs"].items():
        m = json.loads((run / "reports/target_mstl.json").read_text())
        b = json.loads((run / "reports/target_baseline.json").read_text())
        rows.append((m["auc"], b["auc"], m["recall"], b["recall"]))
    r = np.array(rows)
    wins, losses = int(np.sum(r[:, 0] > r[:, 1])), int(np.sum(r[:, 0] < r[:, 1]))
    p = sign_test_p(wins, losses)
    mean_auc_m, mean_auc_b, mean_rec_m, mean_rec_b = r.mean(0)
    ok = (len(rows) >= 10 and mean_rec_m >= mean_rec_b and mean_auc_m >= mean_auc_b and mean_auc_m - mean_auc_b > 0
          and p < 0.05 and sw["elapsed"] < TIME_LIMIT_SWEEP)
    detail = (f"{len(rows)} seeds; AUC mstl {mean_auc_m:.3f} vs baseline {mean_auc_b:.3f}; recall {mean_rec_m:.3f} vs "
              f"{mean_rec_b:.3f}; AUC wins {wins}/{wins + losses}, one-sided sign test p={p:.4f}; "
              f"sweep {sw['elapsed']:.0f} s on one process")
    return line(4, ok, "directional reproduction (MSTL vs baseline)", detail)


# -- 5. ordering premise --------------------------------------------------------------------------


def criterion_5(workdir):
    sw = sweep(workdir)
    decreasing = []
    for seed in list(SWEEP_SEEDS)[:5]:
        doc = json.loads((sw["runs"][seed] / "domain_distance.json").read_text())
        decreasing.append(doc["arms"]["mstl"]["strictly_decreasing"])
    cfg = load_config(bundled_config())
    extractor = load_checkpoint(sw["runs"][0] / "stages/source/checkpoint.mstl")
    base = SyntheticDomainConfig(**{**cfg.synthetic.base.__dict__, "samples_per_class": 100, "seed": 0})
    inverted = gen_synthetic_domains(base, shifts={"source": 0.5, "transition": 1.0, "target": 0.0})
    rep = verify_ordering(["source", "transition", "target"], [inverted[n][0] for n in ("source", "transition", "target")],
                          extractor)
    flagged = not rep.strictly_decreasing and len(rep.violations) > 0
    ok = all(decreasing) and flagged
    detail = (f"default knob strictly decreasing on {sum(decreasing)}/5 seeds; inverted knob flagged={flagged} "
              f"(distances {', '.join(f'{d:.3g}' for d in rep.distances)})")
    return line(5, ok, "domain ordering premise", detail)


# -- 6. soft labels -----------------------------------------------------------------------------


def _soft_image_pipeline(seed):
    cfg = load_config(bundled_config())
    extractor = build_model(cfg.architecture, seed)
    rng = np.random.default_rng(seed)
    comp = rng.permutation(np.repeat(np.arange(4), 50))
    levels = np.array([0.1, 0.4, 0.7, 1.0])
    shape = (len(comp), *cfg.architecture.input_shape)
    x = (levels[comp][:, None, None, None] + rng.normal(0, 0.02, size=shape)).astype(np.float32)
    labels, _, rep = create_soft_labels(extractor, x, [2, 4, 8, 16], 10, seed=seed)
    return rep["k_best"], adjusted_rand_index(labels.labels, comp), labels.labels


def _soft_feature_mixture(seed):
    rng = np.random.default_rng(seed)
    dim = 16
    centers = 6.0 * np.eye(dim)[:4]  # pairwise separation 8.5 sigma
    comp = rng.permutation(np.repeat(np.arange(4), 50))
    x = centers[comp] + rng.normal(0, 1.0, size=(len(comp), dim))
    rep = select_k(x, [2, 4, 8, 16], 10, seed=seed)
    model = kmeans_fit(x, rep["k_best"], seed=seed)
    return rep["k_best"], adjusted_rand_index(model.labels, comp), model.labels


def criterion_6():
    img_k, img_ari, img_labels = _soft_image_pipeline(0)
    _, _, img_again = _soft_image_pipeline(0)
    mix_k, mix_ari, mix_labels = _soft_feature_mixture(0)
    _, _, mix_again = _soft_feature_mixture(0)
    deterministic = np.array_equal(img_labels, img_again) and np.array_equal(mix_labels, mix_again)
    ok = img_k == 4 and mix_k == 4 and img_ari >= 0.99 and mix_ari >= 0.99 and deterministic
    detail = (f"image pipeline k={img_k} ARI={img_ari:.3f}; feature mixture k={mix_k} ARI={mix_ari:.3f}; "
              f"grid {{2,4,8,16}}, 10 folds; repeat runs identical={deterministic}")
    return line(6, ok, "soft-label pipeline", detail)


# -- 7. metric battery ----------------------------------------------------------------------------


def criterion_7():
    scores, labels = [0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0]
    m = metrics(confusion(scores, labels, 0.5))
    auc = roc_auc(scores, labels)[1]
    hand = all(m[k] == 0.5 for k in ("accuracy", "precision", "recall", "f1")) and auc == 0.75 and not m["undefined"]
    never_positive = metrics(confusion([0.1, 0.2, 0.3], [1, 0, 0], 0.5))
    no_positives = metrics(confusion([0.9, 0.2], [0, 0], 0.5))
    flags = (set(never_positive["undefined"]) == {"precision", "f1"} and never_positive["precision"] == 0.0
             and "recall" in no_positives["undefined"] and no_positives["recall"] == 0.0)
    ok = hand and flags
    detail = (f"accuracy={m['accuracy']:.3f} precision={m['precision']:.3f} recall={m['recall']:.3f} "
              f"f1={m['f1']:.3f} auc={auc}; zero-denominator flags {never_positive['undefined']} / "
              f"{no_positives['undefined']}")
    return line(7, ok, "metric battery", detail)


# -- 8. determinism -------------------------------------------------------------------------------


def criterion_8(workdir):
    sw = sweep(workdir)
    first = sw["runs"][0]
    second = run_bundled(0, Path(workdir) / "seed0_again")
    files = [p.relative_to(first) for p in sorted(first.rglob("*"))
             if p.is_file() and (p.suffix == ".mstl" or (p.suffix == ".json" and ("reports" in p.parts or p.name.startswith("eval_"))))]
    differ = [str(f) for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    n_ckpt = sum(1 for f in files if f.suffix == ".mstl")
    whole = (first / "files.json").read_bytes() == (second / "files.json").read_bytes()
    ok = not differ and n_ckpt == 4 and len(files) > n_ckpt
    detail = (f"{len(files) - n_ckpt} structured reports and {n_ckpt} checkpoints compared, {len(differ)} differ; "
              f"full run file manifests identical={whole}")
    if differ:
        detail += "; " + ", ".join(differ[:3])
    return line(8, ok, "end-to-end determinism", detail)


# -- pytest entry points ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    _SWEEP.clear()
    return tmp_path_factory.mktemp("acceptance")


def _report(capsys, result):
    ok, text = result
    with capsys.disabled():
        print("\n" + text)
    assert ok, text


def test_criterion_1_gradients(capsys):
    _report(capsys, criterion_1())


def test_criterion_2_oracles(capsys):
    _report(capsys, criterion_2())


@pytest.mark.slow
def test_criterion_3_mechanics(capsys, workdir):
    _report(capsys, criterion_3(workdir))


@pytest.mark.slow
def test_criterion_4_directional(capsys, workdir):
    _report(capsys, criterion_4(workdir))


@pytest.mark.slow
def test_criterion_5_ordering(capsys, workdir):
    _report(capsys, criterion_5(workdir))


def test_criterion_6_soft_labels(capsys):
    _report(capsys, criterion_6())


def test_criterion_7_metrics(capsys):
    _report(capsys, criterion_7())


@pytest.mark.slow
def test_criterion_8_determinism(capsys, workdir):
    _report(capsys, criterion_8(workdir))


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        results = [criterion_1(), criterion_2(), criterion_3(tmp), criterion_4(tmp), criterion_5(tmp),
                   criterion_6(), criterion_7(), criterion_8(tmp)]
    for _, text in results:
        print(text)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
