"""Acceptance gate: one pass/fail line per criterion.

Each check prints ``criterion N PASS|FAIL: ...`` as it runs; the lines are
repeated in pytest's terminal summary. Oracles here are written out
independently of the package (naive loops, exhaustive path enumeration,
full edit-distance tables).
"""
import csv
import itertools
import json
import math
import random
import time

import numpy as np
import pytest
from PIL import Image

from captcha_ocr import tensor as T
from captcha_ocr.alphabet import Alphabet
from captcha_ocr.checkpoint import load_checkpoint, save_checkpoint
from captcha_ocr.cli import main
from captcha_ocr.ctc import ctc_beam_decode, ctc_gradient, ctc_loss, ctc_loss_node
from captcha_ocr.data import synthesize_captcha
from captcha_ocr.data.dataset import to_uint8
from captcha_ocr.evaluate import char_accuracy, edit_distance, word_accuracy
from captcha_ocr.model import ModelConfig, build, forward

RESULTS: list[str] = []

ALPHA = Alphabet.default()
RUN_SEED = 7
RUN_SAMPLES = 2000
RUN_EPOCHS = 15


def check(number, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- independent oracles


def log_normalize(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def squash(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def path_distribution(probs):
    """Probability of every collapsed label, by walking all (K+1)^T paths."""
    steps, classes = probs.shape
    dist = {}
    for path in itertools.product(range(classes), repeat=steps):
        p = math.prod(probs[t, k] for t, k in enumerate(path))
        label = squash(path, classes - 1)
        dist[label] = dist.get(label, 0.0) + p
    return dist


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def loop_conv(x, w, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
                out[f, i, j] = s
    return out


def loop_pool(x, window, stride):
    c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                best = -math.inf
                for u in range(window):
                    for v in range(window):
                        best = max(best, x[ch, i * stride + u, j * stride + v])
                out[ch, i, j] = best
    return out


def table_distance(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


# ---------------------------------------------------------------- fast criteria


def test_criterion_1_ctc_oracle_equivalence():
    rng = np.random.default_rng(101)
    worst, n = 0.0, 600
    for _ in range(n):
        steps, k, length = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
        lp = log_normalize(rng.normal(scale=2.0, size=(steps, k + 1)))
        label = tuple(int(c) for c in rng.integers(0, k, size=length))
        exact = path_distribution(np.exp(lp)).get(label, 0.0)
        worst = max(worst, abs(math.exp(-ctc_loss(lp, list(label), k).loss) - exact))
    check(1, worst <= 1e-9, f"{n} instances, max |exp(-loss) - enumeration| = {worst:.2e} (tol 1e-9)")


def test_criterion_2_ctc_gradient():
    rng = np.random.default_rng(202)
    worst, n, eps = 0.0, 0, 1e-6
    while n < 120:
        steps, k, length = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
        logits = rng.normal(scale=1.5, size=(steps, k + 1))
        label = [int(c) for c in rng.integers(0, k, size=length)]
        if not ctc_loss(log_normalize(logits), label, k).feasible:
            continue
        fd = np.zeros_like(logits)
        for idx in np.ndindex(*logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += eps
            down[idx] -= eps
            fd[idx] = (ctc_loss(log_normalize(up), label, k).loss - ctc_loss(log_normalize(down), label, k).loss) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(ctc_gradient(log_normalize(logits), label, k) - fd))))
        n += 1
    check(2, worst <= 1e-6, f"{n} instances, max |analytic - central difference| = {worst:.2e} (tol 1e-6)")


def test_criterion_3_hand_computable_case():
    # paths over {a, blank} collapsing to "a": aa, a-, -a out of four, each 1/4
    expected = -math.log(3 / 4)
    assert len([p for p in itertools.product("a-", repeat=2) if squash(p, "-") == ("a",)]) == 3
    got = ctc_loss(np.log(np.full((2, 2), 0.5)), [0], 1).loss
    err = abs(got - expected)
    check(3, err <= 1e-12, f"loss {got!r} vs -ln 0.75 = {expected!r}, |diff| = {err:.1e} (tol 1e-12)")


def test_criterion_4_beam_exactness():
    rng = np.random.default_rng(404)
    hits, n = 0, 250
    for _ in range(n):
        steps, k = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        lp = log_normalize(rng.normal(scale=1.5, size=(steps, k + 1)))
        dist = path_distribution(np.exp(lp))
        top = max(dist.values())
        beam = tuple(ctc_beam_decode(lp, k, (k + 1) ** steps))
        hits += dist.get(beam, -1.0) >= top - 1e-15
    check(4, hits == n, f"full-width beam found the most probable label on {hits}/{n} instances")


def test_criterion_5_numeric_core_oracles():
    rng = np.random.default_rng(505)
    worst, shapes = 0.0, 0
    for _ in range(40):
        a = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        b = rng.normal(size=(a.shape[1], int(rng.integers(1, 6))))
        worst = max(worst, float(np.max(np.abs(T.matmul(T.tensor(a), T.tensor(b)).data - loop_matmul(a, b)))))
        shapes += 1
    for _ in range(40):
        c, o, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(c, int(rng.integers(k, 9)), int(rng.integers(k, 9))))
        w = rng.normal(size=(o, c, k, k))
        got = T.conv2d(T.tensor(x), T.tensor(w), stride=stride, padding=pad).data
        worst = max(worst, float(np.max(np.abs(got - loop_conv(x, w, stride, pad)))))
        shapes += 1
    for _ in range(40):
        window, stride = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(window, 10)), int(rng.integers(window, 10))))
        got = T.max_pool2d(T.tensor(x), window, stride).data
        worst = max(worst, float(np.max(np.abs(got - loop_pool(x, window, stride)))))
        shapes += 1

    cfg = ModelConfig(input_height=8, input_width=16, conv_channels=(2,), rnn_hidden=4, rnn_kind="simple",
                      alphabet_size=3)
    params = build(cfg, 5)
    for t in params:
        t.data += rng.normal(scale=0.1, size=t.shape)
    image, label = rng.random((8, 16)), [0, 2, 1]
    node, _ = ctc_loss_node(forward(params, image), label, cfg.alphabet_size)
    grads = T.backward(node, list(params))
    rel = 0.0
    for t in params:
        fd = np.zeros_like(t.data)
        for idx in np.ndindex(*t.shape):
            old = t.data[idx]
            vals = []
            for delta in (1e-6, -1e-6):
                t.data[idx] = old + delta
                with T.no_grad():
                    vals.append(ctc_loss(forward(params, image).data, label, cfg.alphabet_size).loss)
            t.data[idx] = old
            fd[idx] = (vals[0] - vals[1]) / 2e-6
        rel = max(rel, float(np.max(np.abs(grads[t] - fd)) / max(1e-3, np.max(np.abs(fd)))))
    ok = worst <= 1e-12 and shapes >= 100 and rel <= 1e-3
    check(5, ok, f"{shapes} shapes, max |op - loop| = {worst:.1e} (tol 1e-12); "
                 f"tiny-model gradient rel error {rel:.1e} (tol 1e-3)")


def test_criterion_10_metric_properties():
    r = random.Random(1010)

    def word():
        return "".join(r.choices("abcd", k=r.randint(0, 7)))

    n, violations, table_mismatch = 10_000, 0, 0
    for _ in range(n):
        a, b, c = word(), word(), word()
        ab, ba = edit_distance(a, b), edit_distance(b, a)
        violations += ab < 0 or (ab == 0) != (a == b) or ab != ba
        violations += edit_distance(a, c) > ab + edit_distance(b, c)
        table_mismatch += ab != table_distance(a, b)

    pairs = [(word(), word() or "a") for _ in range(300)]
    expected = 1 - sum(table_distance(p, t) for p, t in pairs) / sum(len(t) for _, t in pairs)
    invariants = [
        abs(char_accuracy(pairs) - max(0.0, expected)) <= 1e-12,
        char_accuracy(pairs[::-1]) == pytest.approx(char_accuracy(pairs), abs=1e-15),
        word_accuracy(pairs[::-1]) == word_accuracy(pairs),
        char_accuracy([(t, t) for _, t in pairs]) == 1.0 == word_accuracy([(t, t) for _, t in pairs]),
        char_accuracy([("abcd", "abce")]) == 0.75,
        word_accuracy([(str(i) if i else "x", str(i)) for i in range(20)]) == 0.95,
        word_accuracy([("", t) for _, t in pairs]) == 0.0 == char_accuracy([("", t) for _, t in pairs]),
    ]
    ok = violations == 0 and table_mismatch == 0 and all(invariants)
    check(10, ok, f"{n} string triples: {violations} axiom violations, {table_mismatch} table mismatches; "
                  f"{sum(invariants)}/{len(invariants)} accuracy invariants hold")


# ---------------------------------------------------------------- the desk-scale run


def train_run(out):
    t0 = time.perf_counter()
    code = main(["train", "--synthetic", str(RUN_SAMPLES), "--length-range", "4-6", "--seed", str(RUN_SEED),
                 "--epochs", str(RUN_EPOCHS), "--out", str(out)])
    return code, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    code, seconds = train_run(out)
    assert code == 0
    return out, seconds


def metrics_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.slow
def test_criterion_6_desk_scale_training(desk_run):
    out, seconds = desk_run
    report = json.loads((out / "test_eval" / "eval.json").read_text())
    epochs = len(metrics_rows(out / "metrics.csv"))
    ok = (report["char_accuracy"] >= 0.97 and report["word_accuracy"] >= 0.85 and epochs <= 100
          and seconds <= 30 * 60 and report["decoder"] == "greedy")
    check(6, ok, f"{report['n_samples']} held-out samples after {epochs} epochs in {seconds / 60:.1f} min: "
                 f"char {report['char_accuracy']:.4f} (>= 0.97), word {report['word_accuracy']:.4f} (>= 0.85)")


@pytest.mark.slow
def test_criterion_7_loss_decrease(desk_run):
    rows = metrics_rows(desk_run[0] / "metrics.csv")
    best = min(rows, key=lambda r: (float(r["val_loss"]), int(r["epoch"])))
    first, at_best = float(rows[0]["train_loss"]), float(best["train_loss"])
    ratio = at_best / first
    check(7, ratio < 0.25, f"train loss {first:.3f} at epoch 1, {at_best:.4f} at best epoch {best['epoch']} "
                           f"(ratio {ratio:.4f} < 0.25)")


@pytest.mark.slow
def test_criterion_8_determinism(desk_run, tmp_path):
    first = desk_run[0] / "metrics.csv"
    code, _ = train_run(tmp_path)
    assert code == 0
    second = tmp_path / "metrics.csv"
    a, b = metrics_rows(first), metrics_rows(second)
    strip = [{k: v for k, v in r.items() if k != "seconds"} for r in a], \
            [{k: v for k, v in r.items() if k != "seconds"} for r in b]
    same_text = strip[0] == strip[1]
    same_ckpt = (desk_run[0] / "checkpoint.bin").read_bytes() == (tmp_path / "checkpoint.bin").read_bytes()
    check(8, same_text and same_ckpt and len(a) == len(b),
          f"repeat run: {len(a)} metrics.csv rows identical in every column except wall-clock seconds "
          f"({'match' if same_text else 'differ'}); best checkpoint bytes {'match' if same_ckpt else 'differ'}")


@pytest.mark.slow
def test_criterion_9_checkpoint_round_trip(desk_run, tmp_path):
    ckpt = load_checkpoint(desk_run[0] / "checkpoint.bin", ALPHA)
    again = load_checkpoint(save_checkpoint(ckpt, tmp_path / "copy.bin"), ALPHA)
    rng = np.random.default_rng(909)
    identical = 0
    for i in range(10):
        image = synthesize_captcha("".join(rng.choice(list(ALPHA.characters), size=5)), i, ALPHA).image
        with T.no_grad():
            a, b = forward(ckpt.params, image).data, forward(again.params, image).data
        identical += a.tobytes() == b.tobytes()
    check(9, identical == 10, f"{identical}/10 fixed images give bit-identical log-prob sequences after save/load")


@pytest.mark.slow
def test_clean_render_and_beam_regression(desk_run, tmp_path, capsys):
    out = desk_run[0]
    clean = tmp_path / "clean.png"
    Image.fromarray(to_uint8(synthesize_captcha("2b827", 0, ALPHA, clean=True).image)).save(clean)
    capsys.readouterr()
    assert main(["predict", "--checkpoint", str(out / "checkpoint.bin"), str(clean)]) == 0
    predicted = capsys.readouterr().out.strip().split("\t")[1]

    scores = {}
    for decoder in ("greedy", "beam"):
        code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--config", str(out / "resolved_config"),
                     "--split", "test", "--decoder", decoder, "--beam-width", "10", "--out", str(tmp_path / decoder)])
        assert code == 0
        scores[decoder] = json.loads((tmp_path / decoder / "eval.json").read_text())["word_accuracy"]
    capsys.readouterr()
    ok = predicted == "2b827" and scores["beam"] >= scores["greedy"] - 0.02
    check("6b", ok, f"clean '2b827' predicted as {predicted!r}; test word accuracy beam(10) "
                    f"{scores['beam']:.4f} vs greedy {scores['greedy']:.4f} (beam >= greedy - 0.02)")
