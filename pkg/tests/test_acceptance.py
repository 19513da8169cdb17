"""Release checklist: thirteen numbered end-to-end acceptance checks.

Each test re-derives its expected values from an independent oracle or
a closed-form hand computation, exercises the library through its
public interface, and prints one ``PASS criterion-NN`` line (visible
under ``pytest -v -s``).  Criteria 6 and 7 train on the full default
synthetic corpus, so this module takes tens of minutes; everything
else finishes in seconds.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from ctl.cam import raw_cam
from ctl.classifier import (ClassProbabilities, FinetuneConfig,
                            build_downstream, evaluate_accuracy, finetune,
                            predict_patch, predict_texture_batch)
from ctl.cli import main as cli_main
from ctl.data import (DatasetManifest, entries_for_patients, entry_key,
                      generate_corpus, split_by_patient)
from ctl.lbp import LbpConfig, extract_texture_map, rotation_invariant
from ctl.metrics import (auc, clopper_pearson, confusion_matrix, micro_f1,
                         wilcoxon_signed_rank)
from ctl.nn import (CheckpointError, load_checkpoint, network_blobs,
                    save_checkpoint)
from ctl.nn.gradcheck import run_suite
from ctl.pretrain import (PretrainConfig, batch_loss, batch_loss_and_grad,
                          load_texture_maps, pretrain)
from ctl.rng import Stream
from ctl.nn import SgdMomentum
from ctl.vote import PatchPredictionMatrix, VoteConfig, cross_vote

DEFAULT_LBP = LbpConfig()


def _report(number, detail):
    print(f"PASS criterion-{number:02d}: {detail}")


def _random_uint8(stream, shape):
    return np.floor(stream.uniform_field(shape) * 256.0).clip(0, 255).astype(np.uint8)


# -- shared training fixtures (full default corpus, timed) ---------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    started = time.monotonic()
    manifest = generate_corpus(tmp_path_factory.mktemp("corpus"), seed=0)
    return manifest, time.monotonic() - started


@pytest.fixture(scope="module")
def texture_cache(corpus):
    manifest, _ = corpus
    started = time.monotonic()
    maps = {entry_key(e): m for e, m in
            zip(manifest.entries,
                load_texture_maps(manifest, manifest.entries, DEFAULT_LBP))}
    return maps, time.monotonic() - started


@pytest.fixture(scope="module")
def data_split(corpus):
    manifest, _ = corpus
    plan = split_by_patient(manifest, 0.8, seed=0)
    return {"train": entries_for_patients(manifest, plan.train_patient_ids),
            "test": entries_for_patients(manifest, plan.test_patient_ids)}


@pytest.fixture(scope="module")
def pretrained(corpus, texture_cache, data_split):
    manifest, _ = corpus
    maps, _ = texture_cache
    train = data_split["train"]
    train_manifest = DatasetManifest(train, manifest.generator_seed,
                                     manifest.patch_size, manifest.root)
    started = time.monotonic()
    network, trajectory = pretrain(
        train_manifest, PretrainConfig(epochs=10, batch_size=16),
        DEFAULT_LBP, seed=0,
        texture_maps=[maps[entry_key(e)] for e in train])
    return {"blobs": network_blobs(network), "trajectory": trajectory,
            "seconds": time.monotonic() - started}


@pytest.fixture(scope="module")
def finetuned(corpus, texture_cache, data_split, pretrained):
    manifest, _ = corpus
    maps, _ = texture_cache
    started = time.monotonic()
    network = build_downstream(seed=1, checkpoint_blobs=pretrained["blobs"])
    finetune(network, manifest, data_split["train"],
             FinetuneConfig(epochs=30, batch_size=16), DEFAULT_LBP, seed=2,
             texture_maps=maps)
    accuracy, probs = evaluate_accuracy(network, manifest, data_split["test"],
                                        DEFAULT_LBP, texture_maps=maps)
    return {"network": network, "accuracy": accuracy, "probs": probs,
            "seconds": time.monotonic() - started}


# -- texture extraction oracle (shares no code with the library) ---------------


def _oracle_offsets(p_count, radius):
    out = []
    for p in range(p_count):
        angle = 2.0 * math.pi * p / p_count
        dy = -radius * math.sin(angle)
        dx = radius * math.cos(angle)
        if abs(dy - round(dy)) < 1e-9:
            dy = float(round(dy))
        if abs(dx - round(dx)) < 1e-9:
            dx = float(round(dx))
        out.append((dy, dx))
    return out


def _oracle_sample(image, y, x):
    y0, x0 = math.floor(y), math.floor(x)
    fy, fx = y - y0, x - x0
    y1 = y0 + (1 if fy > 0 else 0)
    x1 = x0 + (1 if fx > 0 else 0)
    top = image[y0, x0] + fx * (image[y0, x1] - image[y0, x0])
    bot = image[y1, x0] + fx * (image[y1, x1] - image[y1, x0])
    return top + fy * (bot - top)


def _oracle_min_rotation(code, p_count):
    bits = format(code, f"0{p_count}b")
    return min(int(bits[i:] + bits[:i], 2) for i in range(p_count))


def _oracle_code_map(image, p_count, radius):
    image = image.astype(np.float64)
    m = int(math.ceil(radius))
    offsets = _oracle_offsets(p_count, radius)
    h, w = image.shape
    out = np.zeros((h - 2 * m, w - 2 * m), dtype=np.uint64)
    for row in range(m, h - m):
        for col in range(m, w - m):
            center = image[row, col]
            code = 0
            for p, (dy, dx) in enumerate(offsets):
                if _oracle_sample(image, row + dy, col + dx) - center >= 0:
                    code |= 1 << p
            out[row - m, col - m] = _oracle_min_rotation(code, p_count)
    return out


def test_criterion_01_texture_codes_match_scalar_oracle():
    """100 random images across the four (neighbors, radius) settings."""
    started = time.monotonic()
    checked = 0
    for p_count, radius in ((8, 1.0), (8, 2.0), (16, 1.0), (16, 2.0)):
        config = LbpConfig(neighbors=p_count, radius=radius)
        stream = Stream(101, f"accept/lbp/{p_count}/{radius}")
        for _ in range(25):
            h = 8 + int(stream.randint(25))
            w = 8 + int(stream.randint(25))
            image = _random_uint8(stream, (h, w))
            got = extract_texture_map(image, config).codes
            want = _oracle_code_map(image, p_count, radius)
            assert got.shape == want.shape
            assert (got.astype(np.uint64) == want).all()
            checked += 1
    elapsed = time.monotonic() - started
    assert checked == 100
    assert elapsed < 10.0
    _report(1, f"100 texture maps equal the per-pixel oracle ({elapsed:.1f}s)")


def test_criterion_02_code_multiset_survives_quarter_rotation():
    stream = Stream(102, "accept/rot90")
    config = LbpConfig(neighbors=32, radius=4.0)
    image = _random_uint8(stream, (64, 64))
    codes = extract_texture_map(image, config).codes
    rotated = extract_texture_map(np.rot90(image), config).codes
    assert sorted(codes.ravel()) == sorted(rotated.ravel())
    assert (np.rot90(codes) == rotated).all()
    _report(2, "32-neighbor code multiset identical under 90-degree rotation")


def test_criterion_03_worked_rotation_minimum():
    assert rotation_invariant(6, 8) == 3
    assert _oracle_min_rotation(6, 8) == 3
    _report(3, "8-bit code 6 minimizes to 3 over all circular rotations")


# -- contrastive loss -----------------------------------------------------------


def _direct_batch_loss(views, temperature):
    """Direct float64 evaluation over explicit anchors; no vectorization."""
    views = [np.asarray(v, dtype=np.float64) for v in views]
    unit = [v / math.sqrt(float(v @ v)) for v in views]
    total = 0.0
    for i, u in enumerate(unit):
        j = i ^ 1
        terms = [math.exp(float(u @ unit[k]) / temperature)
                 for k in range(len(unit)) if k != i]
        positive = math.exp(float(u @ unit[j]) / temperature)
        total += -math.log(positive / sum(terms))
    return total / len(unit)


def test_criterion_04_contrastive_loss_worked_values_and_gradient():
    stream = Stream(104, "accept/contrastive")

    lone = np.stack([stream.normal_field((3,)), stream.normal_field((3,))])
    assert batch_loss(lone, 0.5) == 0.0
    psi, losses, _ = batch_loss_and_grad(lone, 0.5)
    assert psi == 0.0 and (losses == 0.0).all()

    orthogonal_pairs = np.array([[2.0, 0.0], [0.5, 0.0],
                                 [0.0, 1.0], [0.0, 3.0]])
    value = batch_loss(orthogonal_pairs, 0.5)
    direct = _direct_batch_loss(orthogonal_pairs, 0.5)
    assert direct == pytest.approx(math.log(1.0 + 2.0 * math.exp(-2.0)), abs=1e-12)
    assert abs(value - direct) < 1e-5
    assert abs(value - 0.23946) < 1e-4

    for trial in range(1000):
        pairs = 1 + int(stream.randint(8))
        dim = 2 + int(stream.randint(7))
        views = stream.normal_field((2 * pairs, dim))
        psi, losses, _ = batch_loss_and_grad(views, 0.1 + stream.random())
        assert psi >= 0.0
        assert (losses >= 0.0).all()

    views = stream.normal_field((6, 5))
    _, _, grad = batch_loss_and_grad(views, 0.5)
    fd = np.zeros_like(grad)
    h = 1e-4
    for r in range(views.shape[0]):
        for c in range(views.shape[1]):
            bumped = views.copy()
            bumped[r, c] += h
            up = batch_loss(bumped, 0.5)
            bumped[r, c] -= 2 * h
            down = batch_loss(bumped, 0.5)
            fd[r, c] = (up - down) / (2 * h)
    rel = np.linalg.norm(fd - grad) / np.linalg.norm(fd)
    assert rel < 1e-4
    _report(4, f"worked values, 1000 non-negative batches, gradient rel err {rel:.1e}")


def test_criterion_05_every_layer_passes_finite_difference_check():
    started = time.monotonic()
    results = run_suite(seed=2024, samples=24)
    elapsed = time.monotonic() - started
    names = [name for name, _, _ in results]
    assert "ctl-small-composed" in names
    for name, error, ok in results:
        assert ok, f"{name} finite-difference error {error:.3e}"
    assert elapsed < 60.0
    _report(5, f"{len(results)} gradient checks under 1e-4 ({elapsed:.1f}s)")


# -- training on the default corpus ---------------------------------------------


def test_criterion_06_training_smoke_reaches_85_percent(
        corpus, texture_cache, pretrained, finetuned):
    wall = (corpus[1] + texture_cache[1] + pretrained["seconds"]
            + finetuned["seconds"])
    accuracy = finetuned["accuracy"]
    assert accuracy >= 0.85
    assert wall < 900.0
    _report(6, f"five-class test accuracy {accuracy:.4f} in {wall:.0f}s")


def test_criterion_07_pretraining_helps_at_quarter_label_budget(
        corpus, pretrained):
    from ctl.sweep import label_fraction_study
    manifest, _ = corpus
    result = label_fraction_study(manifest, pretrained["blobs"],
                                  fractions=[0.25], seeds=[0, 1, 2],
                                  lbp_config=DEFAULT_LBP,
                                  finetune_epochs=30, batch_size=16)
    by_init = {row["init"]: row["accuracy_mean"] for row in result.rows}
    assert by_init["ctl"] >= by_init["random"]
    _report(7, f"accuracy at fraction 0.25: contrastive init {by_init['ctl']:.4f}"
               f" >= random init {by_init['random']:.4f} (3 paired seeds)")


# -- cross-shaped voting ----------------------------------------------------------


def _oracle_positive(probs, threshold, run_length):
    hot = probs >= threshold
    rows, cols = hot.shape
    for i in range(rows):
        for j in range(cols):
            if not hot[i, j]:
                continue
            up = i
            while up > 0 and hot[up - 1, j]:
                up -= 1
            down = i
            while down + 1 < rows and hot[down + 1, j]:
                down += 1
            if down - up + 1 < run_length:
                continue
            left = j
            while left > 0 and hot[i, left - 1]:
                left -= 1
            right = j
            while right + 1 < cols and hot[i, right + 1]:
                right += 1
            if right - left + 1 >= run_length:
                return True
    return False


def test_criterion_08_vote_worked_matrix_oracle_and_monotonicity():
    worked = PatchPredictionMatrix(np.array([
        [0.1, 0.9, 0.2, 0.3],
        [0.2, 0.9, 0.1, 0.2],
        [0.9, 0.9, 0.9, 0.1],
        [0.1, 0.2, 0.3, 0.2],
        [0.2, 0.1, 0.2, 0.3],
        [0.3, 0.2, 0.1, 0.1],
    ]))
    result = cross_vote(worked, VoteConfig(0.8, 3))
    assert result.positive
    assert sorted(result.witness) == [(0, 1), (1, 1), (2, 0), (2, 1), (2, 2)]

    stream = Stream(108, "accept/vote")
    for trial in range(10000):
        rows = 1 + int(stream.randint(20))
        cols = 1 + int(stream.randint(20))
        hot_rate = 0.2 + 0.6 * stream.random()
        probs = np.where(stream.uniform_field((rows, cols)) < hot_rate,
                         0.85, 0.15)
        threshold = 0.3 + 0.4 * stream.random()
        run_length = 2 + int(stream.randint(3))
        config = VoteConfig(threshold, run_length)
        got = cross_vote(PatchPredictionMatrix(probs), config).positive
        assert got == _oracle_positive(probs, threshold, run_length)

    flips = 0
    config = VoteConfig(0.6, 3)
    for trial in range(1000):
        probs = stream.uniform_field((8, 8))
        before = cross_vote(PatchPredictionMatrix(probs), config).positive
        hotter = probs.copy()
        r = int(stream.randint(8))
        c = int(stream.randint(8))
        hotter[r, c] = min(1.0, hotter[r, c] + stream.random())
        after = cross_vote(PatchPredictionMatrix(hotter), config).positive
        if before:
            assert after, "raising a cell must never un-fire the vote"
        flips += int(after != before)
    assert flips > 0
    _report(8, "worked vector, 10000 oracle matrices, 1000 monotonicity trials")


# -- metrics ----------------------------------------------------------------------


def _auc_pair_oracle(scores, truths):
    pos = [s for s, t in zip(scores, truths) if t]
    neg = [s for s, t in zip(scores, truths) if not t]
    wins = ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def _wilcoxon_enumeration_oracle(differences):
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    mags = np.abs(d)
    order = np.argsort(mags, kind="stable")
    ranks = np.empty(len(d))
    i = 0
    while i < len(d):
        j = i
        while j < len(d) and mags[order[j]] == mags[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    w_obs = ranks[d < 0].sum()
    total = ranks.sum()
    dist_obs = abs(2 * w_obs - total)
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if abs(2 * w - total) >= dist_obs - 1e-9:
            hits += 1
    return w_obs, hits / 2.0 ** len(d)


def test_criterion_09_metric_oracles():
    stream = Stream(109, "accept/metrics")

    worst = 0.0
    for trial in range(100):
        scores = np.round(stream.uniform_field((200,)), 1)  # forced ties
        truths = stream.uniform_field((200,)) < 0.4
        if truths.all() or not truths.any():
            truths[0] = not truths[0]
        worst = max(worst, abs(auc(scores, truths)
                               - _auc_pair_oracle(scores, truths)))
    assert worst < 1e-9

    for trial in range(100):
        n = 20 + int(stream.randint(180))
        truths = [int(stream.randint(5)) for _ in range(n)]
        preds = [int(stream.randint(5)) for _ in range(n)]
        matrix = confusion_matrix(truths, preds, 5)
        accuracy = np.trace(matrix) / matrix.sum()
        assert micro_f1(matrix) == accuracy

    low, high = clopper_pearson(54, 59)
    assert abs(low - 0.8132) <= 5e-4
    assert abs(high - 0.9719) <= 5e-4

    for trial in range(25):
        n = 5 + int(stream.randint(8))
        diffs = [stream.normal(0.0, 1.0) for _ in range(n)]
        diffs = [round(d, 1) or 0.05 for d in diffs]  # ties, no zeros
        w, p = wilcoxon_signed_rank(diffs)
        w_oracle, p_oracle = _wilcoxon_enumeration_oracle(diffs)
        assert w == w_oracle
        assert p == p_oracle
    _report(9, f"auc within {worst:.1e}; micro-F1 identity; interval bounds;"
               " exact signed-rank enumeration")


def test_criterion_10_high_risk_probability_complements(finetuned):
    probs = finetuned["probs"]
    assert probs.shape[1] == 5
    for row in probs:
        cp = ClassProbabilities.from_probs(row)
        assert cp.high_risk_prob == pytest.approx(row[3] + row[4], abs=1e-12)
        low_risk = row[0] + row[1] + row[2]
        assert cp.high_risk_prob + low_risk == pytest.approx(1.0, abs=1e-6)

    stream = Stream(110, "accept/highrisk")
    patch = _random_uint8(stream, (32, 32))
    result = predict_patch(finetuned["network"], patch, LbpConfig(8, 1.0))
    assert result.high_risk_prob == pytest.approx(result.p[3] + result.p[4],
                                                  abs=1e-12)
    _report(10, f"identity held on all {len(probs)} held-out predictions")


# -- end-to-end determinism --------------------------------------------------------


def _run_pipeline(root, capsys):
    """gen-data -> pretrain -> finetune -> predict -> predict-volume -> vote."""
    fast = ["--lbp-p", "8", "--lbp-r", "1"]
    corpus_dir = root / "corpus"
    manifest = str(corpus_dir / "manifest.json")
    pre = root / "pre.ckpt"
    fin = root / "fin.ckpt"
    matrix = root / "matrix.csv"

    transcript = {}
    assert cli_main(["gen-data", "--seed", "9", "--patients", "2",
                     "--frames", "2", "--out", str(corpus_dir)]) == 0
    assert capsys.readouterr().out.startswith("wrote 60 patches")

    assert cli_main(["pretrain", "--manifest", manifest, "--out", str(pre),
                     "--seed", "3", "--epochs", "2", "--batch", "8"] + fast) == 0
    transcript["pretrain"] = capsys.readouterr().out

    assert cli_main(["finetune", "--manifest", manifest, "--init", str(pre),
                     "--out", str(fin), "--seed", "4", "--epochs", "3",
                     "--batch", "8"] + fast) == 0
    transcript["finetune"] = capsys.readouterr().out

    patch = sorted((corpus_dir / "patches").rglob("*.pgm"))[7]
    assert cli_main(["predict", "--model", str(fin),
                     "--image", str(patch)] + fast) == 0
    transcript["predict"] = capsys.readouterr().out

    volume_dir = sorted((corpus_dir / "frames").iterdir())[0]
    assert cli_main(["predict-volume", "--model", str(fin),
                     "--frames", str(volume_dir), "--out", str(matrix),
                     "--patch-size", "64", "--stride", "32",
                     "--threshold", "0.5", "--run", "2"] + fast) == 0
    transcript["predict-volume"] = capsys.readouterr().out

    assert cli_main(["vote", "--matrix", str(matrix),
                     "--threshold", "0.5", "--run", "2"]) == 0
    transcript["vote"] = capsys.readouterr().out

    artifacts = {name: (root / name).read_bytes() if (root / name).exists()
                 else (corpus_dir / name).read_bytes()
                 for name in ("pre.ckpt", "fin.ckpt", "matrix.csv",
                              "manifest.json")}
    artifacts["pre.loss.csv"] = pre.with_suffix(".ckpt.loss.csv").read_bytes()
    artifacts["matrix.ppm"] = matrix.with_suffix(".ppm").read_bytes()
    return transcript, artifacts


def test_criterion_11_pipeline_is_bit_identical_across_runs(tmp_path, capsys):
    first = _run_pipeline(tmp_path / "run1", capsys)
    second = _run_pipeline(tmp_path / "run2", capsys)
    assert first[0] == second[0], "stdout reports diverged"
    for name in first[1]:
        assert first[1][name] == second[1][name], f"{name} diverged"
    _report(11, "checkpoints, matrices, and reports byte-identical")


# -- class activation maps ---------------------------------------------------------


def test_criterion_12_activation_map_consistency():
    stream = Stream(112, "accept/cam")
    network = build_downstream(seed=21)
    weights = dict(network.head.params())["linear/weight"].data
    bias = dict(network.head.params())["linear/bias"].data
    config = LbpConfig(8, 1.0)

    worst_gap = 0.0
    for trial in range(100):
        patch = _random_uint8(stream, (26, 26))
        texture = extract_texture_map(patch, config)
        x = texture.normalized[None, None, :, :].astype(np.float32)
        logits = network.forward(x, training=False)[0]
        feats = network.feature_maps[0].astype(np.float64)
        class_index = int(stream.randint(5))
        raw = raw_cam(feats, weights[class_index].astype(np.float64))
        gap = float(raw.mean())
        worst_gap = max(worst_gap,
                        abs(gap - (float(logits[class_index])
                                   - float(bias[class_index]))))
    assert worst_gap < 1e-4

    feats = stream.normal_field((weights.shape[1], 6, 6))
    w1 = stream.normal_field((weights.shape[1],))
    w2 = stream.normal_field((weights.shape[1],))
    combined = raw_cam(feats, 2.0 * w1 - 0.5 * w2)
    direct = 2.0 * raw_cam(feats, w1) - 0.5 * raw_cam(feats, w2)
    assert np.abs(combined - direct).max() < 1e-5
    _report(12, f"pooled map equals logit minus bias (max gap {worst_gap:.1e});"
                " linear in head weights")


# -- checkpoint format ---------------------------------------------------------------


def test_criterion_13_checkpoint_round_trip_and_rejection(tmp_path):
    stream = Stream(113, "accept/checkpoint")
    blobs = {
        "scalar": np.float32(stream.normal(0.0, 1.0)),
        "enc/w": stream.normal_field((4, 3, 3, 3)).astype(np.float32),
        "head/b": stream.normal_field((5,)).astype(np.float32),
    }
    network = build_downstream(seed=5)
    optimizer = SgdMomentum(network.params(), learning_rate=1e-2)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, blobs, seed=2**63 - 1,
                    optimizer=optimizer.state_blobs())

    loaded = load_checkpoint(path)
    assert loaded.seed == 2**63 - 1
    for name, arr in blobs.items():
        got = loaded.blobs[name]
        want = np.asarray(arr, dtype=np.float32)
        assert got.shape == want.shape
        assert got.dtype == np.float32
        assert got.tobytes() == want.tobytes()
    assert loaded.optimizer  # momentum state survived

    data = path.read_bytes()
    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)

    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    bad_sum = tmp_path / "flip.ckpt"
    bad_sum.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(bad_sum)
    assert err.value.code == "bad-checksum"

    foreign = tmp_path / "foreign.ckpt"
    foreign.write_bytes(b"PK\x03\x04 definitely a zip file")
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(foreign)
    assert err.value.code == "bad-magic"
    _report(13, "bit-exact round trip; truncation, corruption, and foreign"
                " files rejected")
