"""End-to-end acceptance checks at desk scale.

Trained models come from the session fixtures in conftest.py: two ST-preset
VAEs on 2,000 synthetic squares images (bright and dark), 30 epochs each with
the KL weight ramped over the run, and
one on 300 synthetic ring-layer genes.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from concept_saliency.autodiff import BackpropRule, Tensor, grad_check, ops
from concept_saliency.concepts import (ConceptVector, auc, concept_from_attribute, concept_from_correlation,
                                       concept_score, score_report)
from concept_saliency.data import gen_squares, gen_st_layers, square_mask
from concept_saliency.saliency import (clip_negative, concept_saliency, load_maps, manipulation_trend, normalize,
                                       saliency_batch, save_maps)
from concept_saliency.vae import encode, encode_means, init_model, preset, train

from conftest import record_criterion

GUIDED = BackpropRule.guided()


def square_concept(trained):
    z = encode_means(trained.model, trained.train.samples)
    lab = trained.train.label("square").astype(bool)
    return concept_from_attribute(z[lab], z[~lab], "square")


def positives(trained, n=50):
    te = trained.test
    idx = np.flatnonzero(te.label("square"))[:n]
    return idx, te.samples[idx], te.aux["boxes"][idx]


def clipped_guided(trained, concept, xs):
    return np.maximum(saliency_batch(trained.model, concept, xs, GUIDED), 0)[..., 0]


# -- 1 ----------------------------------------------------------------------------------------

def encoder_net(seed):
    """2 strided convs + dense readout, 64-bit, 8x8x2 input: 2 x 6 x 8 conv then 32 -> 5 dense."""
    rng = np.random.default_rng(seed)
    mk = lambda *s, sc=1.0: Tensor(rng.normal(size=s) * sc, requires_grad=True)  # noqa: E731
    x = mk(1, 8, 8, 2)
    w1, b1 = mk(3, 3, 2, 6, sc=0.4), mk(6, sc=0.1)
    w2, b2 = mk(3, 3, 6, 8, sc=0.3), mk(8, sc=0.1)
    wd, bd = mk(32, 5, sc=0.3), mk(5, sc=0.1)
    zc = Tensor(rng.normal(size=5))

    def build():
        h = ops.relu(ops.conv2d(x, w1, b1, 2, 1))
        h = ops.relu(ops.conv2d(h, w2, b2, 2, 1))
        return ops.sum(ops.dot(ops.dense(ops.flatten(h), wd, bd), zc))

    return build, [x, w1, b1, w2, b2, wd, bd]


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst, checked, n_params = 0.0, 0, 0
    for seed in range(5):
        build, params = encoder_net(seed)
        n_params = sum(p.values.size for p in params)
        res = grad_check(build, params, eps=1e-5, kink_margin=10.0)
        worst, checked = max(worst, res.max_rel_error), checked + res.n_checked
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60 and n_params <= 10_000 and checked > 0
    assert record_criterion(1, ok, f"max rel err {worst:.2e} over {checked} entries, "
                                   f"{n_params} params/net, {elapsed:.1f}s")


# -- 2 ----------------------------------------------------------------------------------------

def test_criterion_2_rectified_tau0_is_guided(bright_model):
    t0 = time.perf_counter()
    m = bright_model.model
    concept = square_concept(bright_model)
    xs = np.random.default_rng(2).uniform(size=(100, 32, 32, 1)).astype(np.float32)
    same = 0
    for x in xs:
        a = concept_saliency(m, concept, x, BackpropRule.rectified(tau=0.0)).raw
        b = concept_saliency(m, concept, x, GUIDED).raw
        same += a.tobytes() == b.tobytes()
    elapsed = time.perf_counter() - t0
    assert record_criterion(2, same == 100 and elapsed < 60, f"{same}/100 bit-identical, {elapsed:.1f}s")


# -- 3 ----------------------------------------------------------------------------------------

def test_criterion_3_separation(bright_model):
    assert len(bright_model.train) == 2000 and len(bright_model.test) == 400
    assert bright_model.model.info.epochs == 30
    rep = score_report(bright_model.model, square_concept(bright_model), bright_model.test, "square")
    assert record_criterion(3, rep.auc >= 0.95, f"held-out AUC {rep.auc:.4f}, gap {rep.gap:.2f} pooled sd")


# -- 4 ----------------------------------------------------------------------------------------

def test_criterion_4_localization(bright_model):
    _, xs, boxes = positives(bright_model)
    maps = clipped_guided(bright_model, square_concept(bright_model), xs)
    k = int(round(0.05 * 32 * 32))
    fracs = []
    for smap, box in zip(maps, boxes):
        top = np.argsort(smap.ravel(), kind="stable")[-k:]
        fracs.append(square_mask(box, 32).ravel()[top].mean())
    mean = float(np.mean(fracs))
    assert record_criterion(4, mean >= 0.31 and len(fracs) == 50,
                            f"{mean:.3f} of top-{k} pixels in square over {len(fracs)} images (area 0.0625)")


# -- 5 ----------------------------------------------------------------------------------------

def in_square_mean(trained):
    _, xs, boxes = positives(trained)
    maps = clipped_guided(trained, square_concept(trained), xs)
    return float(np.mean([normalize(m)[square_mask(b, 32)].mean() for m, b in zip(maps, boxes)]))


def test_criterion_5_dark_feature_failure(bright_model, dark_model):
    rep = score_report(dark_model.model, square_concept(dark_model), dark_model.test, "square")
    bright, dark = in_square_mean(bright_model), in_square_mean(dark_model)
    ok = rep.auc >= 0.95 and dark < 0.5 * bright
    assert record_criterion(5, ok, f"dark AUC {rep.auc:.4f}; in-square clipped saliency dark {dark:.4f} "
                                   f"vs bright {bright:.4f} (ratio {dark / bright:.3f})")


# -- 6 ----------------------------------------------------------------------------------------

def test_criterion_6_manipulation(bright_model):
    m = bright_model.model
    concept = square_concept(bright_model)
    zc = concept.direction.astype(np.float32)
    xs = bright_model.test.samples[:50]
    mu = encode(m, xs).mean.astype(np.float32)
    worst = 0.0
    for a in (-2.0, -1.0, 0.0, 1.0, 2.0):
        a32 = np.float32(a)
        lhs = concept_score(zc, mu + a32 * zc)
        rhs = concept_score(zc, mu) + a32 * (zc @ zc)
        scale = np.abs(mu) @ np.abs(zc) + abs(a) * (zc @ zc)
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / scale)))
    analytic_ok = worst < 16 * np.finfo(np.float32).eps * len(zc)
    mono = [manipulation_trend(m, concept, x)[2] for x in xs]
    frac = float(np.mean(mono))
    assert record_criterion(6, analytic_ok and frac >= 0.8,
                            f"max scaled identity error {worst:.1e}; monotone on {frac:.0%} of 50")


# -- 7 ----------------------------------------------------------------------------------------

def test_criterion_7_st_discovery(st_model):
    m, ds = st_model.model, st_model.train
    tid, tpl = ds.aux["template_id"], ds.aux["templates"]
    z = encode_means(m, ds.samples)
    details, ok = [], True
    for layer in range(3):
        members = np.flatnonzero(tid == layer)
        anchor = int(members[0])
        c = concept_from_correlation(z, [anchor], k=10, name=f"layer{layer}")
        purity = float(np.mean(tid[c.info["members"]] == layer))
        inside = tpl[layer].astype(bool)
        xs = ds.samples[members[1:]]
        maps = np.maximum(saliency_batch(m, c, xs, GUIDED), 0)[..., 0]
        per_in = maps[:, inside].sum() / inside.sum()
        per_out = maps[:, ~inside].sum() / (~inside).sum()
        ratio = per_in / per_out if per_out > 0 else np.inf
        ok &= purity >= 0.9 and ratio >= 2
        details.append(f"layer{layer}: purity {purity:.2f}, in/out {ratio:.1f}x")
    assert record_criterion(7, ok, "; ".join(details))


# -- 8 ----------------------------------------------------------------------------------------

PROPERTY_FAILURES = []


def _prop(name, fn):
    try:
        fn()
    except AssertionError:
        PROPERTY_FAILURES.append(name)
        raise


codes = arrays(np.float64, st.tuples(st.integers(2, 20), st.just(20)), elements=st.floats(-5, 5))


@settings(max_examples=50, deadline=None)
@given(codes, codes, st.floats(0.01, 100))
def test_property_antisymmetry_and_scaling(zp, zn, alpha):
    def body():
        a, b = concept_from_attribute(zp, zn), concept_from_attribute(zn, zp)
        np.testing.assert_array_equal(a.direction, -b.direction)
        z = np.vstack([zp, zn])
        y = np.r_[np.ones(len(zp)), np.zeros(len(zn))]
        s = concept_score(a, z)
        np.testing.assert_array_equal(concept_score(b, z), -s)
        if a.direction.any():
            assert auc(s, y) == auc(alpha * s, y)
            assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-12)
            np.testing.assert_allclose(concept_score(a.scaled(alpha), z), alpha * s, rtol=1e-12, atol=1e-12)
    _prop("antisymmetry/scaling", body)


@settings(max_examples=50, deadline=None)
@given(*(arrays(np.float64, 20, elements=st.floats(-5, 5)) for _ in range(3)), st.floats(-3, 3), st.floats(-3, 3))
def test_property_score_linearity(a, b, z, s, t):
    def body():
        assert concept_score(s * a + t * b, z) == pytest.approx(
            s * concept_score(a, z) + t * concept_score(b, z), rel=1e-9, abs=1e-9)
    _prop("score linearity", body)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_property_vanilla_negation(bright_model, seed):
    def body():
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(32, 32, 1)).astype(np.float32)
        c = ConceptVector(rng.normal(size=20))
        pos = concept_saliency(bright_model.model, c, x).raw
        neg = concept_saliency(bright_model.model, -c, x).raw
        np.testing.assert_array_equal(neg, -pos)
    _prop("vanilla negation", body)


def test_criterion_8_property_suite():
    # runs after the property tests above (file order)
    assert record_criterion(8, not PROPERTY_FAILURES,
                            "all properties held" if not PROPERTY_FAILURES else f"failed: {PROPERTY_FAILURES}")


# -- 9 ----------------------------------------------------------------------------------------

def test_criterion_9_reproducibility(tmp_path):
    def run(tag):
        ds = gen_squares(256, seed=21)
        model = train(init_model(preset("st"), seed=4), ds, epochs=2, batch_size=32, seed=4)
        concept = ConceptVector(np.random.default_rng(0).normal(size=20), "c")
        maps = [concept_saliency(model, concept, ds.samples[i], r) for i in range(4)
                for r in (BackpropRule.vanilla(), GUIDED, BackpropRule.rectified())]
        path = save_maps(maps, tmp_path / tag)
        return ds, model, path

    (d1, m1, p1), (d2, m2, p2) = run("a"), run("b")
    same_data = d1.samples.tobytes() == d2.samples.tobytes() and d1.ids == d2.ids and \
        all(np.array_equal(d1.labels[k], d2.labels[k]) for k in d1.labels)
    same_hist = m1.info.loss_history == m2.info.loss_history
    same_maps = (p1 / "payload.bin").read_bytes() == (p2 / "payload.bin").read_bytes() and \
        (p1 / "manifest.json").read_text() == (p2 / "manifest.json").read_text()
    assert len(load_maps(p1)) == 12
    assert record_criterion(9, same_data and same_hist and same_maps,
                            f"datasets {same_data}, loss histories {same_hist}, saliency containers {same_maps}")
