import numpy as np
import pytest
from sklearn.base import clone

from mixsup.data import generate_task, stack_images, stack_labels, stack_partial
from mixsup.estimator import MixedSupervisedSegmenter, NumericalAbort, labels_with_partial


@pytest.fixture(scope="module")
def toy():
    s = generate_task(0, 12, 16, 16)
    full, weak, val = s[:3], s[3:7], s[7:]
    X = stack_images(full + weak)
    y = labels_with_partial(stack_labels(full), stack_partial(weak))
    return X, y, stack_images(val), stack_labels(val), stack_partial(full)


def small(**kw):
    base = dict(levels=2, base_channels=2, epochs=3, batch_size=4, ent_start=0)
    base.update(kw)
    return MixedSupervisedSegmenter(**base)


def test_sklearn_params_and_clone():
    est = small(lambda_kd=7.0)
    assert est.get_params()["lambda_kd"] == 7.0
    c = clone(est).set_params(variant="kl")
    assert c.variant == "kl" and est.variant == "kl_ent"


def test_fit_predict_score(toy):
    X, y, Xv, yv, pf = toy
    est = small().fit(X, y, Xv, yv, partial_full=pf)
    assert est.predict(Xv).shape == yv.shape
    assert est.predict_proba(Xv).shape == (len(Xv), 2, 16, 16)
    assert est.predict_ensemble(Xv).shape == yv.shape
    assert 0.0 <= est.score(Xv, yv) <= 1.0
    assert len(est.curve_) == est.n_epochs_ == 3
    assert set(est.curve_[0]) >= {"L_s", "L_w", "L_kd", "L_ent", "val_dsc"}


def test_fit_is_deterministic(toy):
    X, y, Xv, yv, pf = toy
    a = small().fit(X, y, Xv, yv, partial_full=pf)
    b = small().fit(X, y, Xv, yv, partial_full=pf)
    assert a.curve_ == b.curve_


def test_entropy_waits_for_ent_start(toy):
    X, y, Xv, yv, pf = toy
    est = small(ent_start=2).fit(X, y, Xv, yv, partial_full=pf)
    assert [r["L_ent"] == 0.0 for r in est.curve_] == [True, True, False]


@pytest.mark.parametrize("variant,zero", [("decoupled", ("L_kd", "L_ent")), ("kl", ("L_ent",)),
                                          ("single", ("L_kd", "L_ent")),
                                          ("lower_bound", ("L_w", "L_kd", "L_ent"))])
def test_variants_log_only_their_terms(toy, variant, zero):
    X, y, Xv, yv, pf = toy
    est = small(variant=variant).fit(X, y, Xv, yv, partial_full=pf)
    for rec in est.curve_:
        for k in zero:
            assert rec[k] == 0.0
    assert est.branches == (("top",) if variant in ("single", "lower_bound") else ("top", "bottom"))


def test_upper_bound_rejects_partial_images(toy):
    X, y, *_ = toy
    with pytest.raises(ValueError):
        small(variant="upper_bound").fit(X, y)


def test_needs_full_images(toy):
    X, y, *_ = toy
    with pytest.raises(ValueError):
        small().fit(X[3:], y[3:])


def test_bad_params(toy):
    X, y, *_ = toy
    with pytest.raises(ValueError):
        small(variant="nope").fit(X, y)
    with pytest.raises(ValueError):
        small(optimizer="rmsprop").fit(X, y)


def test_nan_aborts_with_curve(toy, monkeypatch):
    X, y, Xv, yv, pf = toy
    est = small(epochs=5)
    real = MixedSupervisedSegmenter._loss
    calls = []

    def poisoned(self, model, batch, weights):
        jl = real(self, model, batch, weights)
        calls.append(1)
        if len(calls) > 2:
            jl.total = jl.total * float("nan")
        return jl

    monkeypatch.setattr(MixedSupervisedSegmenter, "_loss", poisoned)
    with pytest.raises(NumericalAbort) as info:
        est.fit(X, y, Xv, yv, partial_full=pf)
    # one step per epoch here, so the third step is epoch 3
    assert info.value.epoch == 3
    assert len(info.value.curve) == 2
    assert np.isfinite(est.model_.predict_proba(Xv)).all()


def test_term_gradients_routing(toy):
    X, y, Xv, yv, pf = toy
    est = small(variant="decoupled").fit(X, y, partial_full=pf)
    g = est.term_gradients(X, y, pf)
    assert all(v == 0.0 for v in g["L_kd"].values())
    assert all(v == 0.0 for v in g["L_ent"].values())
    assert g["L_w"]["bottom"] > 0 and g["L_w"]["top"] == 0.0
    assert g["L_s"]["bottom"] == 0.0


def test_adam_runs(toy):
    X, y, Xv, yv, pf = toy
    est = small(optimizer="adam", lr=1e-3).fit(X, y, Xv, yv, partial_full=pf)
    assert np.isfinite(est.curve_[-1]["total"])


def test_eval_every_skips_validation(toy):
    X, y, Xv, yv, pf = toy
    est = small(eval_every=2).fit(X, y, Xv, yv, partial_full=pf)
    vals = [r["val_dsc"] for r in est.curve_]
    assert np.isnan(vals[0]) and np.isfinite(vals[1]) and np.isfinite(vals[2])


def test_clip_norm_bounds_the_step():
    rng = np.random.default_rng(0)
    X = rng.random((4, 1, 8, 8))
    y = (X[:, 0] > 0.5).astype(int)
    kw = dict(variant="lower_bound", levels=2, base_channels=2, epochs=3, batch_size=2, random_state=0)
    free = MixedSupervisedSegmenter(clip_norm=None, **kw).fit(X, y)
    tight = MixedSupervisedSegmenter(clip_norm=1e-6, **kw).fit(X, y)
    assert max(free.grad_norms_) > 1e-6
    # the first gradient is identical; after that the clipped run barely moves
    assert free.grad_norms_[0] == tight.grad_norms_[0]
    assert abs(tight.curve_[-1]["L_s"] - tight.curve_[0]["L_s"]) < abs(free.curve_[-1]["L_s"] - free.curve_[0]["L_s"])
