import numpy as np
import pytest

from ctta import adapt, nn, stream
from ctta import tensor as T
from ctta.adapt import AdaptConfig, Adapter, AugmentSettings, Method
from ctta.errors import ConfigError, ContractError
from ctta.nn import StatsMode


def _corrupted(kind="gaussian_noise", n=16, seed=0, num_classes=4):
    d = stream.make_glyph_dataset(n, num_classes, 100 + seed)
    return stream.corrupt_batch(d.images, kind, 5, np.random.default_rng(seed)), d.labels


def _norm_free(model):
    return {n: p.data.copy() for n, p in model.params.items() if not p.is_norm_affine}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_defaults():
    cfg = AdaptConfig()
    assert (cfg.alpha, cfg.restore_p, cfg.p_th, cfg.n_aug, cfg.lr) == (0.999, 0.01, 0.92, 32, 1e-3)
    assert cfg.stats_mode is StatsMode.USE_CURRENT_BATCH
    assert cfg.predict_from == "refined"


def test_n_aug_zero_with_aug_avg_is_actionable():
    with pytest.raises(ConfigError, match="enable_aug_avg"):
        AdaptConfig(n_aug=0)
    assert AdaptConfig(n_aug=0, enable_aug_avg=False).n_aug == 0


@pytest.mark.parametrize("field,value", [("alpha", 1.5), ("restore_p", -0.1), ("p_th", 2.0), ("lr", 0.0), ("method", "dropout")])
def test_invalid_values(field, value):
    with pytest.raises(ConfigError):
        AdaptConfig(**{field: value})


# ---------------------------------------------------------------------------
# consistency loss
# ---------------------------------------------------------------------------


def test_loss_one_hot_vs_uniform_is_log_k():
    target = np.eye(5, dtype=np.float32)[[2, 0]]
    loss = adapt.consistency_loss(target, T.Tensor(np.zeros((2, 5))))
    np.testing.assert_allclose(loss.item(), np.log(5), rtol=1e-6)


def test_loss_self_target_is_entropy(rng):
    z = rng.normal(size=(4, 6)).astype(np.float32)
    p = T.softmax_np(z)
    loss = adapt.consistency_loss(p, T.Tensor(z)).item()
    np.testing.assert_allclose(loss, -np.mean((p * np.log(p)).sum(1)), rtol=1e-5)
    other = T.softmax_np(rng.normal(size=(4, 6)))
    assert adapt.consistency_loss(other, T.Tensor(z)).item() >= 0


def test_loss_gradient_reaches_student_only(rng):
    target = T.Tensor(T.softmax_np(rng.normal(size=(3, 4))), requires_grad=True)
    z = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(adapt.consistency_loss(target, z))
    assert z.grad is not None and target.grad is None


def test_loss_class_mismatch():
    from ctta.errors import ShapeError

    with pytest.raises(ShapeError):
        adapt.consistency_loss(np.ones((2, 3)) / 3, T.Tensor(np.zeros((2, 4))))


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


def _pair(seed_a=0, seed_b=1):
    return nn.build_model("cnn-small", 4, seed_a), nn.build_model("cnn-small", 4, seed_b)


def test_ema_alpha_one_keeps_teacher():
    teacher, student = _pair()
    before = nn.snapshot(teacher)
    adapt.ema_update(teacher, student, 1.0)
    for n, p in teacher.params.items():
        assert p.data.tobytes() == before.params[n].data.tobytes()


def test_ema_alpha_zero_copies_student():
    teacher, student = _pair()
    adapt.ema_update(teacher, student, 0.0)
    for n, p in teacher.params.items():
        assert p.data.tobytes() == student.params[n].data.tobytes()


def test_ema_scalar_arithmetic():
    teacher, student = _pair()
    for p in teacher.params.values():
        p.data[...] = 1.0
    for p in student.params.values():
        p.data[...] = 0.0
    adapt.ema_update(teacher, student, 0.9)
    for p in teacher.params.values():
        np.testing.assert_allclose(p.data, 0.9, atol=1e-7)


def test_ema_copies_buffers():
    teacher, student = _pair()
    student.buffers["bn1.running_mean"][...] = 3.0
    adapt.ema_update(teacher, student, 0.5)
    np.testing.assert_array_equal(teacher.buffers["bn1.running_mean"], 3.0)


def test_ema_architecture_mismatch():
    with pytest.raises(ContractError):
        adapt.ema_update(nn.build_model("cnn-small", 4, 0), nn.build_model("mlp-small", 4, 0), 0.5)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def test_identity_augmentation_is_exact(rng):
    x = rng.uniform(0, 1, (5, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(adapt.augment(x, rng, AugmentSettings.identity()), x)


def test_augment_range_and_randomness():
    x = stream.make_glyph_dataset(8, 4, 0).images
    a = adapt.augment(x, np.random.default_rng(1))
    b = adapt.augment(x, np.random.default_rng(2))
    assert a.shape == x.shape and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, b)


def test_augment_deterministic_given_rng():
    x = stream.make_glyph_dataset(8, 4, 0).images
    assert adapt.augment(x, np.random.default_rng(3)).tobytes() == adapt.augment(x, np.random.default_rng(3)).tobytes()


# ---------------------------------------------------------------------------
# refined pseudo-labels
# ---------------------------------------------------------------------------


def test_gate_threshold_zero_gives_direct_prediction(small_source):
    x, _ = _corrupted()
    cfg = AdaptConfig(p_th=0.0)
    state = adapt.init_state(small_source, cfg)
    pl = adapt.refined_pseudo_label(state, x, cfg, np.random.default_rng(0))
    assert not pl.used_augmentation.any()
    assert pl.probs.tobytes() == pl.direct_probs.tobytes()


def test_identity_augmentations_equal_direct_prediction(small_source):
    x, _ = _corrupted()
    cfg = AdaptConfig(p_th=1.0, n_aug=4, augment=AugmentSettings.identity())
    state = adapt.init_state(small_source, cfg)
    pl = adapt.refined_pseudo_label(state, x, cfg, np.random.default_rng(0))
    assert pl.used_augmentation.all()
    np.testing.assert_allclose(pl.probs, pl.direct_probs, atol=1e-6)


def test_gate_partition_on_mixed_batch(small_source):
    clean = stream.make_glyph_dataset(8, 4, 5).images
    x = np.concatenate([clean, _corrupted("fog", 8, 1)[0]])
    cfg = AdaptConfig(n_aug=4, p_th=0.9)
    state = adapt.init_state(small_source, cfg)
    pl = adapt.refined_pseudo_label(state, x, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(pl.used_augmentation, pl.source_confidence < cfg.p_th)
    keep = ~pl.used_augmentation
    assert pl.probs[keep].tobytes() == pl.direct_probs[keep].tobytes()
    np.testing.assert_allclose(pl.probs.sum(1), 1.0, atol=1e-5)


def test_clean_vs_corrupted_gate(source10):
    # the source model scores items independently here (running statistics)
    clean = stream.make_glyph_dataset(20, 10, 7).images
    fog = stream.corrupt_batch(stream.make_glyph_dataset(20, 10, 8).images, "fog", 5, np.random.default_rng(0))
    cfg = AdaptConfig(n_aug=4, source_stats_mode=StatsMode.USE_RUNNING)
    conf_clean = nn.predict_proba(source10, clean, StatsMode.USE_RUNNING).max(1)
    conf_fog = nn.predict_proba(source10, fog, StatsMode.USE_RUNNING).max(1)
    i = int(conf_clean.argmax())
    j = int(conf_fog.argmin())
    assert conf_clean[i] - conf_fog[j] >= 0.3
    state = adapt.init_state(source10, cfg)
    pl = adapt.refined_pseudo_label(state, np.stack([clean[i], fog[j]]), cfg, np.random.default_rng(0))
    assert pl.used_augmentation.tolist() == [False, True]


# ---------------------------------------------------------------------------
# stochastic restore
# ---------------------------------------------------------------------------


def _drifted(source, seed=0):
    student = nn.snapshot(source)
    rng = np.random.default_rng(seed)
    for p in student.params.values():
        p.data[...] += rng.normal(size=p.data.shape).astype(np.float32)
    return student


def test_restore_p_zero_is_noop(small_source):
    student = _drifted(small_source)
    before = nn.snapshot(student)
    mask = adapt.stochastic_restore(student, small_source, 0.0, np.random.default_rng(0))
    assert mask.restored == 0 and nn.states_equal(student, before)


def test_restore_p_one_is_full(small_source):
    student = _drifted(small_source)
    adapt.stochastic_restore(student, small_source, 1.0, np.random.default_rng(0))
    assert nn.states_equal(student, small_source, include_buffers=False)


def test_restore_entries_are_old_or_source(small_source):
    student = _drifted(small_source)
    before = nn.snapshot(student)
    mask = adapt.stochastic_restore(student, small_source, 0.3, np.random.default_rng(0))
    for n, p in student.params.items():
        m = mask.masks[n]
        np.testing.assert_array_equal(p.data[m], small_source.params[n].data[m])
        np.testing.assert_array_equal(p.data[~m], before.params[n].data[~m])


@pytest.mark.parametrize("scope,expect_norm,expect_weights", [("weights", False, True), ("norm_affine", True, False)])
def test_restore_scope(small_source, scope, expect_norm, expect_weights):
    student = _drifted(small_source)
    mask = adapt.stochastic_restore(student, small_source, 1.0, np.random.default_rng(0), scope)
    for n, p in student.params.items():
        restored = np.array_equal(p.data, small_source.params[n].data)
        assert restored == (expect_norm if p.is_norm_affine else expect_weights)
        assert (n in mask.masks) == restored


def test_restore_rate_binomial():
    big = nn.Parameter("w", T.Tensor(np.ones(100_000), requires_grad=True))
    src = nn.Parameter("w", T.Tensor(np.zeros(100_000)))
    student = nn.ModelState("x", 1, {"w": big}, {})
    source = nn.ModelState("x", 1, {"w": src}, {})
    rng = np.random.default_rng(0)
    bound = 3 * np.sqrt(0.01 * 0.99 / 100_000)
    for _ in range(20):
        big.value.data[...] = 1.0
        frac = adapt.stochastic_restore(student, source, 0.01, rng).fraction
        assert abs(frac - 0.01) <= bound


def test_restore_invalid_p(small_source):
    with pytest.raises(ConfigError):
        adapt.stochastic_restore(nn.snapshot(small_source), small_source, 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# CoTTA step
# ---------------------------------------------------------------------------


def test_init_state_all_equal(small_source):
    state = adapt.init_state(small_source, AdaptConfig())
    assert nn.states_equal(state.student, state.teacher) and nn.states_equal(state.teacher, state.source)
    assert state.step_counter == 0


def test_cotta_step_teacher_is_ema_of_post_step_student(small_source):
    x, _ = _corrupted()
    cfg = AdaptConfig(n_aug=4, alpha=0.9, restore_p=0.05)
    state = adapt.init_state(small_source, cfg)
    source_before = nn.snapshot(state.source)
    rng, rrng = adapt._rngs(0)
    for step in range(3):
        teacher_prev = nn.snapshot(state.teacher)
        captured = {}
        orig = adapt.ema_update

        def spy(teacher, student, alpha):
            captured["student"] = nn.snapshot(student)
            orig(teacher, student, alpha)

        adapt.ema_update = spy
        try:
            out = adapt.cotta_step(state, x, cfg, rng, rrng)
        finally:
            adapt.ema_update = orig
        for n, p in state.teacher.params.items():
            expect = cfg.alpha * teacher_prev.params[n].data + (1 - cfg.alpha) * captured["student"].params[n].data
            np.testing.assert_allclose(p.data, expect, atol=1e-7, rtol=0)
        assert state.step_counter == step + 1
        np.testing.assert_allclose(out.probs.sum(1), 1.0, atol=1e-5)
    assert nn.states_equal(state.source, source_before)


def test_cotta_updates_all_parameters(small_source):
    x, _ = _corrupted()
    cfg = AdaptConfig(n_aug=2, enable_restore=False)
    state = adapt.init_state(small_source, cfg)
    rng, rrng = adapt._rngs(0)
    adapt.cotta_step(state, x, cfg, rng, rrng)
    for n, p in state.student.params.items():
        assert not np.array_equal(p.data, small_source.params[n].data), n


def test_restore_p_zero_equals_restore_disabled(small_source):
    x, _ = _corrupted()
    outs = []
    for cfg in (AdaptConfig(n_aug=2, restore_p=0.0), AdaptConfig(n_aug=2, enable_restore=False)):
        a = Adapter(small_source, cfg)
        outs.append([a.step(x).probs for _ in range(3)] + [a.state.student])
    for p, q in zip(outs[0][:3], outs[1][:3]):
        assert p.tobytes() == q.tobytes()
    assert nn.states_equal(outs[0][3], outs[1][3])


def test_all_toggles_off_is_hard_self_training(small_source):
    x, _ = _corrupted()
    cfg = AdaptConfig(enable_weight_avg=False, enable_aug_avg=False, enable_restore=False, hard_labels=True, n_aug=0)
    state = adapt.init_state(small_source, cfg)
    probs = nn.predict_proba(state.student, x, cfg.stats_mode)
    expected_loss = nn.cross_entropy(nn.forward(state.student, x, cfg.stats_mode), probs.argmax(1)).item()
    state.student.zero_grad()
    rng, rrng = adapt._rngs(0)
    out = adapt.cotta_step(state, x, cfg, rng, rrng)
    np.testing.assert_allclose(out.loss, expected_loss, rtol=1e-6)
    np.testing.assert_array_equal(out.probs, probs)


def test_predict_from_teacher_direct(small_source):
    x, _ = _corrupted()
    cfg = AdaptConfig(n_aug=2, p_th=1.0, predict_from="teacher_direct")
    state = adapt.init_state(small_source, cfg)
    direct = nn.predict_proba(state.teacher, x, cfg.stats_mode)
    out = adapt.cotta_step(state, x, cfg, *adapt._rngs(0))
    np.testing.assert_array_equal(out.probs, direct)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("method", [Method.TENT_CONTINUAL, Method.PSEUDO_LABEL])
def test_norm_only_methods_touch_only_affine(small_source, method):
    x, _ = _corrupted()
    a = Adapter(small_source, AdaptConfig(method=method))
    before = _norm_free(a.state.student)
    affine_before = {p.name: p.data.copy() for p in a.state.student.norm_affine()}
    for _ in range(3):
        a.step(x)
    for n, v in _norm_free(a.state.student).items():
        assert v.tobytes() == before[n].tobytes()
    assert any(not np.array_equal(p.data, affine_before[p.name]) for p in a.state.student.norm_affine())


@pytest.mark.parametrize("method", [Method.SOURCE, Method.BN_STATS])
def test_forward_only_methods_mutate_nothing(small_source, method):
    x, _ = _corrupted()
    a = Adapter(small_source, AdaptConfig(method=method))
    before = nn.snapshot(a.state.student)
    for _ in range(3):
        a.step(x)
    assert nn.states_equal(a.state.student, before)
    assert nn.states_equal(a.state.source, small_source)


def test_tent_entropy_descent(small_source):
    rng = np.random.default_rng(0)
    ok = 0
    for trial in range(50):
        kind = stream.ALL_KINDS[trial % len(stream.ALL_KINDS)]
        x, _ = _corrupted(kind, 16, trial)
        cfg = AdaptConfig(method=Method.TENT_CONTINUAL, lr=1e-4)
        state = adapt.init_state(small_source, cfg)
        before = nn.entropy_loss(nn.forward(state.student, x)).item()
        state.student.zero_grad()
        adapt.tent_step(state, x, cfg)
        with T.no_grad():
            after = nn.entropy_loss(nn.forward(state.student, x)).item()
        ok += after <= before
    _ = rng
    assert ok >= 45


def test_entropy_floor_for_confident_output():
    z = np.zeros((2, 4), dtype=np.float32)
    z[:, 1] = 50.0
    assert nn.entropy_loss(T.Tensor(z)).item() < 1e-6


def test_pseudo_label_loss_closed_form(small_source):
    x, _ = _corrupted()
    cfg = AdaptConfig(method=Method.PSEUDO_LABEL)
    state = adapt.init_state(small_source, cfg)
    p = nn.predict_proba(state.student, x)
    out = adapt.pseudo_label_step(state, x, cfg)
    np.testing.assert_allclose(out.loss, -np.mean(np.log(p.max(1))), rtol=1e-5)


def test_pseudo_label_reinforces_confidence(small_source):
    x, _ = _corrupted()
    a = Adapter(small_source, AdaptConfig(method=Method.PSEUDO_LABEL))
    first = a.step(x).probs.max(1).mean()
    for _ in range(49):
        last = a.step(x).probs.max(1).mean()
    assert last > first


def test_bn_stats_differs_from_source_on_corruption(small_source):
    x, _ = _corrupted("contrast", 32)
    s = Adapter(small_source, AdaptConfig(method=Method.SOURCE)).step(x).probs
    b = Adapter(small_source, AdaptConfig(method=Method.BN_STATS)).step(x).probs
    assert (s.argmax(1) != b.argmax(1)).mean() > 0


def test_bn_stats_close_to_source_on_clean(small_source):
    d = stream.make_glyph_dataset(64, 4, 77)
    s = Adapter(small_source, AdaptConfig(method=Method.SOURCE)).step(d.images).probs
    b = Adapter(small_source, AdaptConfig(method=Method.BN_STATS)).step(d.images).probs
    err_s = (s.argmax(1) != d.labels).mean()
    err_b = (b.argmax(1) != d.labels).mean()
    assert abs(err_s - err_b) <= 0.05


def test_tent_online_resets_at_segment_boundary(small_source):
    spec = stream.standard_sequence(["fog", "contrast"], 5, 2, 8, seed=0, num_classes=4)
    batches = stream.materialize(spec)
    a = Adapter(small_source, AdaptConfig(method=Method.TENT_ONLINE))
    a.step(*batches[0].view)
    a.step(*batches[1].view)
    assert not nn.states_equal(a.state.student, small_source)
    seen = {}
    orig = adapt.tent_step

    def spy(state, batch, cfg):
        seen["fresh"] = nn.states_equal(state.student, state.source)
        seen["opt_step"] = state.optimizer.step
        return orig(state, batch, cfg)

    adapt.tent_step = spy
    try:
        a.step(*batches[2].view)
    finally:
        adapt.tent_step = orig
    assert seen == {"fresh": True, "opt_step": 0}


def test_tent_continual_never_resets(small_source):
    spec = stream.standard_sequence(["fog", "contrast"], 5, 1, 8, seed=0, num_classes=4)
    a = Adapter(small_source, AdaptConfig(method=Method.TENT_CONTINUAL))
    for b in stream.materialize(spec):
        a.step(*b.view)
    assert a.state.optimizer.step == 2


def test_adapter_is_deterministic(small_source):
    x, _ = _corrupted()
    runs = []
    for _ in range(2):
        a = Adapter(small_source, AdaptConfig(n_aug=2, seed=3))
        runs.append(b"".join(a.step(x).probs.tobytes() for _ in range(2)))
    assert runs[0] == runs[1]
