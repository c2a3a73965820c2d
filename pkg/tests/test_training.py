import math

import numpy as np
import pytest

from avsdf import training as TR
from avsdf.errors import ArchitectureMismatch, ContractViolation, FormatError, TrainingDiverged
from avsdf.numerics import T, Tape, Tensor

from conftest import directional_gradcheck


def tiny(**kw):
    base = dict(batch_size=1, rank=3, width=16, points_per_part=100, body_source="pool",
                pool_size=2, total_steps=40, seed=5, log_every=0)
    base.update(kw)
    return TR.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_source():
    cfg = tiny()
    return TR.BodySource(cfg)


def test_learning_rate_endpoints():
    cfg = TR.TrainConfig(total_steps=50_000)
    assert TR.learning_rate(cfg, 0) == 1e-4
    assert TR.learning_rate(cfg, 49_999) == 1e-5
    assert TR.learning_rate(cfg, 60_000) == 1e-5
    mids = [TR.learning_rate(cfg, s) for s in (0, 10_000, 20_000, 49_999)]
    assert all(a > b for a, b in zip(mids, mids[1:]))


def test_config_validation():
    with pytest.raises(ContractViolation):
        TR.TrainConfig.from_dict({"rank": 4, "learning_rate": 1})
    with pytest.raises(ContractViolation):
        TR.TrainConfig(lr_start=1e-5, lr_end=1e-4).validate()
    with pytest.raises(ContractViolation):
        TR.TrainConfig(body_source="video").validate()
    assert TR.TrainConfig.from_dict({"rank": 4}).rank == 4


def test_loss_examples():
    gt = np.array([0.2, -0.3, 0.05])
    assert float(TR.sdf_loss(Tensor(gt.copy()), gt).data) <= 1e-6
    flipped = float(TR.sdf_loss(Tensor(-gt), gt).data)
    assert flipped == pytest.approx(4.0, abs=0.02)
    assert TR.hard_sign_loss(gt, gt) == 0.0
    with pytest.raises(ContractViolation):
        TR.sdf_loss(Tensor(np.zeros(2)), gt)


def test_loss_gradient(rng):
    gt = rng.uniform(-0.2, 0.2, 30)
    pred = gt + rng.normal(0, 0.01, 30)
    assert directional_gradcheck(lambda p: TR.sdf_loss(p, gt, 0.05), [pred], rng) <= 1e-4


def test_random_rotation_angles_are_uniform_haar():
    rng = np.random.default_rng(0)
    ang = np.array([np.linalg.norm(TR.random_rotation_vector(rng)) for _ in range(20_000)])
    assert ang.max() <= math.pi + 1e-12
    # Haar measure: angle density (1 - cos a) / pi, so E[a] = pi/2 + 2/pi
    assert ang.mean() == pytest.approx(math.pi / 2 + 2 / math.pi, abs=0.02)


def test_same_seed_gives_identical_losses(tiny_source):
    a = TR.fit(tiny(), tiny_source, until=5).history
    b = TR.fit(tiny(), tiny_source, until=5).history
    assert a == b and len(a) == 5


def test_initial_loss_similar_across_ranks(tiny_source):
    base = None
    for rank in (0, 20, 80):
        cfg = tiny(rank=rank, width=64)
        state = TR.new_state(cfg)
        loss = TR.validation_loss(state.model, tiny_source.bodies, cfg)
        base = base or loss
        assert abs(loss - base) <= 0.1 * base


def test_loss_decreases_on_fixed_body():
    cfg = tiny(body_source="fixed", lr_start=3e-3, lr_end=1e-3, total_steps=60)
    src = TR.BodySource(cfg)
    state = TR.new_state(cfg)
    before = TR.validation_loss(state.model, src.bodies, cfg)
    TR.fit(state=state, source=src)
    assert TR.validation_loss(state.model, src.bodies, cfg) < 0.8 * before


def test_checkpoint_round_trip_is_byte_identical(tmp_path, tiny_source):
    state = TR.fit(tiny(), tiny_source, until=3)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    TR.save_checkpoint(a, state)
    TR.save_checkpoint(b, TR.load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_resume_matches_uninterrupted(tmp_path, tiny_source):
    full = TR.fit(tiny(), tiny_source, until=8)
    half = TR.fit(tiny(), tiny_source, until=4)
    TR.save_checkpoint(tmp_path / "h.ckpt", half)
    resumed = TR.fit(state=TR.load_checkpoint(tmp_path / "h.ckpt"), source=tiny_source, until=8)
    assert resumed.history == full.history
    for k in full.model.params:
        assert np.array_equal(resumed.model.params[k].data, full.model.params[k].data)


def test_checkpoint_errors(tmp_path, tiny_source):
    state = TR.new_state(tiny())
    p = tmp_path / "c.ckpt"
    TR.save_checkpoint(p, state, with_optimizer=False)
    with pytest.raises(ArchitectureMismatch):
        TR.load_checkpoint(p, expect=tiny(rank=4))
    TR.load_checkpoint(p, expect=tiny())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(FormatError):
        TR.load_checkpoint(bad)
    bad.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(FormatError):
        TR.load_checkpoint(bad)


def test_supervision_points_stay_on_implicit_branch(tiny_source):
    cfg = tiny()
    state = TR.new_state(cfg)
    with T.no_grad():
        loss, pred, gt, pts = TR.batch_loss(state.model, tiny_source.bodies, cfg, np.random.default_rng(0))
    assert np.isfinite(float(loss.data)) and len(pred.data) == len(gt) == len(pts)


def test_divergence_is_reported(tiny_source):
    state = TR.new_state(tiny())
    state.model.params["dec.b6"].data[...] = -np.inf
    with pytest.raises(TrainingDiverged) as info:
        TR.train_step(state, tiny_source)
    assert info.value.step == 0


def test_sweeps_cover_defaults():
    rows = TR.sweep_configs("padding")
    assert [c.padding for c, _ in rows] == list(TR.PADDING_SWEEP)
    assert [d for c, d in rows].count(True) == 1 and rows[2][0].padding == 0.125
    assert [c.width for c, _ in TR.sweep_configs("width")] == [32, 40, 50, 64]
    assert [c.rank for c, _ in TR.sweep_configs("rank")][-1] == 80
    with pytest.raises(ContractViolation):
        TR.sweep_configs("depth")


def test_ablation_matrix_tabulates_counts():
    rows = [(tiny(rank=r, total_steps=1), r == 3) for r in (0, 3)]
    items = TR.body_pool(1, 99, n_points=100)

    def src(cfg):
        return TR.BodySource(cfg, items)

    table = TR.ablation_matrix(rows, src, items)
    assert [r["rank"] for r in table] == [0, 3]
    assert table[0]["param_count"] < table[1]["param_count"]
    assert all(0 <= r["iou_mean"] <= 100 for r in table)


def test_taped_step_gradients_are_finite(tiny_source):
    cfg = tiny()
    state = TR.new_state(cfg)
    names = list(state.model.params)
    with Tape() as tape:
        loss, *_ = TR.batch_loss(state.model, tiny_source.bodies[:1], cfg, np.random.default_rng(1))
    grads = tape.backward(loss, [state.model.params[n] for n in names])
    assert all(np.all(np.isfinite(g)) for g in grads)
    assert np.any(grads[names.index("nbw.A0")] != 0)
