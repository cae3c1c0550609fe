import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opreslab import generators as gen
from opreslab import models as M
from opreslab import tensor as T
from opreslab import training as tr
from opreslab.tensor import DiffTensor, ShapeError

from conftest import assert_grad_close, central_difference

PAIR_RATIOS = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)
ALL_RES_MIXES = ((0.25, 0.25, 0.25, 0.25), (0.7, 0.1, 0.1, 0.1), (0.9, 0.05, 0.03, 0.02))
RES = (16, 32, 64, 128)


def hamilton_oracle(props, resolutions, total):
    # decimal arithmetic, explicit tie rule: larger remainder first, then lower resolution
    quotas = [Decimal(str(p)) * total for p in props]
    base = [int(q) for q in quotas]
    rem = [q - b for q, b in zip(quotas, base)]
    ranked = sorted(range(len(props)), key=lambda i: (-rem[i], resolutions[i]))
    for i in ranked[: total - sum(base)]:
        base[i] += 1
    return dict(zip(resolutions, base))


# losses --------------------------------------------------------------------------------

def test_data_loss_examples(rng):
    y = rng.standard_normal((3, 8, 8))
    assert tr.data_loss(y, y).item() == 0.0
    assert tr.data_loss(y + 1.0, y).item() == pytest.approx(1.0, abs=1e-15)
    p = rng.standard_normal((3, 8, 8))
    assert tr.data_loss(p, y).item() == pytest.approx(np.sum((p - y) ** 2) / (3 * 64), rel=1e-14)
    with pytest.raises(ShapeError):
        tr.data_loss(p, y[:2])


@pytest.fixture(scope="module")
def darcy_pair():
    s = gen.gen_darcy(2, 32, seed=4)
    return np.stack([x.a.values for x in s]), np.stack([x.u.values for x in s])


def test_darcy_physics_zero_on_solver_output(darcy_pair):
    a, u = darcy_pair
    assert tr.physics_loss(u, a, "darcy").item() < 1e-10


def test_darcy_physics_quadratic_growth(darcy_pair):
    a, u = darcy_pair
    x = np.arange(32) / 32
    pert = np.outer(np.sin(2 * np.pi * 3 * x), np.sin(2 * np.pi * x))
    l1 = tr.physics_loss(u + 1e-3 * pert, a, "darcy").item()
    l2 = tr.physics_loss(u + 2e-3 * pert, a, "darcy").item()
    assert l2 / l1 == pytest.approx(4.0, rel=1e-3)


@pytest.mark.parametrize("pde", ["darcy", "burgers"])
def test_physics_loss_gradient(rng, darcy_pair, pde):
    if pde == "darcy":
        inputs = darcy_pair[0]
        pred = 0.01 * rng.standard_normal(inputs.shape)
    else:
        inputs = rng.standard_normal((2, 16))
        pred = rng.standard_normal((2, 16))
    p = DiffTensor(pred.copy(), requires_grad=True)
    T.backward(tr.physics_loss(p, inputs, pde))
    num = central_difference(lambda: tr.physics_loss(pred, inputs, pde).item(), pred, h=1e-6)
    rel = np.linalg.norm(p.grad - num) / np.linalg.norm(num)
    assert rel < 1e-6


def test_burgers_physics_zero_state():
    z = np.zeros((2, 64))
    assert tr.physics_loss(z, z, "burgers").item() == 0.0


def test_burgers_physics_small_on_solver_output():
    # the midpoint residual is a one-step quadrature: it shrinks with T
    x = np.arange(256) / 256
    u0 = (0.3 * np.sin(2 * np.pi * x))[None]
    small = [tr.physics_loss(gen.solve_burgers(u0[0], t)[None], u0, "burgers", T_final=t).item() for t in (0.02, 0.01)]
    assert small[1] < small[0] / 8


def test_physics_loss_unknown_pde():
    with pytest.raises(ValueError, match="no physics loss"):
        tr.physics_loss(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), "heat")


def test_dual_loss(rng, darcy_pair):
    a, u = darcy_pair
    p = u + 0.01 * rng.standard_normal(u.shape)
    assert tr.dual_loss(p, u, a, "darcy", 0.0).item() == tr.data_loss(p, u).item()
    d, ph = tr.data_loss(p, u).item(), tr.physics_loss(p, a, "darcy").item()
    for w in (0.1, 0.25, 0.5):
        assert tr.dual_loss(p, u, a, "darcy", w).item() == pytest.approx((1 - w) * d + w * ph, rel=1e-14)
    for w in (-0.1, 1.0):
        with pytest.raises(ValueError):
            tr.dual_loss(p, u, a, "darcy", w)


# mixes -----------------------------------------------------------------------------------

@pytest.mark.parametrize("total", [37, 100, 512, 1000])
def test_mix_counts_match_oracle(total):
    for lo in range(4):
        for hi in range(lo + 1, 4):
            for p in PAIR_RATIOS:
                mix = tr.MixSpec(((RES[lo], p), (RES[hi], 1 - p)), total)
                counts = mix.counts()
                assert counts == hamilton_oracle((p, 1 - p), (RES[lo], RES[hi]), total)
                assert sum(counts.values()) == total
    for props in ALL_RES_MIXES:
        mix = tr.MixSpec(tuple(zip(RES, props)), total)
        assert mix.counts() == hamilton_oracle(props, RES, total)


def test_mix_tie_goes_to_lower_resolution():
    assert tr.MixSpec(((64, 0.5), (16, 0.5)), 3).counts() == {64: 1, 16: 2}


@settings(max_examples=50, deadline=None)
@given(raw=st.lists(st.integers(0, 100), min_size=1, max_size=5), total=st.integers(0, 2000))
def test_mix_count_conservation(raw, total):
    if sum(raw) == 0:
        raw = raw[:-1] + [1]
    props = [r / sum(raw) for r in raw]
    props[-1] = 1.0 - math.fsum(props[:-1])
    props = [max(p, 0.0) for p in props]
    mix = tr.MixSpec(tuple(zip(range(8, 8 + len(props)), props)), total)
    counts = mix.counts()
    assert sum(counts.values()) == total and min(counts.values()) >= 0


def test_mix_validation():
    with pytest.raises(ValueError, match="sum"):
        tr.MixSpec(((16, 0.9), (32, 0.5)), 10)
    with pytest.raises(ValueError, match="duplicate"):
        tr.MixSpec(((16, 0.5), (16, 0.5)), 10)
    assert tr.MixSpec.parse("16:0.25, 32:0.75", 8).entries == ((16, 0.25), (32, 0.75))


def test_average_pixels():
    assert tr.average_pixels(tr.MixSpec.single(16, 1)) == 256
    assert tr.average_pixels(tr.MixSpec(((16, 0.5), (128, 0.5)), 1)) == 8320
    skew = tr.MixSpec(tuple(zip(RES, (0.9, 0.05, 0.03, 0.02))), 1)
    assert tr.average_pixels(skew) == pytest.approx(0.9 * 256 + 0.05 * 1024 + 0.03 * 4096 + 0.02 * 16384)


@pytest.fixture(scope="module")
def aligned_packs():
    master = gen.darcy_pack(gen.gen_darcy(40, 32, seed=8), seed=8)
    return {p.resolution: p for p in gen.derive_resolutions(master, [8, 16, 32])}


def test_compose_mix_disjoint_and_deterministic(aligned_packs):
    mix = tr.MixSpec(((8, 0.5), (16, 0.25), (32, 0.25)), 40)
    a = tr.compose_mix(aligned_packs, mix, seed=3)
    b = tr.compose_mix(aligned_packs, mix, seed=3)
    ids = np.concatenate([a.indices[r] for r in a.indices])
    assert len(ids) == 40 and len(np.unique(ids)) == 40
    for r in a.indices:
        assert np.array_equal(a.indices[r], b.indices[r])
        np.testing.assert_array_equal(a.buckets[r][1], aligned_packs[r].labels[a.indices[r]])
    assert {r: len(v) for r, v in a.indices.items()} == mix.counts()
    single = tr.compose_mix(aligned_packs, tr.MixSpec.single(16, 40), seed=0)
    assert sorted(single.indices[16]) == list(range(40))


def test_compose_mix_insufficient(aligned_packs):
    with pytest.raises(ValueError, match="resolution"):
        tr.compose_mix(aligned_packs, tr.MixSpec.single(16, 41), seed=0)
    with pytest.raises(ValueError, match="64"):
        tr.compose_mix(aligned_packs, tr.MixSpec.single(64, 4), seed=0)


# training ---------------------------------------------------------------------------------

SMALL = dict(width=8, layers=2, max_modes=4, lift_dim=16, proj_dim=16)


def test_zero_lr_keeps_parameters(aligned_packs):
    spec = M.FnoSpec(dims=2, **SMALL)
    params = M.init_params(spec, 0)
    before = {k: v.data.copy() for k, v in params.items()}
    tset = tr.compose_mix(aligned_packs, tr.MixSpec.single(8, 16), 0)
    res = tr.train(params, spec, tset, tr.TrainConfig(lr=0.0, weight_decay=1e-5, batch_size=4, epochs=3))
    for k in params:
        assert np.array_equal(params[k].data, before[k])
    losses = [row["train_loss"] for row in res.log]
    assert losses[0] == losses[1] == losses[2]


def test_chunking_matches_full_batch(aligned_packs):
    spec = M.FnoSpec(dims=2, **SMALL)
    tset = tr.compose_mix(aligned_packs, tr.MixSpec.single(16, 16), 0)
    runs = []
    for chunk in (1 << 20, 2 * 16 * 16):
        params = M.init_params(spec, 1)
        tr.train(params, spec, tset, tr.TrainConfig(batch_size=8, epochs=2, chunk_pixels=chunk))
        runs.append(params)
    for k in runs[0]:
        np.testing.assert_allclose(runs[0][k].data, runs[1][k].data, rtol=1e-9, atol=1e-12)


def test_training_reduces_loss_and_is_deterministic(aligned_packs):
    spec = M.FnoSpec(dims=2, **SMALL)
    tset = tr.compose_mix(aligned_packs, tr.MixSpec(((8, 0.5), (16, 0.5)), 32), 0)
    val = {r: (p.inputs[32:], p.labels[32:]) for r, p in aligned_packs.items()}
    logs = []
    for _ in range(2):
        params = M.init_params(spec, 2)
        res = tr.train(params, spec, tset, tr.TrainConfig(lr=3e-3, batch_size=4, epochs=15), val)
        logs.append(tr.log_csv(res.log, ["epoch", "train_loss", "val_loss@8", "val_loss@16", "val_loss@32"]))
    assert logs[0] == logs[1]
    assert res.log[-1]["train_loss"] < res.log[0]["train_loss"] / 10


def test_physics_training_runs(aligned_packs):
    spec = M.FnoSpec(dims=2, **SMALL)
    tset = tr.compose_mix(aligned_packs, tr.MixSpec.single(16, 8), 0)
    cfg = tr.TrainConfig.preset("darcy", "data+physics", epochs=2, batch_size=4)
    assert cfg.lr == 1e-2 and cfg.w == 0.1
    res = tr.train(M.init_params(spec, 0), spec, tset, cfg)
    assert all(math.isfinite(r["train_loss"]) for r in res.log)


def test_nan_loss_raises(aligned_packs):
    spec = M.FnoSpec(dims=2, **SMALL)
    params = M.init_params(spec, 0)
    params["proj1.b"].data[:] = np.nan
    tset = tr.compose_mix(aligned_packs, tr.MixSpec.single(8, 4), 0)
    with pytest.raises(tr.TrainingError, match="epoch 1, step 1"):
        tr.train(params, spec, tset, tr.TrainConfig(batch_size=4, epochs=1))


def test_config_validation_and_presets():
    assert tr.TrainConfig.preset("burgers").batch_size == 64
    assert tr.TrainConfig.preset("darcy").lr == 1e-3
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(loss="data+physics", w=1.0)


def test_write_run(tmp_path, aligned_packs):
    spec = M.FnoSpec(dims=2, **SMALL)
    tset = tr.compose_mix(aligned_packs, tr.MixSpec.single(8, 8), 0)
    cfg = tr.TrainConfig(batch_size=4, epochs=2)
    res = tr.train(M.init_params(spec, 0), spec, tset, cfg, {8: (aligned_packs[8].inputs[:2], aligned_packs[8].labels[:2])})
    run = tr.write_run(tmp_path / "run", res, spec, cfg, tr.MixSpec.single(8, 8))
    header = (run / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss@8"
    assert (run / "timings.csv").exists() and (run / "checkpoint" / "manifest.json").exists()
    back, spec2, _ = M.load_checkpoint(run / "checkpoint")
    assert spec2 == spec
