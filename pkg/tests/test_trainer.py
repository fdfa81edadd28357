import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from emdepart import numerics as nx
from emdepart.config import Config, ConfigError, TrainConfig, preset
from emdepart.model import EmDepart
from emdepart.trainer import (LOG_COLUMNS, AdamState, adam_step, cosine_lr, grid_search,
                              load_checkpoint, save_checkpoint, train)


# -- schedule ----------------------------------------------------------------------

def test_cosine_lr_examples():
    cfg = TrainConfig(base_lr=0.01, epochs=10, warmup_epochs=0)
    assert cosine_lr(0, cfg) == 0.01
    assert cosine_lr(9, cfg) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(1, replace(cfg, warmup_epochs=2)) == pytest.approx(0.005)


def test_cosine_lr_midpoint_and_range():
    cfg = TrainConfig(base_lr=1.0, epochs=5)
    assert cosine_lr(2, cfg) == pytest.approx(0.5)
    assert all(cosine_lr(e, cfg) >= 0 for e in range(5))
    with pytest.raises(ValueError):
        cosine_lr(5, cfg)


# -- Adam ----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    s = nx.ParamStore()
    w = s.add("w", [1.0, -2.0])
    st = AdamState.for_store(s)
    adam_step(s, st, 0.1)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    s = nx.ParamStore()
    w = s.add("w", [1.0])
    st = AdamState.for_store(s)
    nx.mul(nx.tsum(nx.mul(w, w)), 0.5).backward()
    adam_step(s, st, 0.01)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert w.data[0] == pytest.approx(1.0 - 0.01 / (1 + 1e-8), abs=1e-15)
    assert not np.any(w.grad)  # gradients are cleared


def test_adam_non_finite_gradient_names_parameter():
    s = nx.ParamStore()
    w = s.add("weights.x", [1.0])
    w.grad[0] = np.nan
    with pytest.raises(nx.NonFiniteError, match="weights.x"):
        adam_step(s, AdamState.for_store(s), 0.1)


def test_adam_is_deterministic():
    def run():
        s = nx.ParamStore()
        rng = np.random.default_rng(0)
        w = s.add("w", rng.standard_normal(4))
        st = AdamState.for_store(s)
        for _ in range(5):
            nx.tsum(nx.mul(nx.mul(w, w), w)).backward()
            adam_step(s, st, 0.05)
        return w.data.tobytes()
    assert run() == run()


# -- training loop -------------------------------------------------------------------

def test_smoke_run_logs_every_column(tiny_data):
    res = train(tiny_config(epochs=1), tiny_data)
    assert res.csv().splitlines()[0] == ",".join(LOG_COLUMNS)
    row = res.log[0]
    for key in ("L_global", "L_local", "L_var", "L_div", "S_var_V", "S_var_T", "val_T1",
                "val_H"):
        assert math.isfinite(row[key])


def test_eight_image_epoch(tiny_data):
    few = replace(tiny_data, split=replace(
        tiny_data.split, test_seen_images=[], excluded_images=[]))
    train_idx = few.split.train_images(few.bank.labels)
    assert len(train_idx) > 8
    keep = set(train_idx[:8].tolist())
    few.split.excluded_images = [int(i) for i in train_idx if int(i) not in keep]
    res = train(tiny_config(epochs=1, log_eval=False), few)
    assert len(few.split.train_images(few.bank.labels)) == 8
    assert all(math.isfinite(res.log[0][k]) for k in ("L_global", "L_local", "L_var", "L_div"))


def test_published_hyperparameters_scaled_down_stay_finite(tiny_data):
    cfg = preset("awa2")
    cfg = replace(cfg, model=replace(cfg.model, r=8, k=2, enc_heads=2),
                  alignment=replace(cfg.alignment, p=2),
                  train=replace(cfg.train, epochs=2, batch_size=16))
    res = train(cfg, tiny_data)
    for row in res.log:
        assert all(math.isfinite(row[k]) for k in ("L_global", "L_local", "L_var", "L_div"))


def test_same_seed_same_log(tiny_data):
    a = train(tiny_config(epochs=2), tiny_data).csv()
    b = train(tiny_config(epochs=2), tiny_data).csv()
    assert a == b


def test_resume_is_bit_exact(tiny_data, tmp_path):
    cfg = tiny_config(epochs=4)
    full = train(cfg, tiny_data)
    half = train(cfg, tiny_data, stop_after=2)
    save_checkpoint(tmp_path / "half.ckpt", half.checkpoint)
    resumed = train(cfg, tiny_data, resume=load_checkpoint(tmp_path / "half.ckpt"))
    assert resumed.csv() == full.csv()
    for name, arr in full.checkpoint.params.items():
        assert resumed.checkpoint.params[name].tobytes() == arr.tobytes()


def test_checkpoint_round_trip(tiny_data, tmp_path):
    res = train(tiny_config(epochs=1), tiny_data)
    save_checkpoint(tmp_path / "c.ckpt", res.checkpoint)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.config == res.checkpoint.config and back.epoch == 1
    assert back.adam.step == res.checkpoint.adam.step
    m = back.model()
    for p in m.store:
        assert p.data.tobytes() == res.model.store[p.name].data.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    import struct
    (tmp_path / "x").write_bytes(struct.pack("<Q", 2) + b"{}")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_non_finite_loss_names_component(tiny_data):
    model = EmDepart(tiny_config(), 8, 12)
    feats = tiny_data.bank.features[:2].astype(np.float64)
    # zero view tokens and block outputs give all-zero E_L rows on the image side
    model.sdm_v.E0.data[...] = 0.0
    for blk in model.sdm_v.blocks:
        blk.W_o.data[...] = 0.0
        for p in blk.mlp2:
            p.data[...] = 0.0
    with pytest.raises(nx.NonFiniteError, match="div"):
        model.loss_components(feats, tiny_data.bank.labels[:2], tiny_data.docs.embeddings,
                              sorted(tiny_data.split.seen))


# -- grid search ------------------------------------------------------------------------

def test_single_point_sweep_returns_that_config(tiny_data):
    cfg = tiny_config(epochs=1)
    res = grid_search(cfg, {"lambda_div": [1.5]}, tiny_data)
    assert res.best.alignment.lambda_div == 1.5 and len(res.rows) == 1


def test_sweep_selects_better_logged_run(tiny_data, tmp_path):
    cfg = tiny_config(epochs=2)
    res = grid_search(cfg, {"lambda_div": [0.0, 3.0]}, tiny_data, csv_path=tmp_path / "g.csv")
    hs = {r["lambda_div"]: r["val_H"] for r in res.rows}
    assert res.best.alignment.lambda_div == max(hs, key=lambda k: (hs[k], -k))
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert len(lines) == 1 + 2


def test_cartesian_sweep_row_count(tiny_data):
    res = grid_search(tiny_config(epochs=1), {"lambda_div": [0.0, 3.0], "model.k": [2, 3]},
                      tiny_data, mode="cartesian")
    assert len(res.rows) == 4
    assert res.csv().count("\n") == 5


def test_empty_sweep_rejected(tiny_data):
    with pytest.raises(ValueError):
        grid_search(tiny_config(), {}, tiny_data)


# -- config ------------------------------------------------------------------------------

def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = preset("cub")
    assert Config.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        Config.from_dict({"model": {"r": 8, "bogus": 1}})
    with pytest.raises(ConfigError):
        Config.from_dict({"optimizer": {}})


def test_config_invariants():
    with pytest.raises(ConfigError):
        Config.from_dict({"model": {"k": 2}, "alignment": {"p": 3}})
    with pytest.raises(ConfigError):
        Config.from_dict({"alignment": {"tau": 0.0}})
    with pytest.raises(ConfigError):
        Config.from_dict({"alignment": {"lambda_var": -1.0}})


def test_presets_hold_published_values():
    a, c, f = preset("awa2"), preset("cub"), preset("flo")
    assert (a.alignment.tau, c.alignment.tau, f.alignment.tau) == (32.0, 4.2, 4.0)
    assert (a.alignment.gamma, c.alignment.gamma, f.alignment.gamma) == (0.10, 0.25, 0.75)
    assert (a.train.base_lr, c.train.base_lr, f.train.base_lr) == (1.0e-4, 8.0e-4, 5.0e-4)
    assert (a.train.batch_size, c.train.batch_size, f.train.batch_size) == (64, 40, 48)
    assert (a.model.r, c.model.r, f.model.r) == (256, 64, 128)
    assert (a.model.k, c.model.k, f.model.k) == (4, 5, 4)
    assert (a.alignment.p, c.alignment.p, f.alignment.p) == (3, 3, 1)
    assert (a.model.dropout, c.model.dropout, f.model.dropout) == (0.35, 0.15, 0.12)
    assert (a.alignment.lambda_local, a.alignment.lambda_var, a.alignment.lambda_div) == \
        (0.1, 1.0, 3.0)
    assert a.alignment.eps == 1e-4
