import json
import subprocess
import sys

import numpy as np
import pytest

from emdepart.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from emdepart.data import load_feature_bank

SMOKE = {"model": {"r": 16, "k": 4, "enc_heads": 2, "sdm_layers": 1, "enc_layers": 1},
         "alignment": {"tau": 0.5, "p": 3},
         "train": {"epochs": 2, "batch_size": 16, "base_lr": 3e-3}}


def _gen(path, *extra):
    return main(["gen-synth", "--out", str(path), "--classes-seen", "6", "--classes-unseen", "2",
                 "--images-per-class", "4", "--r0", "8", "--seed", "3", *extra])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _gen(root / "data") == EXIT_OK
    (root / "smoke.json").write_text(json.dumps(SMOKE))
    code = main(["train", "--config", str(root / "smoke.json"), "--data", str(root / "data"),
                 "--out", str(root / "run" / "model.ckpt")])
    assert code == EXIT_OK
    return root


# -- gen-synth --------------------------------------------------------------------------

def test_gen_synth_defaults_load(tmp_path, capsys):
    assert main(["gen-synth", "--out", str(tmp_path / "d")]) == EXIT_OK
    bank = load_feature_bank(tmp_path / "d")
    assert bank.features.shape == (500, 9, 32)
    assert json.loads(capsys.readouterr().out)["unseen"] == 5


def test_gen_synth_is_byte_reproducible(tmp_path):
    _gen(tmp_path / "a")
    _gen(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_synth_single_view_is_usage_error(tmp_path, capsys):
    assert _gen(tmp_path / "x", "--views", "1") == EXIT_USAGE
    assert "views" in capsys.readouterr().err


def test_unknown_command_and_bad_flag_are_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["eval", "--ckpt"])
    assert e.value.code == EXIT_USAGE


# -- train ---------------------------------------------------------------------------------

def test_train_writes_checkpoint_and_csv(trained):
    csv = (trained / "run" / "model.csv").read_text().splitlines()
    assert csv[0].startswith("epoch,lr,L_global") and len(csv) == 3
    assert (trained / "run" / "model.ckpt").stat().st_size > 0


def test_train_missing_data_dir(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "missing_dir"), "--out", str(tmp_path / "m")])
    assert code == EXIT_DATA
    assert "missing_dir" in capsys.readouterr().err


def test_train_rejects_unknown_config_key(trained, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"width": 3}}))
    code = main(["train", "--config", str(tmp_path / "bad.json"), "--data",
                 str(trained / "data"), "--out", str(tmp_path / "m")])
    assert code == EXIT_USAGE


def test_train_ablation_flag_reaches_checkpoint(trained, tmp_path):
    out = tmp_path / "abl.ckpt"
    code = main(["train", "--config", str(trained / "smoke.json"), "--data", str(trained / "data"),
                 "--out", str(out), "--ablate", "no_global"])
    assert code == EXIT_OK
    from emdepart.trainer import load_checkpoint
    assert load_checkpoint(out).config.model.no_global is True


def test_train_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    assert "[alignment]" in out and "tau=32.0" in out


# -- eval ------------------------------------------------------------------------------------

def _eval(trained, capsys, *extra):
    code = main(["eval", "--ckpt", str(trained / "run" / "model.ckpt"),
                 "--data", str(trained / "data"), *extra])
    return code, capsys.readouterr()


def test_eval_zsl_restricts_to_unseen(trained, capsys):
    code, cap = _eval(trained, capsys, "--split", "zsl")
    assert code == EXIT_OK
    rep = json.loads(cap.out)
    assert rep["U"] is None and set(rep["per_class"]) == {"6", "7"}


def test_eval_gamma_zero_is_plain_argmax(trained, capsys):
    code, cap = _eval(trained, capsys, "--split", "gzsl", "--gamma-cs", "0")
    assert code == EXIT_OK
    rep = json.loads(cap.out)
    from emdepart.data import load_dataset
    from emdepart.trainer import load_checkpoint
    model = load_checkpoint(trained / "run" / "model.ckpt").model()
    ds = load_dataset(trained / "data")
    classes = sorted(ds.split.seen) + sorted(ds.split.unseen)
    test = np.asarray(ds.split.test_images)
    S = model.score(ds.bank.features[test], model.class_embeddings(ds.docs.embeddings, classes),
                    p=3)
    plain = np.asarray(classes)[np.argmax(S, axis=1)]
    labels = ds.bank.labels[test]
    for c, acc in rep["per_class"].items():
        mask = labels == int(c)
        assert acc == pytest.approx(100.0 * np.mean(plain[mask] == int(c)))


def test_eval_p_above_k_is_usage_error(trained, capsys):
    code, cap = _eval(trained, capsys, "--p", "5")
    assert code == EXIT_USAGE and "k=4" in cap.err


def test_eval_output_is_schema_stable(trained, capsys):
    _, a = _eval(trained, capsys)
    _, b = _eval(trained, capsys)
    assert a.out == b.out
    assert {"T1", "U", "S", "H", "per_class", "gamma_cs", "p"} <= set(json.loads(a.out))


def test_eval_corrupt_checkpoint_is_data_error(trained, tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"\x00\x01")
    code = main(["eval", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(trained / "data")])
    assert code == EXIT_DATA


# -- score / diagnose ----------------------------------------------------------------------

def test_score_dump(trained, capsys):
    code = main(["score", "--ckpt", str(trained / "run" / "model.ckpt"),
                 "--data", str(trained / "data"), "--max-images", "2"])
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert len(out["pairs"]) == 2 * 8
    pair = out["pairs"][0]
    assert np.shape(pair["cos"]) == (4, 4) and np.shape(pair["top_cos"]) == (2, 4, 4)
    assert np.sum(pair["top_cos"][0]) == 4 * 3


def test_diagnose_dumps(trained, tmp_path, capsys):
    out = tmp_path / "diag"
    code = main(["diagnose", "--ckpt", str(trained / "run" / "model.ckpt"),
                 "--data", str(trained / "data"), "--out", str(out), "--max-images", "3"])
    assert code == EXIT_OK
    svar = json.loads((out / "svar.json").read_text())
    assert 0 <= svar["S_var_V"] <= 1 and 0 <= svar["S_var_T"] <= 1
    red = json.loads((out / "redundancy.json").read_text())
    assert np.shape(red["image_mean"]) == (4, 4)
    att = json.loads((out / "attention.json").read_text())
    img = next(iter(att["image"].values()))
    assert np.shape(img) == (1, 4, 8)  # (l, k, patches)
    np.testing.assert_allclose(np.sum(img, axis=-1), 1.0, atol=1e-9)
    for c, a in att["text"].items():
        assert np.shape(a)[:2] == (1, 4)
    rows = (out / "embeddings.tsv").read_text().splitlines()
    header = rows[0].split("\t")
    assert header[:4] == ["modality", "item", "class", "view"] and len(header) == 4 + 16
    assert all(len(r.split("\t")) == len(header) for r in rows[1:])


# -- grad-check ------------------------------------------------------------------------------

def test_grad_check_passes_by_default(capsys):
    assert main(["grad-check", "--seed", "0"]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_grad_check_zero_tolerance_fails_with_listing(capsys):
    assert main(["grad-check", "--tol", "0"]) == EXIT_NUMERIC
    out = capsys.readouterr().out
    assert "worst" in out and "analytic=" in out and out.strip().endswith("FAIL")


def test_console_entry_point_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "emdepart.cli", "gen-synth", "--out",
                        str(tmp_path / "d"), "--views", "1"], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE
