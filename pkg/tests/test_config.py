import pytest

from simcut.config import RunConfig, parse_kv_file


def test_defaults_mirror_training_recipe():
    cfg = RunConfig()
    assert cfg.dropout == 0.3
    assert cfg.label_smoothing == 0.1
    assert cfg.warmup == 4000
    assert cfg.base_lr == 5e-4
    assert cfg.beam == 5
    assert cfg.length_penalty == 1.0
    assert cfg.alpha == 3.0
    assert cfg.p_cut == 0.05
    assert cfg.max_tokens == 4096


def test_resolve_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("alpha = 2.0\nepochs = 7\n# comment\nseed = 5  # inline\n",
                    encoding="utf-8")
    cfg = RunConfig.resolve(str(path), {"alpha": "4.5"})
    assert cfg.alpha == 4.5   # override wins over file
    assert cfg.epochs == 7    # file wins over default
    assert cfg.seed == 5
    assert cfg.beta == 1.0    # untouched default


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("alpha = 1.0\nbogus = 3\nzz = 1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="bogus, zz"):
        RunConfig.resolve(str(path))


def test_type_parsing():
    cfg = RunConfig.resolve(None, {"share_embeddings": "false", "epochs": "3",
                                   "p_cut": "0.2", "vocab": "v.txt"})
    assert cfg.share_embeddings is False
    assert cfg.epochs == 3
    assert cfg.p_cut == 0.2
    assert cfg.vocab == "v.txt"


def test_bad_values_rejected():
    with pytest.raises(ValueError, match="epochs"):
        RunConfig.resolve(None, {"epochs": "three"})
    with pytest.raises(ValueError, match="true/false"):
        RunConfig.resolve(None, {"direction_tag": "maybe"})
    with pytest.raises(ValueError, match="objective"):
        RunConfig.resolve(None, {"objective": "dropout_party"})


def test_malformed_line_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("alpha 1.0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 1"):
        parse_kv_file(str(path))


def test_echo_round_trips(tmp_path):
    cfg = RunConfig.resolve(None, {"alpha": "2.25", "objective": "rdrop",
                                   "vocab": "voc.txt", "seed": "9",
                                   "share_embeddings": "false"})
    path = tmp_path / "echo.cfg"
    cfg.save(str(path))
    again = RunConfig.resolve(str(path))
    assert again == cfg


def test_require_lists_missing():
    cfg = RunConfig()
    with pytest.raises(ValueError, match="vocab, out_dir"):
        cfg.require("vocab", "out_dir")
