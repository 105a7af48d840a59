import os

import pytest

from simcut.cli import main
from simcut.data import decode, encode, load_merges, load_vocab
from simcut.model import load_checkpoint

from conftest import toy_corpus


def write_corpus(tmp_path, n_train=40, n_val=10, seed=0):
    corpus = toy_corpus(n_train, n_val, 10, seed=seed)
    paths = {}
    for split, pairs in corpus.items():
        s = tmp_path / f"{split}.src"
        t = tmp_path / f"{split}.tgt"
        s.write_text("".join(a + "\n" for a, _ in pairs), encoding="utf-8")
        t.write_text("".join(b + "\n" for _, b in pairs), encoding="utf-8")
        paths[split] = (str(s), str(t))
    return corpus, paths


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    corpus, paths = write_corpus(tmp_path)
    vocab_path = str(tmp_path / "vocab.txt")
    merges_path = str(tmp_path / "merges.txt")
    rc = main(["build-vocab", "--src", paths["train"][0], "--tgt", paths["train"][1],
               "--num-merges", "60", "--vocab-out", vocab_path,
               "--merges-out", merges_path])
    assert rc == 0
    return {"tmp": tmp_path, "corpus": corpus, "paths": paths,
            "vocab": vocab_path, "merges": merges_path}


def train_args(ws, out, **over):
    base = {"train_src": ws["paths"]["train"][0], "train_tgt": ws["paths"]["train"][1],
            "valid_src": ws["paths"]["valid"][0], "valid_tgt": ws["paths"]["valid"][1],
            "vocab": ws["vocab"], "merges": ws["merges"], "out_dir": out,
            "layers": 1, "heads": 2, "d_model": 32, "d_ffn": 64, "dropout": 0.1,
            "epochs": 2, "max_tokens": 512, "warmup": 10, "base_lr": 1e-3,
            "val_metric": "loss", "seed": 3}
    base.update(over)
    return [f"--{k}={v}" for k, v in base.items()]


# ---------------------------------------------------------------------------
# build-vocab / prepare-bidi
# ---------------------------------------------------------------------------

def test_build_vocab_round_trip(workspace, capsys):
    vocab = load_vocab(workspace["vocab"])
    merges = load_merges(workspace["merges"])
    for src, tgt in workspace["corpus"]["train"][:10]:
        assert decode(encode(src, merges, vocab), vocab) == src
        assert decode(encode(tgt, merges, vocab), vocab) == tgt


def test_build_vocab_deterministic(workspace, tmp_path):
    v2 = str(tmp_path / "v2.txt")
    m2 = str(tmp_path / "m2.txt")
    rc = main(["build-vocab", "--src", workspace["paths"]["train"][0],
               "--tgt", workspace["paths"]["train"][1], "--num-merges", "60",
               "--vocab-out", v2, "--merges-out", m2])
    assert rc == 0
    assert open(v2, "rb").read() == open(workspace["vocab"], "rb").read()
    assert open(m2, "rb").read() == open(workspace["merges"], "rb").read()


def test_build_vocab_zero_merges_character_level(workspace, tmp_path, capsys):
    v = str(tmp_path / "v.txt")
    m = str(tmp_path / "m.txt")
    rc = main(["build-vocab", "--src", workspace["paths"]["train"][0],
               "--tgt", workspace["paths"]["train"][1], "--num-merges", "0",
               "--vocab-out", v, "--merges-out", m])
    assert rc == 0
    assert open(m, encoding="utf-8").read() == ""
    vocab = load_vocab(v)
    assert all(len(t.replace("@@", "")) == 1 for t in vocab.token_of[6:])


def test_build_vocab_missing_file_fails(tmp_path, capsys):
    rc = main(["build-vocab", "--src", str(tmp_path / "nope.src"),
               "--tgt", str(tmp_path / "nope.tgt"), "--num-merges", "5",
               "--vocab-out", str(tmp_path / "v"), "--merges-out", str(tmp_path / "m")])
    assert rc != 0
    err = capsys.readouterr().err
    assert err.startswith("error:") and "nope.src" in err


def test_prepare_bidi(workspace, tmp_path, capsys):
    out_s, out_t = str(tmp_path / "bidi.src"), str(tmp_path / "bidi.tgt")
    rc = main(["prepare-bidi", "--src", workspace["paths"]["train"][0],
               "--tgt", workspace["paths"]["train"][1],
               "--out-src", out_s, "--out-tgt", out_t])
    assert rc == 0
    src_lines = open(out_s, encoding="utf-8").read().splitlines()
    tgt_lines = open(out_t, encoding="utf-8").read().splitlines()
    n = len(workspace["corpus"]["train"])
    assert len(src_lines) == 2 * n
    assert src_lines[n:] == tgt_lines[:n]
    assert tgt_lines[n:] == src_lines[:n]


# ---------------------------------------------------------------------------
# train / finetune
# ---------------------------------------------------------------------------

def test_train_writes_outputs(workspace, tmp_path, capsys):
    out = str(tmp_path / "run")
    rc = main(["train"] + train_args(workspace, out, objective="simcut",
                                     alpha=3.0, p_cut=0.05))
    assert rc == 0
    assert "done: best epoch" in capsys.readouterr().out
    for name in ("config.txt", "metrics.tsv", "best.ckpt", "last.ckpt", "best.txt"):
        assert os.path.exists(os.path.join(out, name)), name
    header = open(os.path.join(out, "metrics.tsv"), encoding="utf-8").readline()
    assert "simkl" in header


def test_train_missing_required_key_fails_cleanly(workspace, tmp_path, capsys):
    out = str(tmp_path / "nope")
    args = [a for a in train_args(workspace, out) if not a.startswith("--vocab=")]
    rc = main(["train"] + args)
    assert rc != 0
    assert "vocab" in capsys.readouterr().err
    assert not os.path.exists(out)


def test_train_unknown_key_fails(workspace, tmp_path, capsys):
    rc = main(["train"] + train_args(workspace, str(tmp_path / "x")) +
              ["--learning_rate_warmup=5"])
    assert rc != 0
    assert "learning_rate_warmup" in capsys.readouterr().err


def test_config_echo_reproduces_run_bit_identically(workspace, tmp_path, capsys):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    rc = main(["train"] + train_args(workspace, out1, objective="rdrop", alpha=2.0))
    assert rc == 0
    echoed = os.path.join(out1, "config.txt")
    rc = main(["train", "--config", echoed, f"--out_dir={out2}"])
    assert rc == 0
    a = open(os.path.join(out1, "best.ckpt"), "rb").read()
    b = open(os.path.join(out2, "best.ckpt"), "rb").read()
    # metadata embeds out_dir, so compare tensors from the parsed containers
    from simcut.model import load_checkpoint as load
    pa, _ = load(os.path.join(out1, "best.ckpt"))
    pb, _ = load(os.path.join(out2, "best.ckpt"))
    for (na, ta), (nb, tb) in zip(pa.items(), pb.items()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()

    def rows(path):
        out = []
        for line in open(path, encoding="utf-8").read().splitlines():
            cols = line.split("\t")
            out.append("\t".join(cols[:-1]))  # drop wall_seconds
        return out

    assert rows(os.path.join(out1, "metrics.tsv")) == rows(os.path.join(out2, "metrics.tsv"))


def test_finetune_from_checkpoint(workspace, tmp_path, capsys):
    pre = str(tmp_path / "pre")
    rc = main(["train"] + train_args(workspace, pre, phase="pretrain", epochs=1))
    assert rc == 0
    ft = str(tmp_path / "ft")
    rc = main(["finetune", "--init", os.path.join(pre, "best.ckpt")] +
              train_args(workspace, ft, epochs=1))
    assert rc == 0
    _, meta_pre = load_checkpoint(os.path.join(pre, "best.ckpt"))
    _, meta_ft = load_checkpoint(os.path.join(ft, "best.ckpt"))
    assert meta_pre["phase"] == "pretrain"
    assert meta_ft["phase"] == "finetune"


# ---------------------------------------------------------------------------
# translate / evaluate / perturb-eval
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(workspace, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("model"))
    rc = main(["train"] + train_args(workspace, out, epochs=3, objective="ce"))
    assert rc == 0
    return os.path.join(out, "best.ckpt")


def test_translate_beam_one_equals_greedy(workspace, trained, tmp_path, capsys):
    inp = str(tmp_path / "in.txt")
    with open(inp, "w", encoding="utf-8") as f:
        for s, _ in workspace["corpus"]["test"][:6]:
            f.write(s + "\n")
    out_beam = str(tmp_path / "beam.txt")
    out_greedy = str(tmp_path / "greedy.txt")
    base = ["translate", "--checkpoint", trained, "--vocab", workspace["vocab"],
            "--merges", workspace["merges"], "--input", inp]
    assert main(base + ["--output", out_beam, "--beam", "1"]) == 0
    assert main(base + ["--output", out_greedy, "--greedy"]) == 0
    assert open(out_beam, "rb").read() == open(out_greedy, "rb").read()
    assert len(open(out_beam, encoding="utf-8").read().splitlines()) == 6


def test_translate_checkpoint_vocab_mismatch(workspace, trained, tmp_path, capsys):
    bad_vocab = str(tmp_path / "bad.txt")
    with open(bad_vocab, "w", encoding="utf-8") as f:
        f.write("<pad>\n<bos>\n<eos>\n<unk>\n<fwd>\n<rev>\nxx\n")
    rc = main(["translate", "--checkpoint", trained, "--vocab", bad_vocab,
               "--merges", workspace["merges"], "--input", workspace["paths"]["test"][0],
               "--output", str(tmp_path / "o.txt")])
    assert rc != 0
    assert "mismatch" in capsys.readouterr().err


def test_evaluate_identity_prints_100(workspace, tmp_path, capsys):
    ref = workspace["paths"]["test"][1]
    rc = main(["evaluate", "--hyp", ref, "--ref", ref])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("BLEU = 100.00")


def test_evaluate_length_mismatch_fails(workspace, tmp_path, capsys):
    short = str(tmp_path / "short.txt")
    with open(short, "w", encoding="utf-8") as f:
        f.write("one line\n")
    rc = main(["evaluate", "--hyp", short, "--ref", workspace["paths"]["test"][1]])
    assert rc != 0


def test_perturb_eval_default_probs(workspace, trained, tmp_path, capsys):
    table_path = str(tmp_path / "table.tsv")
    rc = main(["perturb-eval", "--checkpoint", trained, "--vocab", workspace["vocab"],
               "--merges", workspace["merges"], "--src", workspace["paths"]["test"][0],
               "--ref", workspace["paths"]["test"][1], "--out", table_path,
               "--beam", "1"])
    assert rc == 0
    lines = open(table_path, encoding="utf-8").read().splitlines()
    assert lines[0].startswith("#")
    assert len(lines) == 1 + 4
    probs = [float(ln.split("\t")[0]) for ln in lines[1:]]
    assert probs == [0.0, 0.01, 0.05, 0.1]
