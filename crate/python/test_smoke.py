"""Smoke test for the hierformer_py extension.

Build first with `cargo build --release -p hierformer-py`, then run
`python -m pytest python/`. HIERFORMER_PY_LIB overrides the library path.
"""

import importlib.util
import math
import os
import pathlib
import shutil
import sys

import pytest

ROOT = pathlib.Path(__file__).resolve().parents[1]


def _library():
    env = os.environ.get("HIERFORMER_PY_LIB")
    if env:
        return pathlib.Path(env)
    for profile in ("release", "debug"):
        p = ROOT / "target" / profile / "libhierformer_py.so"
        if p.exists():
            return p
    pytest.skip("extension not built; run cargo build --release -p hierformer-py")


@pytest.fixture(scope="module")
def hp(tmp_path_factory):
    d = tmp_path_factory.mktemp("ext")
    shutil.copy(_library(), d / "hierformer_py.so")
    spec = importlib.util.spec_from_file_location("hierformer_py", d / "hierformer_py.so")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    sys.modules["hierformer_py"] = mod
    return mod


def test_tokenizer_round_trip(hp, tmp_path):
    text = ["the quarterly revenue rose", "revenue fell in the quarter", "the board met"] * 5
    tok = hp.Tokenizer.train(text, 300)
    assert tok.size <= 300
    ids = tok.encode("the revenue rose")
    assert tok.decode(ids) == "the revenue rose"
    tok.save(str(tmp_path / "vocab.txt"))
    again = hp.Tokenizer.load(str(tmp_path / "vocab.txt"))
    assert again.encode("the revenue rose") == ids


def test_metrics(hp):
    assert hp.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    assert hp.mcc([0, 0, 0, 0], [1, 0, 1, 0]) == 0.0
    assert hp.f1([1, 1, 1, 1], [1, 0, 1, 0]) == pytest.approx(2 * 0.5 / 1.5)
    a = hp.bootstrap_auc([0.1, 0.4, 0.35, 0.8] * 10, [0, 0, 1, 1] * 10, 50, 40, 3)
    b = hp.bootstrap_auc([0.1, 0.4, 0.35, 0.8] * 10, [0, 0, 1, 1] * 10, 50, 40, 3)
    assert a == b and a[0] <= 0.75 <= a[1]
    assert hp.top_k_summary([0.1, 0.7, 0.2], 2) == [1, 2]
    with pytest.raises(ValueError):
        hp.top_k_summary([0.1], 2)


def test_split_sentences(hp):
    assert hp.split_sentences("Revenue rose. Costs fell.") == ["Revenue rose.", "Costs fell."]


def test_cli_pipeline_and_inference(hp, tmp_path):
    run = str(tmp_path / "run")
    cfg = str(ROOT / "configs" / "desk.toml")
    tiny = [
        "--corpus.n_docs=80",
        "--tokenizer.vocab_size=300",
        "--model.vocab_size=300",
        "--model.model_dim=16",
        "--model.ff_dim=16",
        "--model.max_words=128",
        "--model.word_layers=1",
        "--model.sentence_layers=1",
        "--finetune.epochs=1",
        "--run.finetune_init=random",
    ]
    for stage in ("gen-corpus", "tokenizer-train", "labels", "finetune"):
        assert hp.run_cli([stage, "-c", cfg, "--run-dir", run, *tiny]) == 0, stage
    assert hp.run_cli(["no-such-stage"]) != 0

    tok = hp.Tokenizer.load(f"{run}/tokenizer/vocab.txt")
    model = hp.Model.load(f"{run}/finetune/best.ckpt")
    assert model.precision == "f32"
    doc = ["Revenue grew this quarter.", "The board approved a dividend.", "Costs were flat."]
    p = model.predict(doc, tok)
    assert 0.0 < p < 1.0
    raw = model.sentence_scores(doc, tok, "raw")
    assert len(raw) == 3 and math.isclose(sum(raw), 1.0, abs_tol=1e-5)
    norm = model.sentence_scores(doc, tok, channel="norm")
    assert all(s >= 0.0 for s in norm)
    with pytest.raises(ValueError):
        model.sentence_scores(doc, tok, "bogus")
