import io
import json
import os
from pathlib import Path

import numpy as np
import pytest

from hran.cli import ChatSession, DecodeOptions, build_parser, cmd_chat, load_model, main, parse_context_line
from toydata import key_examples, run_pipeline, toy_run_config, write_raw

GOLDEN = Path(__file__).parent / "golden"
UPDATE = os.environ.get("HRAN_UPDATE_GOLDEN") == "1"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("pipeline")
    codes = run_pipeline(workdir)
    assert codes == [0] * len(codes)
    return workdir


def in_dir(workdir, argv):
    here = os.getcwd()
    os.chdir(workdir)
    try:
        return main(argv)
    finally:
        os.chdir(here)


def read_jsonl(path):
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines()]


def check_golden(name, text):
    path = GOLDEN / name
    if UPDATE:
        path.parent.mkdir(exist_ok=True)
        path.write_text(text, encoding="utf-8")
    assert path.read_text(encoding="utf-8") == text


# ---------------------------------------------------------------- parsing and exit codes


def test_prep_defaults():
    args = build_parser().parse_args(["prep", "--in", "a", "--out", "b"])
    assert (args.min_turns, args.max_utt_len, args.max_resp_count) == (3, 50, 50)


def test_usage_errors_exit_with_two(capsys):
    assert main([]) == 2
    assert main(["train"]) == 2
    assert main(["generate", "--ckpt", "x", "--contexts", "y", "--out", "z", "--beam", "wide"]) == 2


def test_missing_files_exit_with_three(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "none"), "--data", str(tmp_path / "none")]) == 3
    assert "error" in capsys.readouterr().err


def test_corrupt_checkpoint_reports_offset(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"HRAN1\x05")
    assert main(["eval", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", "x"]) == 3
    assert "offset" in capsys.readouterr().err


def test_overflowing_training_exits_with_four(tmp_path, capsys):
    write_raw(tmp_path / "raw.txt", key_examples(20, 0))
    toy_run_config(tmp_path, max_epochs=1, precision="float32", init_variance=1e40)
    argv_list = [
        ["prep", "--in", "raw.txt", "--out", "all.jsonl"],
        ["split", "--in", "all.jsonl", "--out-dir", "."],
        ["vocab", "--data", "train.jsonl", "--side", "context", "--out", "cv.txt"],
        ["vocab", "--data", "train.jsonl", "--side", "response", "--out", "rv.txt"],
    ]
    assert [in_dir(tmp_path, a) for a in argv_list] == [0, 0, 0, 0]
    with np.errstate(all="ignore"):
        assert in_dir(tmp_path, ["train", "--config", "run.json"]) == 4
    assert "numeric error" in capsys.readouterr().err


def test_bad_run_config_exits_with_three(tmp_path, capsys):
    (tmp_path / "run.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "run.json")]) == 3


# ---------------------------------------------------------------- prep / split / vocab


def test_prep_writes_tally_and_examples(tmp_path, capsys):
    lines = ["a\tb\tc", "a\tb", "a\t" + " ".join(["x"] * 4) + "\tc", "p\tq\tr", ""]
    (tmp_path / "raw.txt").write_text("\n".join(lines), encoding="utf-8")
    code = main(["prep", "--in", str(tmp_path / "raw.txt"), "--out", str(tmp_path / "out.jsonl"), "--max-utt-len", "3"])
    assert code == 0
    tally = json.loads(capsys.readouterr().out)
    assert tally["input"] == 4 and tally["kept"] == 2
    assert tally["min_turns"] == 1 and tally["max_utterance_length"] == 1
    assert read_jsonl(tmp_path / "out.jsonl")[1] == {"context": [["p"], ["q"]], "response": ["r"]}


def test_prep_of_empty_corpus(tmp_path, capsys):
    (tmp_path / "raw.txt").write_text("")
    assert main(["prep", "--in", str(tmp_path / "raw.txt"), "--out", str(tmp_path / "out.jsonl")]) == 0
    assert (tmp_path / "out.jsonl").read_text() == ""


def test_pipeline_files(pipeline):
    sizes = [len(read_jsonl(pipeline / f"{n}.jsonl")) for n in ("train", "valid", "test")]
    assert sizes == [96, 12, 12]
    assert (pipeline / "cv.txt").read_text().splitlines()[:4] == ["<pad>", "<unk>", "<bos>", "<eos>"]
    epochs = read_jsonl(pipeline / "report.jsonl")
    summary = json.loads((pipeline / "summary.json").read_text())
    assert len(epochs) == summary["epochs"]
    assert min(e["valid_ppl"] for e in epochs) == summary["best_perplexity"]


# ---------------------------------------------------------------- eval / generate


def test_eval_report(pipeline):
    report = json.loads((pipeline / "eval.json").read_text())
    nll = report["per_example_nll"]
    assert len(nll) == 12 and report["total_tokens"] == 24
    assert abs(np.exp(sum(nll) / 24) - report["perplexity"]) < 1e-12
    summary = json.loads((pipeline / "summary.json").read_text())
    assert report["perplexity"] == summary["best_perplexity"]


def test_generate_nbest(pipeline):
    rows = read_jsonl(pipeline / "gen.jsonl")
    assert len(rows) == 3
    assert rows[1]["context"] == [["k4"], ["f2"]]
    for row in rows:
        scores = [h["logprob"] for h in row["nbest"]]
        assert len(scores) == 2 and scores[0] >= scores[1]
        assert row["run"]["command"] == "generate"


def test_generate_beam_one_equals_greedy(pipeline):
    assert in_dir(pipeline, ["generate", "--ckpt", "best.ckpt", "--contexts", "ctx.txt", "--out", "b1.jsonl", "--beam", "1"]) == 0
    assert in_dir(pipeline, ["generate", "--ckpt", "best.ckpt", "--contexts", "ctx.txt", "--out", "g.jsonl", "--greedy"]) == 0
    beam = [r["nbest"] for r in read_jsonl(pipeline / "b1.jsonl")]
    greedy = [r["nbest"] for r in read_jsonl(pipeline / "g.jsonl")]
    assert beam == greedy


def test_generate_rejects_single_turn_context(pipeline, capsys):
    (pipeline / "one.txt").write_text("k1 f2\n")
    assert in_dir(pipeline, ["generate", "--ckpt", "best.ckpt", "--contexts", "one.txt", "--out", "x.jsonl"]) == 3
    assert "line 1" in capsys.readouterr().err


def test_parse_context_line():
    assert parse_context_line("a b\tc\r\n") == [["a", "b"], ["c"]]


# ---------------------------------------------------------------- attention export


def test_attn_export_averages_are_step_means(pipeline):
    doc = json.loads((pipeline / "attn.json").read_text())
    steps = doc["steps"]
    beta = np.mean([s["beta"] for s in steps], axis=0)
    assert np.allclose(doc["utterance_importance"], beta, rtol=0, atol=1e-9)
    for i, row in enumerate(doc["word_importance"]):
        assert np.allclose(row, np.mean([s["alpha"][i] for s in steps], axis=0), rtol=0, atol=1e-9)
        assert len(row) == len(doc["context"][i])
    assert doc["mode"] == "greedy"


def test_attn_export_teacher_forced(pipeline):
    (pipeline / "resp.txt").write_text("r1 r2\n")
    code = in_dir(pipeline, ["attn-export", "--ckpt", "best.ckpt", "--context", "ctx.txt", "--response", "resp.txt",
                             "--json", "tf.json", "--svg", "tf.svg"])
    assert code == 0
    doc = json.loads((pipeline / "tf.json").read_text())
    assert doc["mode"] == "teacher-forced" and doc["response"] == ["r1", "r2"]
    assert len(doc["steps"]) == 3
    svg = (pipeline / "tf.svg").read_text()
    assert svg.count("<rect") == 3 + 5 and "r1 r2" in svg


def test_attn_export_golden(pipeline):
    check_golden("attn.json", (pipeline / "attn.json").read_text(encoding="utf-8"))
    check_golden("attn.svg", (pipeline / "attn.svg").read_text(encoding="utf-8"))


# ---------------------------------------------------------------- chat


SCRIPT = "f1 f2\n/trace on\nk3 f1\n\n/trace maybe\n/reset\nk2\n/trace off\nf0 f0\n/quit\nnever read\n"


def chat_transcript(ckpt):
    out = io.StringIO()
    cmd_chat(ckpt, DecodeOptions(beam=3, max_len=6), stdin=io.StringIO(SCRIPT), stdout=out)
    return out.getvalue()


def test_chat_transcript_is_reproducible(pipeline):
    first = chat_transcript(pipeline / "best.ckpt")
    assert first == chat_transcript(pipeline / "best.ckpt")
    check_golden("chat.txt", first)


def test_chat_commands(pipeline):
    lines = chat_transcript(pipeline / "best.ckpt").splitlines()
    assert lines[0] == "[opening: 你好]"
    assert "[trace on]" in lines and "[context cleared]" in lines and "usage: /trace on|off" in lines
    assert sum(l.startswith("bot:") for l in lines) == 4
    assert sum(l.startswith("beta:") for l in lines) == 2


def test_chat_session_context_handling(pipeline):
    model, cv, rv = load_model(pipeline / "best.ckpt")
    session = ChatSession(model, cv, rv, DecodeOptions(beam=2, max_len=4), opening="")
    assert session.handle("f1") == ["[say one more turn so there is some context]"]
    assert session.handle("   ") == []
    reply = session.handle("k2 \x07 f3")
    assert reply[0].startswith("bot:")
    assert session.context[1] == ["k2", "f3"]
    session.handle("/reset")
    assert session.context == []


def test_chat_beta_line_is_a_distribution(pipeline):
    model, cv, rv = load_model(pipeline / "best.ckpt")
    session = ChatSession(model, cv, rv, DecodeOptions(beam=2, max_len=4), trace=True)
    lines = session.handle("k1 f2")
    beta = [float(x) for x in lines[1].split()[1:]]
    assert len(beta) == 2 and abs(sum(beta) - 1) < 1e-5


# ---------------------------------------------------------------- resume through the CLI


def test_train_resume_matches_uninterrupted_run(pipeline, tmp_path):
    straight, split = tmp_path / "straight", tmp_path / "split"
    for d in (straight, split):
        d.mkdir()
        for name in ("train.jsonl", "valid.jsonl", "cv.txt", "rv.txt"):
            (d / name).write_bytes((pipeline / name).read_bytes())
        toy_run_config(d, max_epochs=4)
    assert in_dir(straight, ["train", "--config", "run.json"]) == 0
    toy_run_config(split, max_epochs=2)
    assert in_dir(split, ["train", "--config", "run.json"]) == 0
    toy_run_config(split, max_epochs=4)
    assert in_dir(split, ["train", "--config", "run.json", "--resume", "last.ckpt"]) == 0
    for name in ("last.ckpt", "best.ckpt", "report.jsonl", "summary.json"):
        assert (straight / name).read_bytes() == (split / name).read_bytes(), name
