"""Command-line interface: ``hran prep|split|vocab|train|eval|generate|chat|attn-export``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import unicodedata
from dataclasses import asdict, dataclass, field
from pathlib import Path

from hran import numerics as nx
from hran.checkpoint import load_checkpoint
from hran.corpus import (
    Example,
    FilterRules,
    build_vocab,
    encode_batch,
    filter_conversations,
    load_raw,
    read_examples,
    split_dataset,
    Vocab,
    write_examples,
)
from hran.decoding import beam_search, greedy_decode
from hran.errors import FormatError, HranError, NumericError
from hran.evaluation import evaluate_examples
from hran.model import HRAN, ModelConfig
from hran.training import TrainSchedule, fit, restore
from hran.visualize import dumps_document, render_svg, trace_document

logger = logging.getLogger("hran")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class DecodeOptions:
    beam: int = 10
    nbest: int = 1
    max_len: int = 50
    allow_unk: bool = False
    greedy: bool = False
    length_normalize: bool = False


@dataclass
class RunConfig:
    """Everything a training run depends on; serialised as JSON."""

    paths: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**obj)
        except (ValueError, TypeError) as exc:
            raise FormatError(f"bad run config {path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()[:16]


def _run_stamp(command: str, model: HRAN, options: dict) -> dict:
    return {"command": command, "model": model.config.fingerprint(),
            "fingerprint": fingerprint({"command": command, "model": model.config.to_dict(), "options": options})}


# ---------------------------------------------------------------- commands


def cmd_prep(raw_path, out_path, rules: FilterRules = FilterRules()) -> dict:
    examples, tally = filter_conversations(load_raw(raw_path), rules)
    write_examples(out_path, examples)
    return tally


def cmd_vocab(data_path, side: str, size: int, out_path) -> Vocab:
    vocab = build_vocab(read_examples(data_path), side, size)
    vocab.save(out_path)
    return vocab


def cmd_split(data_path, out_dir, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    parts = split_dataset(read_examples(data_path), nx.make_rng(seed), fractions)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = {}
    for name, part in zip(("train", "valid", "test"), parts):
        write_examples(out_dir / f"{name}.jsonl", part)
        sizes[name] = len(part)
    return sizes


def cmd_train(run: RunConfig, resume=None):
    paths = run.paths
    cv, rv = Vocab.load(paths["context_vocab"]), Vocab.load(paths["response_vocab"])
    train, valid = read_examples(paths["train"]), read_examples(paths["valid"])
    model_kwargs = {"seed": run.seed, **run.model,
                    "context_vocab_size": len(cv), "response_vocab_size": len(rv)}
    model = HRAN(ModelConfig(**model_kwargs))
    schedule = TrainSchedule(**{"seed": run.seed, **run.schedule})
    ckpt_path = paths.get("checkpoint")
    report_path = paths.get("report")
    if report_path and resume is None:
        Path(report_path).write_text("", encoding="utf-8")
    report = fit(model, train, valid, schedule, cv, rv, checkpoint_path=ckpt_path,
                 best_path=paths.get("best"), report_path=report_path, resume_from=resume)
    summary = {"stop_reason": report.stop_reason, "best_epoch": report.best_epoch,
               "best_perplexity": report.best_perplexity, "epochs": len(report.epochs),
               "run": {"fingerprint": fingerprint(run.to_dict())}}
    if paths.get("summary"):
        Path(paths["summary"]).write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    return report, summary


def load_model(ckpt_path):
    model, _, cv, rv = restore(load_checkpoint(ckpt_path))
    if cv is None or rv is None:
        raise FormatError(f"checkpoint {ckpt_path} does not carry vocabularies")
    return model, cv, rv


def cmd_eval(ckpt_path, data_path, batch_size=None, normalization="token"):
    ckpt = load_checkpoint(ckpt_path)
    model, _, cv, rv = restore(ckpt)
    if batch_size is None:
        batch_size = (ckpt.schedule or {}).get("eval_batch_size", 64)
    report = evaluate_examples(model, read_examples(data_path), cv, rv, batch_size, normalization)
    report.extra["run"] = _run_stamp("eval", model, {"batch_size": batch_size, "normalization": normalization})
    return report


def parse_context_line(line: str) -> list:
    return [[t for t in turn.split(" ") if t] for turn in line.rstrip("\r\n").split("\t")]


def _decode(model: HRAN, cv: Vocab, rv: Vocab, context_tokens: list, opts: DecodeOptions) -> list:
    ids = [cv.encode(u) for u in context_tokens]
    if opts.greedy:
        tokens, logprob, _ = greedy_decode(model, ids, opts.max_len, opts.allow_unk)
        hyps = [(tokens, logprob)]
    else:
        hyps = beam_search(model, ids, opts.beam, opts.nbest, opts.max_len, opts.allow_unk, opts.length_normalize)
    return [{"response": " ".join(rv.decode(t)), "tokens": rv.decode(t), "logprob": lp} for t, lp in hyps]


def cmd_generate(ckpt_path, contexts_path, out_path, opts: DecodeOptions = DecodeOptions()) -> int:
    model, cv, rv = load_model(ckpt_path)
    stamp = _run_stamp("generate", model, asdict(opts))
    lines = [l for l in Path(contexts_path).read_text(encoding="utf-8").split("\n") if l.strip()]
    with open(out_path, "w", encoding="utf-8") as fh:
        for n, line in enumerate(lines, start=1):
            context = parse_context_line(line)
            try:
                nbest = _decode(model, cv, rv, context, opts)
            except HranError as exc:
                raise type(exc)(f"{contexts_path} line {n}: {exc}") from exc
            fh.write(json.dumps({"context": context, "nbest": nbest, "run": stamp},
                                ensure_ascii=False, sort_keys=True) + "\n")
    return len(lines)


def _clean(line: str) -> list:
    text = "".join(" " if unicodedata.category(ch).startswith(("C", "Z")) else ch for ch in line)
    return text.split()


class ChatSession:
    """Rolling multi-turn context; the model answers once the context has two turns."""

    def __init__(self, model: HRAN, cv: Vocab, rv: Vocab, opts: DecodeOptions = DecodeOptions(),
                 opening: str = "你好", trace: bool = False):
        self.model, self.cv, self.rv, self.opts = model, cv, rv, opts
        self.opening = _clean(opening)
        self.trace = trace
        self.reset()

    def reset(self) -> None:
        self.context = [list(self.opening)] if self.opening else []

    def handle(self, line: str) -> list:
        """Process one input line and return the lines to print."""
        stripped = line.strip()
        if stripped == "/reset":
            self.reset()
            return ["[context cleared]"]
        if stripped.startswith("/trace"):
            arg = stripped.split()[1:] or [""]
            if arg[0] not in ("on", "off"):
                return ["usage: /trace on|off"]
            self.trace = arg[0] == "on"
            return [f"[trace {arg[0]}]"]
        tokens = _clean(line)
        if not tokens:
            return []
        self.context.append(tokens)
        if len(self.context) < 2:
            return ["[say one more turn so there is some context]"]
        words = _decode(self.model, self.cv, self.rv, self.context, self.opts)[0]["tokens"]
        lines = [("bot: " + " ".join(words)).rstrip()]
        if self.trace:
            batch = encode_batch([Example(self.context, words)], self.cv, self.rv)
            with nx.no_grad():
                trace = self.model.forward_nll(batch, with_trace=True).traces[0]
            lines.append("beta: " + " ".join(f"{b:.6f}" for b in trace.utterance_importance()))
        if words:
            self.context.append(words)
        return lines


def cmd_chat(ckpt_path, opts: DecodeOptions = DecodeOptions(), stdin=None, stdout=None,
             trace: bool = False, opening: str = "你好") -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    model, cv, rv = load_model(ckpt_path)
    session = ChatSession(model, cv, rv, opts, opening, trace)
    interactive = stdin.isatty() if hasattr(stdin, "isatty") else False
    if session.context:
        stdout.write("[opening: " + " ".join(session.context[0]) + "]\n")
    while True:
        if interactive:
            stdout.write("> ")
            stdout.flush()
        line = stdin.readline()
        if not line or line.strip() == "/quit":
            break
        for out in session.handle(line):
            stdout.write(out + "\n")
        stdout.flush()


def cmd_attn_export(ckpt_path, context_path, json_path, svg_path, response_path=None,
                    opts: DecodeOptions = DecodeOptions()) -> dict:
    model, cv, rv = load_model(ckpt_path)
    lines = [l for l in Path(context_path).read_text(encoding="utf-8").split("\n") if l.strip()]
    if not lines:
        raise FormatError(f"{context_path} holds no context")
    context = parse_context_line(lines[0])
    if response_path is not None:
        response = Path(response_path).read_text(encoding="utf-8").split()
        batch = encode_batch([Example(context, response)], cv, rv)
        with nx.no_grad():
            trace = model.forward_nll(batch, with_trace=True).traces[0]
        mode = "teacher-forced"
    else:
        ids = [cv.encode(u) for u in context]
        out, _, trace = greedy_decode(model, ids, opts.max_len, opts.allow_unk)
        response = rv.decode(out)
        mode = "greedy"
    doc = trace_document(trace, context, response, mode,
                         _run_stamp("attn-export", model, {"mode": mode, "max_len": opts.max_len,
                                                           "allow_unk": opts.allow_unk}))
    Path(json_path).write_text(dumps_document(doc), encoding="utf-8")
    Path(svg_path).write_text(render_svg(doc), encoding="utf-8")
    return doc


# ---------------------------------------------------------------- argument parsing


def _decode_args(p):
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--allow-unk", action="store_true")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--length-normalize", action="store_true")


def _opts(args) -> DecodeOptions:
    return DecodeOptions(args.beam, args.nbest, args.max_len, args.allow_unk, args.greedy, args.length_normalize)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hran", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="filter a raw corpus into JSON Lines examples")
    p.add_argument("--in", dest="raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-turns", type=int, default=3)
    p.add_argument("--max-utt-len", type=int, default=50)
    p.add_argument("--max-resp-count", type=int, default=50)

    p = sub.add_parser("split", help="shuffle examples into train/valid/test files")
    p.add_argument("--in", dest="data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("vocab", help="build a context or response vocabulary")
    p.add_argument("--data", required=True)
    p.add_argument("--side", choices=("context", "response"), required=True)
    p.add_argument("--size", type=int, default=40000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a data set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--normalization", choices=("token", "example"), default="token")
    p.add_argument("--out")

    p = sub.add_parser("generate", help="n-best responses for TAB-separated contexts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--contexts", required=True)
    p.add_argument("--out", required=True)
    _decode_args(p)

    p = sub.add_parser("chat", help="interactive multi-turn session")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--opening", default="你好")
    _decode_args(p)

    p = sub.add_parser("attn-export", help="export averaged attention as JSON and SVG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--response")
    p.add_argument("--json", required=True)
    p.add_argument("--svg", required=True)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--allow-unk", action="store_true")
    return parser


def _dispatch(args) -> None:
    if args.command == "prep":
        tally = cmd_prep(args.raw, args.out, FilterRules(args.min_turns, args.max_utt_len, args.max_resp_count))
        print(json.dumps(tally, sort_keys=True))
    elif args.command == "split":
        print(json.dumps(cmd_split(args.data, args.out_dir, args.fractions, args.seed), sort_keys=True))
    elif args.command == "vocab":
        vocab = cmd_vocab(args.data, args.side, args.size, args.out)
        print(json.dumps({"size": len(vocab), "coverage": vocab.coverage}))
    elif args.command == "train":
        _, summary = cmd_train(RunConfig.load(args.config), args.resume)
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "eval":
        text = cmd_eval(args.ckpt, args.data, args.batch_size, args.normalization).to_json() + "\n"
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    elif args.command == "generate":
        cmd_generate(args.ckpt, args.contexts, args.out, _opts(args))
    elif args.command == "chat":
        cmd_chat(args.ckpt, _opts(args), trace=args.trace, opening=args.opening)
    elif args.command == "attn-export":
        cmd_attn_export(args.ckpt, args.context, args.json, args.svg, args.response,
                        DecodeOptions(max_len=args.max_len, allow_unk=args.allow_unk))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _dispatch(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HranError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
