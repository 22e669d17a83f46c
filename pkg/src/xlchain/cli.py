"""Command-line entry point: ``xlchain <command> ...``.

Exit codes: 0 success, 2 input or config error, 3 runtime or numeric error.
Nothing is overwritten without ``--force``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from xlchain.data import HEADER, gen_synthetic, load_counts, load_olid_tsv, stats, stats_from_counts, write_olid_tsv
from xlchain.errors import ConfigError, InputError, XlchainError
from xlchain.evaluation import evaluate, metrics_report, zero_shot
from xlchain.model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from xlchain.tokenizer import DEFAULT_VOCAB_SIZE, Vocabulary, train_bpe
from xlchain.training import TrainConfig, finetune_chain, pretrain

log = logging.getLogger("xlchain")

EXIT_INPUT = 2
EXIT_RUNTIME = 3


# -- run configuration -----------------------------------------------------


class RunConfig:
    """Merged view of a ``key=value`` config file with ``[section]`` headers.

    Sections: ``[data]`` maps language -> TSV path in chain order, ``[paths]``
    holds vocab / pretrained / out_dir / report, ``[model]`` and ``[train]``
    override ModelConfig and TrainConfig fields. Relative paths resolve
    against the config file's directory.
    """

    def __init__(self, path: str | Path, overrides: list[str] | None = None):
        self.path = Path(path)
        self.base = self.path.parent
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str  # language tags and keys are case-sensitive
        try:
            text = self.path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise InputError(f"{self.path}: config file not found") from None
        try:
            parser.read_string(text, source=str(self.path))
        except configparser.Error as exc:
            raise ConfigError(f"{self.path}: {exc}") from None
        self.sections = {name: dict(parser[name]) for name in parser.sections()}
        for item in overrides or []:
            key, sep, value = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            self.sections.setdefault(section, {})[name] = value
        unknown = set(self.sections) - {"data", "paths", "model", "train", "chain"}
        if unknown:
            raise ConfigError(f"{self.path}: unknown section(s) {sorted(unknown)}")

    def section(self, name: str) -> dict[str, str]:
        return self.sections.get(name, {})

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def path_for(self, key: str) -> Path:
        value = self.section("paths").get(key)
        if not value:
            raise ConfigError(f"{self.path}: [paths] {key} is required")
        return self.resolve(value)

    def data_paths(self, chain_only: bool = True) -> list[tuple[str, Path]]:
        """Languages and TSV paths; the ``[chain] languages`` order (or all of ``[data]``)."""
        data = self.section("data")
        order = self.section("chain").get("languages") if chain_only else None
        languages = [x.strip() for x in order.split(",") if x.strip()] if order else list(data)
        if not languages:
            raise ConfigError(f"{self.path}: no languages configured in [data]")
        missing = [lang for lang in languages if lang not in data]
        if missing:
            raise ConfigError(f"{self.path}: no [data] path for {missing}")
        return [(lang, self.resolve(data[lang])) for lang in languages]

    def train_config(self) -> TrainConfig:
        return _coerce(TrainConfig, self.section("train"), "train")

    def model_config(self, vocab_size: int, max_len: int) -> ModelConfig:
        values = {"vocab_size": str(vocab_size), "max_positions": str(max_len), **self.section("model")}
        return _coerce(ModelConfig, values, "model")


def _coerce(cls, values: dict[str, str], section: str):
    known = {f.name: f for f in fields(cls)}
    extra = set(values) - set(known)
    if extra:
        raise ConfigError(f"[{section}] unknown key(s) {sorted(extra)}")
    kwargs = {}
    for name, raw in values.items():
        default = known[name].default
        try:
            kwargs[name] = type(default)(raw) if not isinstance(default, bool) else raw.lower() in ("1", "true", "yes")
        except ValueError:
            raise ConfigError(f"[{section}] {name}={raw!r} is not a valid {type(default).__name__}") from None
    return cls(**kwargs)


# -- helpers ---------------------------------------------------------------


def _require_files(paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise InputError(f"{p}: file not found")


def _guard_outputs(paths, force: bool) -> None:
    for p in paths:
        if Path(p).exists() and not force:
            raise InputError(f"{p} already exists (use --force to overwrite)")


def _read_corpus(path: Path) -> list[str]:
    """Texts from an OLID-style TSV (tweet column) or a plain one-sentence-per-line file."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n").split("\t")
    if first[:2] == list(HEADER[:2]):
        return load_olid_tsv(path, path.stem, "train").texts
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _write_json(doc: dict, out: str | None, force: bool) -> None:
    text = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        _guard_outputs([out], force)
        Path(out).write_text(text, encoding="utf-8")


# -- commands --------------------------------------------------------------


def cmd_tokenizer(args) -> None:
    paths = [Path(p) for p in args.corpus]
    _require_files(paths)
    _guard_outputs([args.out], args.force)
    texts = [t for p in paths for t in _read_corpus(p)]
    vocab = train_bpe(texts, args.vocab_size)
    vocab.save(args.out)
    log.info("event=tokenizer vocab_size=%d merges=%d out=%s", vocab.size, len(vocab.merges), args.out)


def _load_datasets(run: RunConfig):
    pairs = run.data_paths(chain_only=False)
    _require_files(p for _, p in pairs)
    return [load_olid_tsv(p, lang, "train") for lang, p in pairs]


def cmd_pretrain(args) -> None:
    run = RunConfig(args.config, args.set)
    if args.seed is not None:
        run.sections.setdefault("train", {})["seed"] = str(args.seed)
    if args.steps is not None:
        run.sections.setdefault("train", {})["pretrain_steps"] = str(args.steps)
    config = run.train_config()
    vocab_path = run.path_for("vocab")
    out = Path(args.out) if args.out else run.path_for("pretrained")
    _require_files([vocab_path])
    loss_log = out.with_name(out.name + ".loss.tsv")
    _guard_outputs([out, loss_log], args.force)
    datasets = _load_datasets(run)
    vocab = Vocabulary.load(vocab_path)
    params = init_model(run.model_config(vocab.size, config.max_len), config.seed)
    texts = [t for d in datasets for t in d.texts]

    def report(step: int, loss: float) -> None:
        if step % 10 == 0 or step == config.pretrain_steps - 1:
            log.info("event=pretrain step=%d loss=%.6f", step, loss)

    result = pretrain(params, texts, vocab, config, on_step=report)
    save_checkpoint(params, vocab, out, {"chain": "", "seed": str(config.seed)})
    loss_log.write_text("step\tloss\n" + "".join(f"{i}\t{x:.6f}\n" for i, x in enumerate(result.losses)), encoding="utf-8")
    log.info("event=pretrain_done steps=%d out=%s", len(result.losses), out)


def cmd_chain(args) -> None:
    run = RunConfig(args.config, args.set)
    if args.seed is not None:
        run.sections.setdefault("train", {})["seed"] = str(args.seed)
    config = run.train_config()
    start = run.path_for("pretrained")
    out_dir = Path(args.out_dir) if args.out_dir else run.path_for("out_dir")
    report_path = run.path_for("report") if "report" in run.section("paths") else out_dir / "report.json"
    pairs = run.data_paths()
    _require_files([start] + [p for _, p in pairs])
    _guard_outputs([report_path, out_dir / "final.ckpt"], args.force)
    datasets = [load_olid_tsv(p, lang, "train") for lang, p in pairs]
    ckpt = load_checkpoint(start)
    if ckpt.meta.get("chain"):
        log.warning("event=chain_start note=starting_from_fine_tuned_checkpoint chain=%s", ckpt.meta["chain"])
    extra = {"model": asdict(ckpt.config), "data": {lang: os.path.relpath(p, run.base) for lang, p in pairs}}
    report = finetune_chain(ckpt.params, datasets, ckpt.vocab, config, out_dir, extra)
    doc = report.to_dict()
    doc["checkpoint"] = os.path.relpath(report.checkpoint, report_path.parent)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    log.info("event=chain_done languages=%s report=%s", ",".join(report.languages), report_path)


def _evaluate_command(args, guard: bool) -> None:
    _require_files([args.checkpoint, args.data])
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_olid_tsv(args.data, args.language, args.partition)
    max_len = args.max_len or ckpt.config.max_positions
    chain = [x for x in ckpt.meta.get("chain", "").split(",") if x]
    if guard:
        m = zero_shot(ckpt.params, ckpt.vocab, dataset, chain, max_len)
    else:
        m = evaluate(ckpt.params, ckpt.vocab, dataset, max_len)
    doc = metrics_report(m, args.language, args.partition)
    _write_json(doc, args.out, args.force)
    log.info("event=%s language=%s macro_f1=%.3f", "zeroshot" if guard else "eval", args.language, m.macro_f1)


def cmd_eval(args) -> None:
    _evaluate_command(args, guard=False)


def cmd_zeroshot(args) -> None:
    _evaluate_command(args, guard=True)


def cmd_stats(args) -> None:
    if not args.data and not args.counts:
        raise InputError("stats needs at least one LANG=PATH dataset or --counts file")
    rows = []
    if args.counts:
        _require_files([args.counts])
        rows.extend(load_counts(args.counts))
    datasets = []
    for item in args.data:
        lang, sep, path = item.partition("=")
        if not sep or not lang or not path:
            raise InputError(f"dataset argument {item!r} is not LANG=PATH")
        _require_files([path])
        datasets.append(load_olid_tsv(path, lang))
    rows.extend((r.language, r.positive, r.negative) for r in stats(datasets).rows)
    result = stats_from_counts(rows)
    if args.json:
        _write_json(result.to_dict(), None, False)
    else:
        table = result.format_table()
        sys.stdout.write(table if table.endswith("\n") else table + "\n")


def cmd_synth(args) -> None:
    out_dir = Path(args.out_dir)
    datasets = gen_synthetic(args.languages, args.examples, args.transfer_strength, args.seed)
    targets = [out_dir / f"{d.language}.tsv" for d in datasets]
    _guard_outputs(targets, args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    for d, path in zip(datasets, targets):
        write_olid_tsv(d, path)
        pos, neg = d.label_counts()
        log.info("event=synth language=%s examples=%d off=%d not=%d out=%s", d.language, len(d), pos, neg, path)


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlchain", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenizer", help="train a BPE vocabulary")
    p.add_argument("corpus", nargs="+", help="OLID-style TSV or plain text files")
    p.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_tokenizer)

    for name, func, help_ in (("pretrain", cmd_pretrain, "masked-LM pretraining"), ("chain", cmd_chain, "sequential fine-tuning")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true")
        if name == "pretrain":
            p.add_argument("--steps", type=int)
            p.add_argument("--out", help="checkpoint path (default: [paths] pretrained)")
        else:
            p.add_argument("--out-dir", help="checkpoint directory (default: [paths] out_dir)")
        p.set_defaults(func=func)

    for name, func, help_ in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("zeroshot", cmd_zeroshot, "evaluate on a language absent from the checkpoint's chain"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("checkpoint")
        p.add_argument("data")
        p.add_argument("--language", required=True)
        p.add_argument("--partition", default="val", choices=("train", "val", "test"))
        p.add_argument("--max-len", type=int)
        p.add_argument("--out")
        p.add_argument("--force", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("stats", help="dataset statistics table")
    p.add_argument("data", nargs="*", metavar="LANG=PATH")
    p.add_argument("--counts", help="TSV of language, positive, negative counts")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate synthetic labeled languages")
    p.add_argument("--languages", type=int, default=3)
    p.add_argument("--examples", type=int, default=2000)
    p.add_argument("--transfer-strength", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
        stream=sys.stderr,
        force=True,
    )
    try:
        args.func(args)
    except InputError as exc:
        log.error("error=input message=%s", json.dumps(str(exc), ensure_ascii=False))
        return EXIT_INPUT
    except (XlchainError, ArithmeticError, OSError, FloatingPointError) as exc:
        log.error("error=runtime message=%s", json.dumps(str(exc), ensure_ascii=False))
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
