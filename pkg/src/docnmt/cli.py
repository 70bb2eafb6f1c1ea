"""Command-line entry point: ``docnmt <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, context_filter as cf, metrics
from .corpus import (
    BPE,
    DEFAULT_TOKEN_BUDGET,
    CorpusFormatError,
    DocumentCorpus,
    OversizeError,
    Vocabulary,
    learn_bpe,
    tokenize,
)
from .tensor import ContractError
from .training import (
    IMPROVE_TOL,
    LR_DECAY,
    PATIENCE_REDUCE,
    PATIENCE_STOP,
    NumericalError,
    TrainConfig,
    build_vocabularies,
    examples_for,
    load_config,
    train,
)
from .transformer import (
    CheckpointError,
    ConfigError,
    IntegrationMode,
    LengthError,
    beam_search,
    load_checkpoint,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt():
    return argparse.ArgumentDefaultsHelpFormatter


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------


def _read_lines(path) -> list[list[str]]:
    return [tokenize(l) for l in Path(path).read_text(encoding="utf-8").splitlines()]


def _write_lines(path, sentences) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def load_corpus(prefix, tags=None) -> DocumentCorpus:
    """``prefix.src`` / ``prefix.tgt`` and the optional ``prefix.docs`` index;
    ``tags`` is a CoNLL file aligned with the source lines."""
    docs = Path(f"{prefix}.docs")
    corpus = DocumentCorpus.load(f"{prefix}.src", f"{prefix}.tgt", docs if docs.exists() else None)
    if tags:
        tagged = cf.read_conll(tags)
        if len(tagged) != len(corpus):
            raise CorpusFormatError(f"{tags} has {len(tagged)} sentences, corpus has {len(corpus)}")
        pos = 0
        for d in corpus.documents:
            d.tags = tagged[pos:pos + len(d.source)]
            pos += len(d.source)
    return corpus


def _model_dir_files(ckpt):
    d = Path(ckpt).parent
    return Vocabulary.load(d / "src.vocab"), Vocabulary.load(d / "tgt.vocab"), d / "train.cfg"


def _run_config(ckpt) -> TrainConfig:
    cfg_path = Path(ckpt).parent / "train.cfg"
    return load_config(cfg_path) if cfg_path.exists() else TrainConfig()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_bpe_learn(a) -> int:
    sents = []
    for path in a.input:
        sents.extend(_read_lines(path))
    merges = learn_bpe(sents, a.merges)
    BPE(merges).save(a.output)
    print(f"learned {len(merges)} merges -> {a.output}")
    return EXIT_OK


def cmd_bpe_apply(a) -> int:
    bpe = BPE.load(a.codes)
    _write_lines(a.output, (bpe.apply(s) for s in _read_lines(a.input)))
    return EXIT_OK


def _filter_spec(a) -> cf.FilterSpec:
    mode = cf.FilterMode(a.mode)
    kw = {"n": a.n, "fold_case": a.fold_case, "drop_dangling_punct": not a.keep_punct}
    if mode is cf.FilterMode.STOPWORDS:
        kw["stoplist"] = cf.load_stoplist(a.stoplist) if a.stoplist else cf.load_stoplist()
    if mode is cf.FilterMode.TOP_FREQUENT:
        if a.freq_table:
            kw["frequency_table"] = cf.load_frequency_table(a.freq_table)
        else:
            source = a.freq_corpus or a.input
            if source is None:
                raise UsageError("--mode topfreq needs --freq-table, --freq-corpus or --input")
            kw["frequency_table"] = cf.build_frequency_table(_read_lines(source))
    if mode in (cf.FilterMode.NAMED_ENTITIES, cf.FilterMode.POS):
        if not a.tags:
            raise UsageError(f"--mode {mode.value} needs --tags FILE")
        tagsets = cf.load_tagsets(a.tagsets) if a.tagsets else cf.load_tagsets()
        kw["tagset"] = tagsets[mode.value]
    return cf.FilterSpec(mode=mode, **kw)


def cmd_filter_context(a) -> int:
    if a.input is None and a.tags is None:
        raise UsageError("give --input and/or --tags")
    spec = _filter_spec(a)
    if a.tags:
        sents = cf.read_conll(a.tags)
    else:
        sents = [cf.TaggedSentence(s) for s in _read_lines(a.input)]
    out = [cf.filter_sentence(spec, s).tokens for s in sents]
    if a.output:
        _write_lines(a.output, out)
    else:
        for s in out:
            print(" ".join(s))
    if a.report:
        print(f"retained {100 * cf.retention_report(spec, sents):.1f}% of tokens", file=sys.stderr)
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = load_config(a.config)
    if a.seed is not None:
        cfg.seed = a.seed
    if not cfg.train_prefix or not cfg.dev_prefix:
        raise ConfigError("config must set train_prefix and dev_prefix")
    mode = cfg.integration_mode
    if a.init_from is None and mode is not IntegrationMode.NONE and cfg.require_pretrained and not a.resume:
        raise ConfigError(f"integration mode {mode.value} needs --init-from (or require_pretrained = false)")
    train_c = load_corpus(cfg.train_prefix, cfg.tags or None)
    dev_c = load_corpus(cfg.dev_prefix, cfg.dev_tags or None)
    if a.init_from:
        sv, tv, _ = _model_dir_files(a.init_from)
    else:
        sv, tv = build_vocabularies(train_c)
    res = train(
        cfg,
        examples_for(cfg, train_c, sv, tv),
        examples_for(cfg, dev_c, sv, tv),
        a.out,
        sv,
        tv,
        sentence_checkpoint=a.init_from,
        resume=a.resume,
        max_steps=a.max_steps,
    )
    last = res.log[-1] if res.log else {}
    print(f"checkpoint {res.checkpoint} step {last.get('step', 0)} ppl {last.get('ppl', float('nan')):.4f}"
          + (" (early stop)" if res.stopped_early else ""))
    return EXIT_OK


def _examples_from_source(a, cfg, sv, tv):
    docs = Path(a.context_index) if a.context_index else None
    tmp = DocumentCorpus.load(a.input, a.input, docs)
    if a.tags:
        tagged = cf.read_conll(a.tags)
        pos = 0
        for d in tmp.documents:
            d.tags = tagged[pos:pos + len(d.source)]
            pos += len(d.source)
    return examples_for(cfg, tmp, sv, tv)


def cmd_translate(a) -> int:
    model = load_checkpoint(a.model)
    sv, tv, _ = _model_dir_files(a.model)
    cfg = _run_config(a.model)
    cfg.model["integration_mode"] = model.config.integration_mode
    if a.k is not None:
        cfg.context_sentences = a.k
    examples = _examples_from_source(a, cfg, sv, tv)
    uses_ctx = model.config.integration_mode is not IntegrationMode.NONE
    lines = []
    for ex in examples:
        hyp = beam_search(model, ex.source, ex.context if uses_ctx else None, a.beam)
        lines.append(tv.decode(hyp))
    if a.output:
        _write_lines(a.output, lines)
    else:
        for l in lines:
            print(" ".join(l))
    return EXIT_OK


def cmd_score(a) -> int:
    hyps, refs = _read_lines(a.hyp), _read_lines(a.ref)
    if len(hyps) != len(refs):
        raise CorpusFormatError(f"{a.hyp} has {len(hyps)} lines, {a.ref} has {len(refs)}")
    print(f"BLEU {metrics.bleu(hyps, refs):.2f}")
    print(f"TER {metrics.corpus_ter(hyps, refs):.2f}")
    if a.per_sentence:
        rows = ["index\tter"] + [f"{i}\t{t:.4f}" for i, t in enumerate(metrics.sentence_ters(hyps, refs))]
        Path(a.per_sentence).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def _read_cases(path) -> list[int]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if line.strip():
            out.append(int(line.split("\t")[0]))
    return out


def cmd_analyze_select(a) -> int:
    cases = analysis.ter_improved_cases(_read_lines(a.sent_hyp), _read_lines(a.doc_hyp), _read_lines(a.ref))
    rows = ["index\tsent_ter\tdoc_ter"] + [f"{i}\t{s:.4f}\t{d:.4f}" for i, s, d in cases]
    text = "\n".join(rows) + "\n"
    if a.output:
        Path(a.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"{len(cases)} TER-improved cases", file=sys.stderr)
    return EXIT_OK


def _analysis_inputs(a):
    model = load_checkpoint(a.model)
    sv, tv, _ = _model_dir_files(a.model)
    cfg = _run_config(a.model)
    cfg.model["integration_mode"] = model.config.integration_mode
    examples = _examples_from_source(a, cfg, sv, tv)
    doc_hyps = [tv.encode(s) for s in _read_lines(a.doc_hyp)]
    indices = _read_cases(a.cases) if a.cases else list(range(len(examples)))
    return model, sv, tv, examples, doc_hyps, indices


def cmd_analyze_trace(a) -> int:
    model, sv, tv, examples, doc_hyps, indices = _analysis_inputs(a)
    traces = [analysis.attention_trace(model, examples[i], doc_hyps[i], i, sv, tv) for i in indices]
    analysis.write_traces(traces, a.output)
    if a.heatmap_dir:
        d = Path(a.heatmap_dir)
        d.mkdir(parents=True, exist_ok=True)
        for t in traces:
            analysis.write_heatmap_tsv(t, d / f"case{t.example_id}.tsv")
    return EXIT_OK


def cmd_analyze_gate(a) -> int:
    model, sv, tv, examples, doc_hyps, indices = _analysis_inputs(a)
    profiles = [analysis.gate_profile(model, examples[i], doc_hyps[i], i) for i in indices]
    n_layers = max((len(p.per_layer) for p in profiles), default=0)
    rows = ["example_id\toverall\t" + "\t".join(f"layer{j}" for j in range(n_layers))]
    rows += [f"{p.example_id}\t{p.overall:.6f}\t" + "\t".join(f"{x:.6f}" for x in p.per_layer) for p in profiles]
    Path(a.output).write_text("\n".join(rows) + "\n", encoding="utf-8")
    if a.histogram:
        analysis.write_histogram_tsv(analysis.gate_histogram([p.overall for p in profiles]), a.histogram)
    return EXIT_OK


def cmd_analyze_dossier(a) -> int:
    model, sv, tv, examples, doc_hyps, _ = _analysis_inputs(a)
    sent_hyps = [tv.encode(s) for s in _read_lines(a.sent_hyp)]
    refs = _read_lines(a.ref)
    d = analysis.case_dossier(a.index, examples, refs, sent_hyps, doc_hyps, model, sv, tv)
    text = d.to_json() + "\n"
    if a.output:
        Path(a.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze_report(a) -> int:
    ann = analysis.read_annotations(a.annotations)
    if a.selected:
        selected = set(_read_cases(a.selected))
        extra = sorted(x.example_id for x in ann if x.example_id not in selected)
        if extra:
            raise CorpusFormatError(f"annotated cases not in the selection: {extra[:10]}")
    sys.stdout.write(analysis.format_report(analysis.category_report(ann, a.total)))
    return EXIT_OK


def cmd_sweep(a) -> int:
    template = load_config(a.config)
    if a.seed is not None:
        template.seed = a.seed
    if not template.integration_mode.multi_encoder and template.integration_mode is not IntegrationMode.SINGLE_ENCODER:
        raise ConfigError("sweep config must select a document-level integration_mode")
    k_values = analysis.parse_k_range(a.k)
    sentence = load_checkpoint(a.init_from)
    sv, tv, _ = _model_dir_files(a.init_from)
    train_c = load_corpus(template.train_prefix, template.tags or None)
    dev_c = load_corpus(template.dev_prefix, template.dev_tags or None)
    test_c = load_corpus(a.test_prefix, a.test_tags) if a.test_prefix else dev_c
    if a.filter != "none" and a.filter in ("ner", "pos") and (not template.tags or not template.dev_tags):
        raise ConfigError(f"--filter {a.filter} needs tags and dev_tags in the config")

    def show(row):
        print(f"k={row.k}\t{row.variant}\tBLEU {row.bleu:.2f}\tTER {row.ter:.2f}"
              + (f"\tERROR {row.error}" if row.error else ""), file=sys.stderr)

    rows = analysis.context_length_sweep(sentence, template, train_c, dev_c, test_c, sv, tv, k_values,
                                         a.filter, a.steps, a.work_dir, on_row=show)
    analysis.write_sweep_tsv(rows, a.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="docnmt", description="Document-level NMT laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("bpe-learn", help="learn joint BPE merges", formatter_class=_fmt())
    s.add_argument("--input", nargs="+", required=True, help="tokenised text files (source and target)")
    s.add_argument("--merges", type=int, required=True, help="number of merge operations")
    s.add_argument("--output", required=True, help="merge file to write")
    s.set_defaults(func=cmd_bpe_learn)

    s = sub.add_parser("bpe-apply", help="segment a text file", formatter_class=_fmt())
    s.add_argument("--codes", required=True, help="merge file")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_bpe_apply)

    s = sub.add_parser("filter-context", help="filter context sentences", formatter_class=_fmt())
    s.add_argument("--mode", required=True, choices=[m.value for m in cf.FilterMode if m is not cf.FilterMode.NONE])
    s.add_argument("--n", type=int, default=cf.DEFAULT_TOP_N, help="number of most frequent words removed (topfreq)")
    s.add_argument("--tags", help="CoNLL file with token, NER and POS columns (ner/pos modes)")
    s.add_argument("--stoplist", help="stopword file, one word per line (default: shipped list)")
    s.add_argument("--tagsets", help="tagset config (default: shipped NER and POS tag lists)")
    s.add_argument("--freq-table", help="ranked word list for topfreq")
    s.add_argument("--freq-corpus", help="corpus to count word frequencies on (default: --input)")
    s.add_argument("--fold-case", action="store_true", help="lowercase before stoplist lookup")
    s.add_argument("--keep-punct", action="store_true",
                   help="keep punctuation that directly follows a removed word")
    s.add_argument("--input", help="one sentence per line")
    s.add_argument("--output", help="output file (default: stdout)")
    s.add_argument("--report", action="store_true", help="print the token retention rate to stderr")
    s.set_defaults(func=cmd_filter_context)

    s = sub.add_parser(
        "train", help="train a model", formatter_class=_fmt(),
        description=(
            "Train from a flat key = value config. Recipe defaults: Adam (0.9, 0.999, 1e-8), "
            f"lr 3e-4, batch budget {DEFAULT_TOKEN_BUDGET} tokens, lr x{LR_DECAY} after {PATIENCE_REDUCE} "
            f"checkpoints without improvement, stop after {PATIENCE_STOP}; improvement means "
            f"ppl < best - {IMPROVE_TOL}."
        ),
    )
    s.add_argument("--config", required=True, help="key = value config file")
    s.add_argument("--init-from", help="sentence-level checkpoint to initialise a document model")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--max-steps", type=int, help="overrides max_steps")
    s.add_argument("--resume", action="store_true", help="continue the run in --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="beam-search translation", formatter_class=_fmt())
    s.add_argument("--model", required=True, help="checkpoint (vocabularies are read from its directory)")
    s.add_argument("--beam", type=int, default=5, help="beam size")
    s.add_argument("--input", required=True, help="source sentences, one per line")
    s.add_argument("--context-index", help=".docs index of the input (default: one document)")
    s.add_argument("--tags", help="CoNLL tags for the input (tag-based context filters)")
    s.add_argument("--k", type=int, help="context sentences (default: from the run's train.cfg)")
    s.add_argument("--output", help="output file (default: stdout)")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("score", help="corpus BLEU and TER", formatter_class=_fmt())
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--per-sentence", help="write index<TAB>TER rows here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("analyze", help="qualitative analysis", formatter_class=_fmt())
    asub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)

    x = asub.add_parser("select", help="sentences where the document model improves TER", formatter_class=_fmt())
    x.add_argument("--sent-hyp", required=True)
    x.add_argument("--doc-hyp", required=True)
    x.add_argument("--ref", required=True)
    x.add_argument("--output", help="TSV index/sent_ter/doc_ter (default: stdout)")
    x.set_defaults(func=cmd_analyze_select)

    def model_args(x):
        x.add_argument("--model", required=True, help="document-level checkpoint")
        x.add_argument("--input", required=True, help="source sentences")
        x.add_argument("--context-index", help=".docs index of the input")
        x.add_argument("--tags", help="CoNLL tags for the input")
        x.add_argument("--doc-hyp", required=True, help="document model translations")
        x.add_argument("--cases", help="selection TSV from 'analyze select' (default: all sentences)")

    x = asub.add_parser("trace", help="context attention averaged over layers and heads", formatter_class=_fmt())
    model_args(x)
    x.add_argument("--output", required=True, help="trace file (JSON lines)")
    x.add_argument("--heatmap-dir", help="also write one heatmap TSV per case")
    x.set_defaults(func=cmd_analyze_trace)

    x = asub.add_parser("gate", help="gate activation profiles", formatter_class=_fmt())
    model_args(x)
    x.add_argument("--output", required=True, help="per-case TSV")
    x.add_argument("--histogram", help=f"{analysis.HISTOGRAM_BINS}-bin histogram TSV of overall means")
    x.set_defaults(func=cmd_analyze_gate)

    x = asub.add_parser("dossier", help="everything needed to classify one case", formatter_class=_fmt())
    model_args(x)
    x.add_argument("--index", type=int, required=True)
    x.add_argument("--sent-hyp", required=True)
    x.add_argument("--ref", required=True)
    x.add_argument("--output", help="JSON file (default: stdout)")
    x.set_defaults(func=cmd_analyze_dossier)

    x = asub.add_parser("report", help="case counts per category", formatter_class=_fmt())
    x.add_argument("--annotations", required=True, help="TSV example_id/category/note")
    x.add_argument("--total", type=int, help="test-set size for the Total row")
    x.add_argument("--selected", help="selection TSV; annotated cases must be in it")
    x.set_defaults(func=cmd_analyze_report)

    s = sub.add_parser("sweep", help="context-length sweep", formatter_class=_fmt())
    s.add_argument("--config", required=True, help="document-level config template")
    s.add_argument("--init-from", required=True, help="sentence-level checkpoint shared by every k")
    s.add_argument("--k", default="0..20", help="range a..b or list a,b,c")
    s.add_argument("--filter", default="none", choices=["none"] + [m.value for m in cf.FilterMode
                                                                  if m is not cf.FilterMode.NONE])
    s.add_argument("--steps", type=int, help="fine-tuning steps per k (default: config max_steps)")
    s.add_argument("--test-prefix", help="evaluation corpus prefix (default: dev_prefix)")
    s.add_argument("--test-tags", help="CoNLL tags for the evaluation corpus")
    s.add_argument("--seed", type=int)
    s.add_argument("--work-dir", help="keep per-k runs here (default: temporary)")
    s.add_argument("--output", required=True, help="TSV k/variant/bleu/ter")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        return a.func(a)
    except (UsageError, ConfigError) as e:
        print(f"docnmt {a.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"docnmt {a.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CorpusFormatError, cf.ConllFormatError, cf.MissingAnnotationError, analysis.AnnotationParseError,
            CheckpointError, OversizeError, LengthError, ContractError, KeyError, ValueError, IndexError) as e:
        print(f"docnmt {a.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
