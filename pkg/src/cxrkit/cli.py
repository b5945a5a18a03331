"""Command-line entry point: ``cxrkit <command> ...``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import ccve, synth
from .clinical_metrics import clinical_eval
from .cluster import cluster_corpus, cluster_scheme
from .corpus import SECTION_MODES, effective_text, load_corpus
from .errors import CxrkitError, IdMismatch, SectionMissing
from .io import dumps_line, iter_jsonl, write_atomic
from .labeler import (DEFAULT_VOCAB_THRESHOLD, build_vocab, default_lexicon, label_and_extract,
                      label_text, load_lexicon)
from .nlg_metrics import EvalPair, evaluate_nlg
from .textproc import tokenize

logger = logging.getLogger("cxrkit")

GRADCHECK_TOLERANCE = 1e-4


@dataclass
class RunConfig:
    command: str
    inputs: Dict[str, str] = field(default_factory=dict)
    output: Optional[str] = None
    options: Dict[str, object] = field(default_factory=dict)


class UsageError(Exception):
    pass


def _require_files(**paths):
    for flag, path in paths.items():
        if path is not None and not Path(path).is_file():
            raise UsageError(f"--{flag.replace('_', '-')}: no such file: {path}")


def _lexicon(args):
    return load_lexicon(args.lexicon_dir) if args.lexicon_dir else default_lexicon()


# --------------------------------------------------------------------------- text commands

def cmd_label(args) -> int:
    _require_files(corpus=args.corpus)
    lexicon = _lexicon(args)
    corpus = load_corpus(args.corpus)
    lines, missing = [], []
    for report in corpus:
        try:
            lv, fine = label_and_extract(report, args.section, lexicon)
        except SectionMissing:
            missing.append(report.id)
            continue
        lines.append(dumps_line(lv.to_record(fl.surface for fl in fine)))
    if missing:
        logger.warning("%d reports lack section %r (first: %s)", len(missing), args.section, missing[0])
    write_atomic(args.out, "".join(lines))
    logger.info("labelled %d reports (%d skipped on load, %d missing section)",
                len(lines), corpus.skipped, len(missing))
    return 0


def cmd_vocab(args) -> int:
    _require_files(corpus=args.corpus)
    if args.threshold < 1:
        raise UsageError("--threshold must be >= 1")
    vocab = build_vocab(load_corpus(args.corpus), args.threshold, _lexicon(args), args.section)
    write_atomic(args.out, vocab.to_tsv())
    logger.info("vocabulary: %d classes at threshold %d", len(vocab), args.threshold)
    return 0


def cmd_cluster(args) -> int:
    _require_files(corpus=args.corpus)
    lexicon = _lexicon(args)
    assigned = cluster_corpus(load_corpus(args.corpus), lexicon, use_uncertain=not args.no_uncertain)
    write_atomic(args.out, "".join(dumps_line({"id": rid, "cluster": c.index, "cluster_name": c.name})
                                   for rid, c in assigned))
    counts = [0] * cluster_scheme(lexicon).n_clusters
    for _, c in assigned:
        counts[c.index] += 1
    for idx, name in enumerate(cluster_scheme(lexicon).names):
        print(f"{idx:>2}  {name:<28} {counts[idx]}")
    return 0


def _read_texts(path) -> Dict[str, str]:
    texts: Dict[str, str] = {}
    for lineno, rec in iter_jsonl(path):
        if not isinstance(rec, dict) or not isinstance(rec.get("id"), str) or not isinstance(rec.get("text"), str):
            raise CxrkitError(f"{path}:{lineno}: expected an object with string id and text")
        if rec["id"] in texts:
            raise CxrkitError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
        texts[rec["id"]] = rec["text"]
    return texts


def evaluate_files(cand_path, ref_path, per_class: bool = False, lexicon=None) -> dict:
    cands = _read_texts(cand_path)
    refs = _read_texts(ref_path)
    if set(cands) != set(refs):
        extra = sorted(set(cands) ^ set(refs))
        raise IdMismatch(f"candidate and reference ids differ ({len(extra)} unmatched, e.g. {extra[0]!r})")
    lexicon = lexicon or default_lexicon()
    ids = list(refs)
    pairs = [EvalPair.from_text(i, cands[i], refs[i]) for i in ids]
    nlg = evaluate_nlg(pairs)
    clin = clinical_eval([label_text(cands[i], i, lexicon) for i in ids],
                         [label_text(refs[i], i, lexicon) for i in ids])
    result = {"n_pairs": len(pairs)}
    result.update(nlg.as_columns())
    result.update(clin.as_columns())
    if per_class:
        result["per_class"] = dict(zip(lexicon.categories, clin.per_class))
    return result


def cmd_eval(args) -> int:
    _require_files(candidates=args.candidates, references=args.references)
    result = evaluate_files(args.candidates, args.references, args.per_class, _lexicon(args))
    if args.format == "json":
        text = json.dumps(result, indent=2) + "\n"
    else:
        row = {k: v for k, v in result.items() if k != "per_class"}
        for name, f1 in result.get("per_class", {}).items():
            row[f"F1[{name}]"] = f1
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: "" if v is None else v for k, v in row.items()})
        text = buf.getvalue()
    write_atomic(args.out, text)
    return 0


# --------------------------------------------------------------------------- ccve commands

def cmd_synth(args) -> int:
    records = synth.planted_dataset(args.clusters, args.per_cluster, args.size, args.seed)
    out = Path(args.out)
    write_atomic(out / "images.jsonl", "".join(
        dumps_line({"id": rid, "image": img.tolist()}) for rid, img, _, _ in records))
    write_atomic(out / "reports.jsonl", "".join(
        dumps_line({"id": rid, "findings": None, "impression": text}) for rid, _, text, _ in records))
    write_atomic(out / "clusters.jsonl", "".join(
        dumps_line({"id": rid, "cluster": k, "cluster_name": cluster_scheme().names[k]})
        for rid, _, _, k in records))
    logger.info("wrote %d planted samples to %s", len(records), out)
    return 0


def _load_image(obj, where) -> np.ndarray:
    img = np.asarray(obj, dtype=float)
    if img.ndim != 2 or not np.all(np.isfinite(img)):
        raise CxrkitError(f"{where}: image must be a finite 2-D array")
    return img


def load_training_set(corpus_path, clusters_path, images_path, section="impression_fallback"):
    corpus = load_corpus(corpus_path)
    clusters = {rec["id"]: int(rec["cluster"]) for _, rec in iter_jsonl(clusters_path)}
    images = {rec["id"]: _load_image(rec["image"], f"{images_path}:{n}") for n, rec in iter_jsonl(images_path)}
    samples = []
    for report in corpus:
        if report.id not in clusters or report.id not in images:
            logger.warning("report %s has no cluster or image; skipped", report.id)
            continue
        text = effective_text(report, section)
        samples.append(ccve.TrainSample(images[report.id], tuple(tokenize(text)), clusters[report.id], report.id))
    if not samples:
        raise CxrkitError("no report has all of text, cluster and image")
    return samples


def cmd_train(args) -> int:
    _require_files(corpus=args.corpus, clusters=args.clusters, images=args.images)
    samples = load_training_set(args.corpus, args.clusters, args.images, args.section)
    vocab = synth.vocabulary(samples)
    dims = dict(c=args.c, c2=args.c2, m=args.m, d=args.d, dt=args.dt, seed=args.seed)
    model = ccve.cve_model(vocab, **dims) if args.cve else ccve.init_model(vocab, K=args.K, **dims)
    config = ccve.TrainConfig(args.steps, args.batch_size, args.lr, args.seed)
    trained, history = ccve.train(model, samples, config)
    write_atomic(args.out, ccve.model_to_json(trained))
    if args.history:
        write_atomic(args.history, "".join(f"{i}\t{loss!r}\n" for i, loss in enumerate(history)))
    if history:
        logger.info("final loss %.6f after %d steps", history[-1], len(history))
    logger.info("retrieval accuracy %.4f", ccve.retrieval_accuracy(trained, samples))
    if len({s.cluster for s in samples}) > 1:
        logger.info("silhouette %.4f", ccve.cluster_silhouette(trained, samples))
    return 0


def cmd_embed(args) -> int:
    _require_files(model=args.model, image=args.image)
    model = ccve.load_model(args.model)
    if args.image.endswith(".jsonl"):
        result = {"K": model.K, "d": model.d, "embeddings": {
            rec["id"]: ccve.embed_all(model, _load_image(rec["image"], f"{args.image}:{n}")).tolist()
            for n, rec in iter_jsonl(args.image)}}
    else:
        with open(args.image, encoding="utf-8") as fh:
            doc = json.load(fh)
        raw = doc["image"] if isinstance(doc, dict) else doc
        result = {"K": model.K, "d": model.d, "embeddings": ccve.embed_all(model, _load_image(raw, args.image)).tolist()}
    write_atomic(args.out, json.dumps(result) + "\n")
    return 0


def random_batch(model: ccve.CcveModel, size: int, image_size: int, rng: np.random.Generator):
    batch = []
    for _ in range(size):
        n_tok = int(rng.integers(1, 5))
        tokens = tuple(model.vocab[i] for i in rng.integers(len(model.vocab), size=n_tok))
        batch.append(ccve.TrainSample(rng.uniform(size=(image_size, image_size)), tokens,
                                      int(rng.integers(model.K))))
    return batch


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.model:
        _require_files(model=args.model)
        model = ccve.load_model(args.model)
    else:
        vocab = tuple(f"tok{i}" for i in range(12))
        model = ccve.init_model(vocab, K=args.K, m=4, d=8, dt=6, seed=args.seed)
    batch = random_batch(model, args.batch_size, args.image_size, rng)
    err, where = ccve.grad_check(model, batch, args.epsilon)
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error {err:.3e} at {where[0]}{list(where[1])}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# --------------------------------------------------------------------------- parser

def _version_text() -> str:
    try:
        lex = default_lexicon().version
    except CxrkitError:
        lex = "unavailable"
    return f"cxrkit {__version__} (lexicons {lex})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=_version_text())
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        return p

    def lexicon_flag(p):
        p.add_argument("--lexicon-dir", help="directory overriding the bundled lexicons")

    p = add("label", cmd_label, "label reports with coarse states and fine-grained classes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--section", choices=SECTION_MODES, default="findings")
    p.add_argument("--out", required=True)
    lexicon_flag(p)

    p = add("vocab", cmd_vocab, "build the fine-grained label vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--threshold", type=int, default=DEFAULT_VOCAB_THRESHOLD)
    p.add_argument("--section", choices=SECTION_MODES, default="findings")
    p.add_argument("--out", required=True)
    lexicon_flag(p)

    p = add("cluster", cmd_cluster, "assign each report's impression to one of 13 clusters")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-uncertain", action="store_true", help="do not fall back to Uncertain mentions")
    lexicon_flag(p)

    p = add("eval", cmd_eval, "NLG and clinical metrics for candidate vs reference reports")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--per-class", action="store_true")
    lexicon_flag(p)

    p = add("ccve-synth", cmd_synth, "generate the planted-pattern synthetic set")
    p.add_argument("--clusters", type=int, default=13)
    p.add_argument("--per-cluster", type=int, default=50)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("ccve-train", cmd_train, "train the cluster-conditioned encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="optional TSV of per-step losses")
    p.add_argument("--section", choices=SECTION_MODES, default="impression_fallback")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--K", type=int, default=13)
    p.add_argument("--c", type=int, default=3)
    p.add_argument("--c2", type=int, default=3)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--dt", type=int, default=16)
    p.add_argument("--cve", action="store_true", help="single frozen identity filter baseline")

    p = add("ccve-embed", cmd_embed, "emit the K x d embedding matrix for an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="JSON 2-D array / {\"image\": ...}, or images JSONL")
    p.add_argument("--out", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the analytic gradients")
    p.add_argument("--model")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--K", type=int, default=13)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=1e-5)
    return parser


def _run_config(args) -> RunConfig:
    values = {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}
    inputs = {k: values.pop(k) for k in ("corpus", "clusters", "images", "candidates", "references",
                                         "model", "image") if isinstance(values.get(k), str)}
    return RunConfig(args.command, inputs, values.pop("out", None), values)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logger.info("run config %s", json.dumps(asdict(_run_config(args)), sort_keys=True))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cxrkit: error: {exc}", file=sys.stderr)
        return 2
    except (CxrkitError, OSError, KeyError, ValueError) as exc:
        print(f"cxrkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
