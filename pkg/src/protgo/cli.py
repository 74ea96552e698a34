"""Command-line pipeline: preprocess, split, pretrain, finetune, predict,
evaluate (plus `verify` for manifest drift checks).

Exit codes: 0 success, 1 domain error, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import fusion as fusion_mod
from . import ingest, manifest, metrics, splitter, training
from .model import FreezeMask, ModelConfig, ModelError, ProteinEncoder

ASPECT_NAMES = {"BP": "Biological Processes", "MF": "Molecular Function", "CC": "Cellular Component"}

DomainErrors = (
    ingest.IngestError,
    splitter.SplitError,
    ModelError,
    ckpt_io.CheckpointError,
    training.TrainingError,
    fusion_mod.FusionError,
    metrics.MetricsError,
    manifest.ManifestError,
)


def _say(args, *message):
    if not args.quiet:
        print(*message)


# ---------------------------------------------------------------------------
# dataset directory helpers
# ---------------------------------------------------------------------------

def _write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            anns = ";".join(f"{go}|{a.value}" for go, a in sorted(r.annotations, key=lambda x: (x[0], x[1].value)))
            fh.write(f"{r.accession}\t{r.sequence}\t{anns}\n")


def _dataset_meta(dataset_dir) -> dict:
    with open(Path(dataset_dir) / "dataset.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_dataset(dataset_dir):
    dataset_dir = Path(dataset_dir)
    records = ingest.parse_tsv(dataset_dir / "records.tsv")
    meta = _dataset_meta(dataset_dir)
    vocabs = {a: ingest.read_vocabulary(dataset_dir / f"vocab_{a.value}.tsv", a) for a in ingest.ASPECTS}
    return records, vocabs, meta


def _labels_for(dataset_dir, aspect):
    labels = {}
    with open(Path(dataset_dir) / f"labels_{aspect.value}.tsv", "r", encoding="utf-8") as fh:
        for line in fh:
            accession, bits = line.rstrip("\n").split("\t")
            labels[accession] = np.array([int(b) for b in bits], dtype=np.int8)
    return labels


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [args.input] + ([args.annotations] if args.annotations else [])
    if args.annotations:
        records = ingest.parse_fasta_tsv(args.input, args.annotations)
    else:
        records = ingest.parse_tsv(args.input)
    records = ingest.filter_unannotated(records)
    if not records:
        raise ingest.IngestError("no annotated records in input")

    outputs = []
    _write_records(records, out / "records.tsv")
    outputs.append(out / "records.tsv")
    counts = {}
    for aspect in ingest.ASPECTS:
        vocab = ingest.build_vocabulary(records, aspect, args.top_k)
        ingest.write_vocabulary(vocab, out / f"vocab_{aspect.value}.tsv")
        outputs.append(out / f"vocab_{aspect.value}.tsv")
        with open(out / f"labels_{aspect.value}.tsv", "w", encoding="utf-8") as fh:
            n = 0
            for r in records:
                if r.terms(aspect):
                    bits = ingest.encode_labels(r, vocab)
                    fh.write(r.accession + "\t" + "".join(str(int(b)) for b in bits) + "\n")
                    n += 1
        outputs.append(out / f"labels_{aspect.value}.tsv")
        counts[aspect.value] = n
    meta = {"top_k": args.top_k, "max_len": args.max_len,
            "num_records": len(records), "per_aspect_records": counts}
    with open(out / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(out / "dataset.json")
    manifest.write_manifest(out, "preprocess", vars_config(args), args.seed, inputs, outputs, started)
    _say(args, f"preprocessed {len(records)} annotated records into {out}")
    return 0


def cmd_split(args) -> int:
    started = time.time()
    out = Path(args.out)
    records, _, _ = _load_dataset(args.dataset)
    by_accession = {r.accession: r for r in records}
    if args.kind == "random":
        split = splitter.random_split([r.accession for r in records], args.seed)
        leaked = None
    elif args.kind == "clustered":
        assignment = splitter.cluster_sequences(records, args.identity_threshold, args.kmer)
        split = splitter.clustered_split(assignment, seed=args.seed,
                                         identity_threshold=args.identity_threshold)
        leaked = splitter.audit_leakage(split, assignment)
    else:
        raise splitter.SplitError(f"unknown split kind '{args.kind}'")
    aspect_counts = splitter.per_aspect_counts(split, by_accession)
    splitter.write_split(split, out, aspect_counts)
    outputs = [out / n for n in ("train.ids", "dev.ids", "test.ids", "split.json")]
    extra = {"per_aspect_counts": aspect_counts}
    if leaked is not None:
        extra["leaking_clusters"] = len(leaked)
    manifest.write_manifest(out, "split", vars_config(args), args.seed,
                            [Path(args.dataset) / "records.tsv"], outputs, started, extra)
    _say(args, f"{args.kind} split: train={len(split.train)} dev={len(split.dev)} test={len(split.test)}")
    return 0


def _load_train_config(args, mode):
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        data = {"epochs": 1, "batch_size": 8}
    if args.seed is not None:
        data.setdefault("seed", args.seed)
    return training.config_from_json(data, mode)


def _load_model_config(args, num_labels, max_len) -> ModelConfig:
    data = {}
    if args.model_config:
        with open(args.model_config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        allowed = set(ModelConfig.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise ModelError(f"unknown model config field(s): {sorted(unknown)}")
    data.setdefault("num_labels", num_labels)
    data.setdefault("max_len", max_len)
    return ModelConfig(**data)


def _aspects_of(args):
    if args.aspect == "all":
        return list(ingest.ASPECTS)
    return [ingest.GoAspect.parse(args.aspect)]


def _derive_seed(master: int, aspect) -> int:
    order = {a: i for i, a in enumerate(ingest.ASPECTS)}
    return int(np.random.SeedSequence([master, order[aspect]]).generate_state(1)[0])


def _train_one_aspect(args, mode, aspect, records, vocabs, meta, out):
    cfg = _load_train_config(args, mode)
    cfg.seed = _derive_seed(cfg.seed, aspect)
    max_len = meta["max_len"]

    resume_ckpt = None
    if args.resume:
        resume_ckpt = ckpt_io.load_checkpoint(_aspect_path(args.resume, aspect))
        model = resume_ckpt.to_model()
        model_config = model.config
    elif getattr(args, "init", None):
        init_ckpt = ckpt_io.load_checkpoint(_aspect_path(args.init, aspect))
        model = init_ckpt.to_model()
        model_config = model.config
    else:
        model_config = _load_model_config(args, len(vocabs[aspect]), max_len)
        model = ProteinEncoder(model_config, seed=cfg.seed)

    if mode == "finetune":
        if model.config.num_labels != len(vocabs[aspect]):
            raise ModelError(
                f"checkpoint expects {model.config.num_labels} labels but the "
                f"{aspect.value} vocabulary has {len(vocabs[aspect])} terms"
            )
        labels = _labels_for(args.dataset, aspect)
        wanted = _split_side(args, "train")
        data = []
        for r in records:
            if r.accession in labels and (wanted is None or r.accession in wanted):
                data.append((ingest.tokenize(r.sequence, max_len), labels[r.accession]))
        freeze = FreezeMask.default_finetune(model.config) if args.freeze == "default" \
            else FreezeMask.none(model.config)
    else:
        wanted = _split_side(args, "train")
        data = [ingest.tokenize(r.sequence, max_len) for r in records
                if wanted is None or r.accession in wanted]
        freeze = FreezeMask.none(model.config)

    start_epoch, adam_state = 0, None
    if resume_ckpt is not None:
        start_epoch, adam_state = training.resume_state(resume_ckpt, model)

    ckpt_path = out / f"model_{aspect.value}.ckpt"
    loss_path = out / f"loss_{aspect.value}.csv"
    log_mode = "a" if resume_ckpt is not None and loss_path.exists() else "w"
    with open(loss_path, log_mode, encoding="utf-8") as log:
        if log_mode == "w":
            log.write("step,epoch,aspect,loss\n")
        final_ckpt, records_out = training.train_loop(
            model, data, cfg, mode, freeze_mask=freeze,
            checkpoint_path=ckpt_path, loss_log=log, aspect=aspect.value,
            start_epoch=start_epoch, adam_state=adam_state,
        )
    ckpt_io.save_checkpoint(final_ckpt, ckpt_path)
    return ckpt_path, loss_path, records_out


def _split_side(args, side):
    if getattr(args, "split", None):
        return set(getattr(splitter.read_split(args.split), side))
    return None


def _aspect_path(template: str, aspect) -> str:
    """Checkpoint path option: a literal path or one with an {aspect} slot."""
    return template.format(aspect=aspect.value)


def _cmd_train(args, mode) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, vocabs, meta = _load_dataset(args.dataset)
    outputs = []
    aspects = _aspects_of(args)

    def run(aspect):
        return _train_one_aspect(args, mode, aspect, records, vocabs, meta, out)

    if args.parallel_aspects and len(aspects) > 1:
        from concurrent.futures import ThreadPoolExecutor

        workers = min(len(aspects), int(os.environ.get("PROTGO_THREADS", len(aspects))))
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(run, aspects))
    else:
        results = [run(a) for a in aspects]
    for (ckpt_path, loss_path, loss_records), aspect in zip(results, aspects):
        outputs += [ckpt_path, loss_path]
        if loss_records:
            _say(args, f"{aspect.value}: {len(loss_records)} optimizer steps, "
                       f"final loss {loss_records[-1].loss:.6f}")
    inputs = [Path(args.dataset) / "records.tsv"]
    if args.config:
        inputs.append(args.config)
    manifest.write_manifest(out, mode, vars_config(args), args.seed, inputs, outputs, started)
    return 0


def cmd_pretrain(args) -> int:
    return _cmd_train(args, "pretrain")


def cmd_finetune(args) -> int:
    return _cmd_train(args, "finetune")


def _load_fusion(args, vocab_dir, threshold) -> fusion_mod.FusionModel:
    paths = {"BP": args.bp, "MF": args.mf, "CC": args.cc}
    models = {}
    vocabs = {}
    for aspect in ingest.ASPECTS:
        path = paths[aspect.value]
        if not path:
            raise fusion_mod.FusionError(f"missing checkpoint for aspect {aspect.value}")
        models[aspect] = ckpt_io.load_checkpoint(path).to_model()
        vocabs[aspect] = ingest.read_vocabulary(Path(vocab_dir) / f"vocab_{aspect.value}.tsv", aspect)
    return fusion_mod.FusionModel(models, vocabs, threshold)


def cmd_predict(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fusion = _load_fusion(args, args.vocab_dir, args.threshold)
    pred_path = out / "predictions.tsv"

    def diag(message):
        print(f"predict: {message}", file=sys.stderr)

    n = fusion_mod.predict_batch(args.input, fusion, pred_path, diagnostics=diag)
    inputs = [args.input, args.bp, args.mf, args.cc]
    manifest.write_manifest(out, "predict", vars_config(args), args.seed, inputs, [pred_path], started)
    _say(args, f"predicted {n} records -> {pred_path}")
    return 0


def _scores_from_checkpoints(args, aspect, records, vocabs, meta, test_accessions):
    labels = _labels_for(args.dataset, aspect)
    rows = [r for r in records if r.accession in labels and r.accession in test_accessions]
    if not rows:
        raise metrics.MetricsError(f"empty test set for aspect {aspect.value}")
    model = ckpt_io.load_checkpoint(_aspect_path(args.model, aspect)).to_model()
    if model.config.num_labels != len(vocabs[aspect]):
        raise ModelError(
            f"checkpoint expects {model.config.num_labels} labels but the "
            f"{aspect.value} vocabulary has {len(vocabs[aspect])} terms"
        )
    from .autodiff import sigmoid
    from .model import pad_batch

    scores = []
    for start in range(0, len(rows), args.batch_size):
        chunk = rows[start : start + args.batch_size]
        seqs = [ingest.tokenize(r.sequence, meta["max_len"]) for r in chunk]
        ids, mask = pad_batch(seqs)
        scores.append(sigmoid(model.forward_classify(ids, mask).data))
    scores = np.concatenate(scores, axis=0)
    targets = np.stack([labels[r.accession] for r in rows])
    lengths = [len(r.sequence) for r in rows]
    return scores, targets, lengths


def _scores_from_predictions(args, aspect, records, vocabs, test_accessions):
    labels = _labels_for(args.dataset, aspect)
    rows = [r for r in records if r.accession in labels and r.accession in test_accessions]
    if not rows:
        raise metrics.MetricsError(f"empty test set for aspect {aspect.value}")
    index = vocabs[aspect].index()
    by_accession = {r.accession: i for i, r in enumerate(rows)}
    scores = np.zeros((len(rows), len(index)))
    with open(args.predictions, "r", encoding="utf-8") as fh:
        for line in fh:
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 4 or cols[1] == "-":
                continue
            accession, go_id, asp, score = cols
            if asp != aspect.value or accession not in by_accession or go_id not in index:
                continue
            scores[by_accession[accession], index[go_id]] = float(score)
    targets = np.stack([labels[r.accession] for r in rows])
    lengths = [len(r.sequence) for r in rows]
    return scores, targets, lengths


def cmd_evaluate(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, vocabs, meta = _load_dataset(args.dataset)
    test_accessions = _split_side(args, "test")
    if test_accessions is None:
        test_accessions = {r.accession for r in records}
    if not test_accessions:
        raise metrics.MetricsError("empty test split")
    if not args.model and not args.predictions:
        raise metrics.MetricsError("evaluate needs --model or --predictions")

    outputs = []
    thresholds = args.threshold
    reports = {}
    for aspect in ingest.ASPECTS:
        if args.predictions:
            scores, targets, lengths = _scores_from_predictions(args, aspect, records, vocabs, test_accessions)
        else:
            scores, targets, lengths = _scores_from_checkpoints(args, aspect, records, vocabs, meta, test_accessions)
        try:
            curve = metrics.micro_roc(scores, targets)
            metrics.write_roc_csv(curve, out / f"roc_{aspect.value}.csv")
            outputs.append(out / f"roc_{aspect.value}.csv")
        except metrics.MetricsError:
            curve = None
        for t in thresholds:
            report = metrics.aspect_report(scores, targets, lengths, t, args.bucket_width)
            reports.setdefault(_threshold_key(t), {})[aspect.value] = report
        sla = metrics.length_analysis(lengths, scores, targets, thresholds[0], args.bucket_width)
        metrics.write_sla_csv(sla, out / f"sla_{aspect.value}.csv")
        outputs.append(out / f"sla_{aspect.value}.csv")

    for key, per_aspect in reports.items():
        name = "report.json" if len(thresholds) == 1 else f"report_{key}.json"
        metrics.write_report_json(per_aspect, out / name)
        outputs.append(out / name)

    if not args.quiet:
        _print_table(reports[_threshold_key(thresholds[0])])
    inputs = [Path(args.dataset) / "records.tsv"]
    manifest.write_manifest(out, "evaluate", vars_config(args), args.seed, inputs, outputs, started)
    return 0


def _threshold_key(t: float) -> str:
    return f"{t:g}"


def _print_table(per_aspect: dict) -> None:
    print(f"{'Aspect':<22} {'Accuracy':>9} {'F1 score':>9} {'Precision':>10} {'Recall':>8}")
    for code in ("BP", "MF", "CC"):
        r = per_aspect[code]
        print(f"{ASPECT_NAMES[code]:<22} {r['subset_accuracy'] * 100:>8.2f}% "
              f"{r['f1']:>9.4f} {r['precision']:>10.4f} {r['recall']:>8.4f}")


def cmd_verify(args) -> int:
    problems = manifest.verify_manifest(args.manifest)
    if problems:
        for p in problems:
            print(f"verify: {p}", file=sys.stderr)
        return 1
    _say(args, "manifest inputs verified")
    return 0


def vars_config(args) -> dict:
    skip = {"func", "quiet"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protgo",
                                     description="GO-term annotation pipeline for protein sequences")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--config", default=None, help="JSON config file")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="parse, filter, build vocabularies, encode")
    p.add_argument("input", help="records TSV, or FASTA when --annotations is given")
    p.add_argument("--annotations", default=None, help="companion annotation TSV for FASTA input")
    p.add_argument("--top-k", type=int, default=100, dest="top_k")
    p.add_argument("--max-len", type=int, default=1000, dest="max_len")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", parents=[common], help="random 8:1:1 or clustered split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=("random", "clustered"), required=True)
    p.add_argument("--identity-threshold", type=float, default=0.5, dest="identity_threshold")
    p.add_argument("--kmer", type=int, default=5)
    p.set_defaults(func=cmd_split)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, parents=[common], help=f"{name} aspect models")
        p.add_argument("--dataset", required=True)
        p.add_argument("--split", default=None, help="split directory; restricts to its train side")
        p.add_argument("--aspect", choices=("BP", "MF", "CC", "all"), default="all")
        p.add_argument("--resume", default=None,
                       help="checkpoint to resume (may contain an {aspect} slot)")
        p.add_argument("--model-config", default=None, dest="model_config")
        p.add_argument("--parallel-aspects", action="store_true", dest="parallel_aspects")
        if name == "finetune":
            p.add_argument("--init", default=None,
                           help="pretrained checkpoint to start from (fresh optimizer)")
            p.add_argument("--freeze", choices=("default", "none"), default="default")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="fused three-aspect prediction")
    p.add_argument("input", help="TSV with accession and sequence columns")
    p.add_argument("--bp", required=True, help="BP checkpoint")
    p.add_argument("--mf", required=True, help="MF checkpoint")
    p.add_argument("--cc", required=True, help="CC checkpoint")
    p.add_argument("--vocab-dir", required=True, dest="vocab_dir")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="metrics, ROC and length analysis")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default=None, help="split directory; evaluates its test side")
    p.add_argument("--model", default=None,
                   help="checkpoint path with an {aspect} slot, e.g. run/model_{aspect}.ckpt")
    p.add_argument("--predictions", default=None, help="prediction TSV to evaluate instead of models")
    p.add_argument("--threshold", type=float, nargs="+", default=[0.5])
    p.add_argument("--bucket-width", type=int, default=100, dest="bucket_width")
    p.add_argument("--batch-size", type=int, default=16, dest="batch_size")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", parents=[common], help="re-hash a manifest's inputs")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DomainErrors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
