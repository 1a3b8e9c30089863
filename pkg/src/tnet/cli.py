"""Command-line entry point: train / eval / predict / gradcheck / ablate.

All outputs are JSON-first; the aligned text tables are derived views.
Exit codes: 0 on success, 2 for configuration/input problems, 1 for
runtime failures. Every command is deterministic given --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import synth
from .model import VARIANTS, ModelFlags, TnetModel
from .pipeline import (
    DatasetError,
    build_vocab,
    eval_report,
    load_embeddings,
    pad_batch,
    paired_t_test,
    parse_dataset,
    random_store,
)
from .trainer import (
    Hyperparams,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    table_defaults,
    train,
)

DATASETS = ("laptop", "rest", "twitter")

HYPER_FIELDS = ("dim_w", "dim_h", "p_lstm", "p_sent", "L", "batch_size", "s", "n_k", "C", "epochs", "seed")


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _require_file(path, what):
    if path is None:
        raise CliError(f"missing required {what}")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _resolve_hyper(args):
    """Precedence: CLI flags > config file > per-(variant, dataset) defaults."""
    values = Hyperparams().to_dict()
    if args.dataset:
        values.update(table_defaults(args.variant, args.dataset))
    if getattr(args, "config", None):
        cfg_path = _require_file(args.config, "config file")
        with open(cfg_path, encoding="utf-8") as fh:
            cfg = json.load(fh)
        unknown = set(cfg) - set(HYPER_FIELDS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        values.update(cfg)
    for name in HYPER_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return Hyperparams.from_dict(values)


def _flags(args):
    return ModelFlags(
        share_target_encoder=args.share_target_encoder,
        per_layer_params=args.per_layer_params,
        freeze_embeddings=args.freeze_embeddings,
        scale_final_extra=args.scale_final_extra,
    )


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_training_inputs(args, hyper):
    train_recs = parse_dataset(_require_file(args.train_file, "training file"))
    if not train_recs:
        raise CliError(f"no records in {args.train_file}")
    test_recs = []
    if args.test_file:
        test_recs = parse_dataset(_require_file(args.test_file, "test file"))
    vocab = build_vocab([train_recs, test_recs])
    emb_path = _require_file(args.embeddings, "embedding file")
    store = load_embeddings(emb_path, vocab, hyper.dim_w, seed=hyper.seed)
    return train_recs, test_recs, store


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args):
    hyper = _resolve_hyper(args)
    train_recs, test_recs, store = _load_training_inputs(args, hyper)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    runs = []
    for run in range(args.runs):
        run_hyper = Hyperparams.from_dict({**hyper.to_dict(), "seed": hyper.seed + run})
        model, history = train(
            train_recs,
            store,
            run_hyper,
            variant=args.variant,
            flags=_flags(args),
            heldout_fraction=args.heldout_fraction,
        )
        if args.runs == 1:
            ckpt, hist = out_dir / "checkpoint.ckpt", out_dir / "history.json"
        else:
            ckpt, hist = out_dir / f"run{run}.ckpt", out_dir / f"run{run}.history.json"
        save_checkpoint(ckpt, model, extra_meta={"run": run})
        payload = history.to_dict()
        payload.update({"seed": run_hyper.seed, "variant": args.variant})
        _write_json(hist, payload)
        entry = {
            "checkpoint": str(ckpt),
            "history": str(hist),
            "best_epoch": history.best_epoch,
            "best_val_accuracy": max(history.val_accuracy),
        }
        if test_recs:
            report, _ = evaluate(model, test_recs, store)
            entry["test_accuracy"] = report.accuracy
            entry["test_macro_f1"] = report.macro_f1
        runs.append(entry)
    summary = {
        "variant": args.variant,
        "dataset": args.dataset,
        "hyperparams": hyper.to_dict(),
        "flags": _flags(args).to_dict(),
        "heldout_fraction": args.heldout_fraction,
        "runs": runs,
    }
    _write_json(out_dir / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def _eval_checkpoints(paths, records, store_check=None):
    reports = []
    vocab_hash = store_check
    for path in paths:
        model, meta = load_checkpoint(_require_file(path, "checkpoint"))
        if vocab_hash is None:
            vocab_hash = meta["vocab_hash"]
        elif meta["vocab_hash"] != vocab_hash:
            raise CliError(f"vocabulary hash mismatch for {path}")
        report, _ = evaluate(model, records, model.store)
        reports.append(report)
    return reports, vocab_hash


def cmd_eval(args):
    records = parse_dataset(_require_file(args.test_file, "test file"))
    if not records:
        raise CliError(f"no records in {args.test_file}")
    reports, vocab_hash = _eval_checkpoints(args.checkpoint, records)
    payload = {"checkpoints": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        payload["mean_accuracy"] = float(np.mean([r.accuracy for r in reports]))
        payload["mean_macro_f1"] = float(np.mean([r.macro_f1 for r in reports]))
    if args.ttest:
        if not args.baseline:
            raise CliError("--ttest needs --baseline checkpoints to compare against")
        base_reports, _ = _eval_checkpoints(args.baseline, records, store_check=vocab_hash)
        if len(base_reports) != len(reports) or len(reports) < 2:
            raise CliError("--ttest needs equally many (>= 2) checkpoints on both sides")
        t_acc, p_acc = paired_t_test(
            [r.accuracy for r in reports], [r.accuracy for r in base_reports]
        )
        t_f1, p_f1 = paired_t_test(
            [r.macro_f1 for r in reports], [r.macro_f1 for r in base_reports]
        )
        payload["ttest"] = {
            "accuracy": {"t": t_acc, "p": p_acc},
            "macro_f1": {"t": t_f1, "p": p_f1},
            "baseline": [r.to_dict() for r in base_reports],
        }
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def cmd_predict(args):
    model, _meta = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    from .pipeline import TargetedSentence, _find_occurrences  # local: reuses parsing rules

    tokens = args.sentence.lower().split()
    target_tokens = args.target.lower().split()
    occurrences = _find_occurrences(tokens, target_tokens)
    if not occurrences:
        raise CliError(f"target {args.target!r} not found in sentence")
    if args.occurrence >= len(occurrences):
        raise CliError(f"occurrence {args.occurrence} out of range ({len(occurrences)} found)")
    record = TargetedSentence(
        tokens=tokens,
        target_start=occurrences[args.occurrence] + 1,
        target_len=len(target_tokens),
        label="O",  # placeholder; prediction ignores it
    )
    pad_len = max(record.n, model.hyper.s)
    batch = pad_batch([record], pad_len, model.store, model.hyper.C)
    label, probs, ngram = model.predict_example(batch.examples[0], tokens=tokens)
    payload = {
        "label": label,
        "probabilities": {"P": probs[0], "N": probs[1], "O": probs[2]},
        "ngram": ngram.to_dict(),
    }
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def _tiny_hyper(args):
    return Hyperparams(
        dim_w=args.dim_w or 8, dim_h=args.dim_h or 4, p_lstm=0.0, p_sent=0.0,
        L=args.L or 2, batch_size=2, s=args.s or 2, n_k=args.n_k or 3,
        C=args.C or 10.0, epochs=1, seed=args.seed or 1,
    )


def run_gradcheck(variant, hyper, flags=None, corrupt=None, n_tokens=6, target_len=2):
    """Backward-vs-finite-difference comparison for one variant.

    Parameters are re-drawn from U(-0.5, 0.5) so the check runs at a
    generic point: the tiny training initialization parks every ReLU
    pre-activation within finite-difference epsilon of its kink, where
    central differences are meaningless. Returns (passed, per-parameter
    max relative error). ``corrupt`` deliberately breaks one analytic
    gradient (negative control).
    """
    records = synth.make_corpus(n_sentences=4, seed=hyper.seed)[:2]
    store = synth.make_store(dim_w=hyper.dim_w, seed=hyper.seed)
    pad_len = max(max(r.n for r in records), n_tokens)
    batch = pad_batch(records, pad_len, store, hyper.C)
    model = TnetModel(store, hyper, variant=variant, flags=flags)
    params = model.named_params()
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 0x6AD]))
    for name, p in params.items():
        p.data = rng.uniform(-0.5, 0.5, size=p.data.shape)
        if name == "embedding":
            p.data[store.pad_id] = 0.0  # pad vector stays zero by convention
    loss_fn = lambda: model.loss_batch(batch.examples)
    return ag.gradient_check(loss_fn, params, corrupt=corrupt)


def cmd_gradcheck(args):
    variants = sorted(VARIANTS) if args.variant == "all" else [args.variant]
    hyper = _tiny_hyper(args)
    all_ok = True
    results = {}
    start = time.perf_counter()
    for variant in variants:
        passed, report = run_gradcheck(variant, hyper, flags=_flags(args))
        all_ok = all_ok and passed
        results[variant] = {"passed": passed, "max_rel_error": report}
        for name, err in report.items():
            status = "PASS" if err < 1e-4 else "FAIL"
            print(f"{status} {variant:>18} {name:<22} max_rel={err:.3e}")
    elapsed = time.perf_counter() - start
    payload = {"results": results, "elapsed_seconds": elapsed, "tolerance": 1e-4}
    if args.out:
        _write_json(args.out, payload)
    print(f"{'PASS' if all_ok else 'FAIL'}: {len(variants)} variant(s) in {elapsed:.1f}s")
    return 0 if all_ok else 1


def cmd_ablate(args):
    hyper = _resolve_hyper(args)
    train_recs, test_recs, store = _load_training_inputs(args, hyper)
    eval_recs = test_recs or train_recs
    rows = []
    for variant in sorted(VARIANTS):
        model, history = train(
            train_recs,
            store,
            hyper,
            variant=variant,
            flags=_flags(args),
            heldout_fraction=args.heldout_fraction,
        )
        report, _ = evaluate(model, eval_recs, store)
        rows.append(
            {
                "variant": variant,
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
                "best_epoch": history.best_epoch,
            }
        )
    payload = {"hyperparams": hyper.to_dict(), "rows": rows}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "ablation.json", payload)
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  {'acc':>7}  {'macro-f1':>8}")
    for r in rows:
        print(f"{r['variant']:<{width}}  {r['accuracy']:>7.4f}  {r['macro_f1']:>8.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_hyper_flags(p):
    p.add_argument("--dim-w", dest="dim_w", type=int)
    p.add_argument("--dim-h", dest="dim_h", type=int)
    p.add_argument("--p-lstm", dest="p_lstm", type=float)
    p.add_argument("--p-sent", dest="p_sent", type=float)
    p.add_argument("--L", dest="L", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--s", dest="s", type=int)
    p.add_argument("--n-k", dest="n_k", type=int)
    p.add_argument("--C", dest="C", type=float)
    p.add_argument("--epochs", dest="epochs", type=int)
    p.add_argument("--seed", dest="seed", type=int)


def _add_flag_flags(p):
    p.add_argument("--share-target-encoder", action="store_true")
    p.add_argument("--per-layer-params", action="store_true")
    p.add_argument("--freeze-embeddings", action="store_true")
    p.add_argument("--scale-final-extra", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="tnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write checkpoint + history")
    p_train.add_argument("--variant", choices=sorted(VARIANTS), default="tnet-lf")
    p_train.add_argument("--dataset", choices=DATASETS, help="select tuned defaults")
    p_train.add_argument("--train-file", required=True)
    p_train.add_argument("--test-file")
    p_train.add_argument("--embeddings", required=True)
    p_train.add_argument("--config", help="JSON file of hyperparameter overrides")
    p_train.add_argument("--runs", type=int, default=1)
    p_train.add_argument("--heldout-fraction", type=float, default=0.2)
    p_train.add_argument("--out", required=True)
    _add_hyper_flags(p_train)
    _add_flag_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate checkpoints on a test file")
    p_eval.add_argument("--test-file", required=True)
    p_eval.add_argument("--checkpoint", nargs="+", required=True)
    p_eval.add_argument("--baseline", nargs="+")
    p_eval.add_argument("--ttest", action="store_true")
    p_eval.add_argument("--out")
    p_eval.set_defaults(fn=cmd_eval)

    p_pred = sub.add_parser("predict", help="classify one (sentence, target) pair")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--sentence", required=True)
    p_pred.add_argument("--target", required=True)
    p_pred.add_argument("--occurrence", type=int, default=0)
    p_pred.add_argument("--out")
    p_pred.set_defaults(fn=cmd_predict)

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients per variant")
    p_grad.add_argument("--variant", default="all", choices=["all", *sorted(VARIANTS)])
    p_grad.add_argument("--out")
    _add_hyper_flags(p_grad)
    _add_flag_flags(p_grad)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="train and score every variant")
    p_abl.add_argument("--variant", default="tnet-lf", choices=sorted(VARIANTS),
                       help="variant used only for default hyperparameters")
    p_abl.add_argument("--dataset", choices=DATASETS)
    p_abl.add_argument("--train-file", required=True)
    p_abl.add_argument("--test-file")
    p_abl.add_argument("--embeddings", required=True)
    p_abl.add_argument("--config")
    p_abl.add_argument("--heldout-fraction", type=float, default=0.2)
    p_abl.add_argument("--out", required=True)
    _add_hyper_flags(p_abl)
    _add_flag_flags(p_abl)
    p_abl.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: artifact not produced
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
