"""Command-line interface: ``nplda <command> [options]``.

Every command that writes files also writes a JSON run manifest next to its
outputs (``<out>.manifest.json`` for files, ``manifest.json`` for directories).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .baselines import DpldaModel, dplda_init_from_plda
from .experiment import ExperimentConfig, all_pair_trials, run_experiment, save_result
from .io import (
    FormatError,
    ScoreSet,
    attach_labels,
    ensure_parent,
    load_embeddings,
    load_model,
    load_scores,
    load_trials,
    save_embeddings,
    save_model,
    save_trials,
    write_scores,
)
from .losses import LOSSES
from .metrics import (
    CALIBRATION_PRIOR,
    ConvergenceError,
    affine_calibrate,
    apply_calibration,
    evaluate,
)
from .network import init_from_generative, init_random
from .plda import GenerativePlda, derive_pq, estimate_plda, random_plda, sample_synthetic
from .preprocess import (
    AffineTransform,
    default_lda_dim,
    estimate_centering,
    estimate_lda,
    make_frontend,
)
from .scoring import score_trials
from .trainer import OPTIMIZERS, THETA_INITS, TrainConfig, sample_training_trials, train

log = logging.getLogger("nplda")


def _version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_manifest(args, inputs, outputs, extra=None):
    """Record command, flags, seed, file paths and toolkit version."""
    first = Path(outputs[0])
    path = first / "manifest.json" if first.is_dir() else Path(f"{first}.manifest.json")
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": _version(),
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    m = random_plda(args.dim, args.rank, args.seed, between_scale=args.between_scale)
    if args.residual_scale != 1.0:
        m = GenerativePlda(m.mu, m.Phi, m.Sigma * args.residual_scale)
    es = sample_synthetic(m, args.speakers, args.sessions, args.seed + 1, prefix=args.prefix)
    ensure_parent(args.out)
    save_embeddings(args.out, es)
    write_manifest(args, [], [args.out])


def cmd_sample_trials(args):
    es = load_embeddings(args.embeddings)
    if args.all_pairs:
        trials = all_pair_trials(es)
    else:
        trials = sample_training_trials(es, args.n_target, args.n_nontarget, args.seed)
    ensure_parent(args.out)
    save_trials(args.out, trials)
    write_manifest(args, [args.embeddings], [args.out])


def cmd_estimate_plda(args):
    es = load_embeddings(args.embeddings)
    lda_dim = args.lda_dim or default_lda_dim(es.dim)
    mean = estimate_centering(es)
    lda = estimate_lda(es.matrix - mean, lda_dim, speakers=es.speakers)
    frontend = make_frontend(mean, lda)
    model = estimate_plda(es, args.rank, vectors=frontend.transform(es.matrix),
                          max_iter=args.max_iter)
    ensure_parent(args.out)
    save_model(args.out, model, frontend)
    write_manifest(args, [args.embeddings], [args.out],
                   {"em_iterations": len(model.loglik_history),
                    "final_loglik": model.loglik_history[-1]})


def _generative_pieces(path):
    model, frontend = load_model(path)
    if not isinstance(model, GenerativePlda):
        raise ValueError(f"{path} is not a generative PLDA model file")
    return model, frontend


def _initial_model(args, es, frontend, plda):
    if args.backend == "dplda":
        if args.init == "generative":
            return dplda_init_from_plda(derive_pq(plda), plda.mu)
        d = frontend.out_dim
        return DpldaModel(np.zeros(2 * d * d + d + 1))
    if args.init == "generative":
        # the frontend already folds centering into its bias
        lda = AffineTransform(frontend.weight, frontend.bias)
        return init_from_generative(np.zeros(frontend.in_dim), lda, plda)
    d = args.dim or (frontend.out_dim if frontend is not None else default_lda_dim(es.dim))
    return init_random(es.dim, d, args.seed, mean=es.matrix.mean(axis=0))


def cmd_train(args):
    es = load_embeddings(args.embeddings)
    trials = load_trials(args.trials)
    val = load_trials(args.val_trials) if args.val_trials else trials
    plda = frontend = None
    if args.plda:
        plda, frontend = _generative_pieces(args.plda)
    if plda is None and (args.init == "generative" or args.backend == "dplda"
                         or args.loss == "bce_reg"):
        raise ValueError("--plda is required for generative init, DPLDA and bce_reg")
    cfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, max_epochs=args.epochs,
                      seed=args.seed, loss=args.loss, alpha=args.alpha,
                      lambda_reg=args.lambda_reg, bce_mix_weight=args.bce_weight,
                      optimizer=args.optimizer, theta_init=args.theta_init)
    model = _initial_model(args, es, frontend, plda)
    ref = vref = None
    if args.loss == "bce_reg":
        ref = score_trials(plda, trials, es, frontend).scores
        vref = score_trials(plda, val, es, frontend).scores

    out = Path(args.out)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    # DPLDA files carry the frontend; Neural PLDA files carry their own layers
    fe = frontend if isinstance(model, DpldaModel) else None

    def on_epoch(epoch, m, history):
        save_model(ckpt / f"epoch{epoch:03d}.model", m, fe)

    trained, history = train(model, trials, es, val, cfg, frontend=frontend,
                             ref_scores=ref, val_ref_scores=vref, on_epoch=on_epoch)
    save_model(out / "model.txt", trained, fe)
    (out / "history.tsv").write_text(history.to_tsv())
    inputs = [args.embeddings, args.trials] + [p for p in (args.val_trials, args.plda) if p]
    write_manifest(args, inputs, [out], {"train_config": cfg.to_dict(),
                                         "epochs_run": len(history)})


def cmd_score(args):
    model, frontend = load_model(args.model)
    es = load_embeddings(args.embeddings)
    trials = load_trials(args.trials)
    s = score_trials(model, trials, es, frontend)
    ensure_parent(args.out)
    write_scores(args.out, s)
    write_manifest(args, [args.model, args.embeddings, args.trials], [args.out])


def _labelled_scores(scores_path, trials_path):
    s = attach_labels(load_scores(scores_path), load_trials(trials_path))
    if any(t.label is None for t in s.trials):
        raise ValueError(f"{trials_path} has unlabelled trials")
    return s


def format_report(r: dict) -> str:
    return "\n".join([
        f"trials           {r['n_target']} target / {r['n_nontarget']} non-target",
        f"EER              {r['eer_percent']:.3f} %",
        f"minC_primary     {r['min_c_primary']:.4f}",
        f"actC_primary     {r['act_c_primary']:.4f}",
        f"minC_norm(99)    {r['min_c_norm_beta1']:.4f}  at theta {r['theta_beta1']:.4f}",
        f"minC_norm(199)   {r['min_c_norm_beta2']:.4f}  at theta {r['theta_beta2']:.4f}",
    ])


def cmd_eval(args):
    s = _labelled_scores(args.scores, args.trials)
    report = evaluate(s.scores, s.targets)
    print(format_report(report))
    if args.tsv:
        ensure_parent(args.tsv)
        keys = list(report)
        Path(args.tsv).write_text("\t".join(keys) + "\n"
                                  + "\t".join(repr(report[k]) for k in keys) + "\n")
        write_manifest(args, [args.scores, args.trials], [args.tsv])


def cmd_calibrate(args):
    s = _labelled_scores(args.scores, args.trials)
    a, b = affine_calibrate(s.scores, s.targets, prior=args.prior)
    target = load_scores(args.apply_to) if args.apply_to else s
    ensure_parent(args.out)
    write_scores(args.out, ScoreSet(target.trials, apply_calibration(target.scores, a, b)))
    inputs = [args.scores, args.trials] + ([args.apply_to] if args.apply_to else [])
    write_manifest(args, inputs, [args.out], {"scale": a, "offset": b})
    print(f"scale {a!r}\noffset {b!r}")


def cmd_experiment(args):
    cfg = ExperimentConfig(seed=args.seed, n_nontarget=args.n_nontarget)
    result = run_experiment(cfg, random_init=not args.skip_random)
    out = save_result(result, args.out)
    summary = {"baseline_min_c_primary": result.baseline_min_c,
               "trained_min_c_primary": result.trained_min_c,
               "random_init_min_c_primary": result.random_min_c}
    write_manifest(args, [], [out], summary)
    for k, v in summary.items():
        print(f"{k}\t{v:.4f}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="nplda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="draw synthetic embeddings from a random PLDA model")
    s.add_argument("--speakers", type=int, required=True)
    s.add_argument("--sessions", type=int, required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--between-scale", type=float, default=1.0)
    s.add_argument("--residual-scale", type=float, default=1.0,
                   help="multiply the residual covariance (domain shift)")
    s.add_argument("--prefix", default="spk", help="speaker id prefix")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sample-trials", help="sample matched training trials")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--n-target", type=int, default=0)
    s.add_argument("--n-nontarget", type=int, default=0)
    s.add_argument("--all-pairs", action="store_true", help="emit every pair instead")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample_trials)

    s = sub.add_parser("estimate-plda", help="centering + LDA + length norm + PLDA by EM")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--lda-dim", type=int, default=None, help="default: round(D/3)")
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--max-iter", type=int, default=50)
    s.add_argument("--seed", type=int, default=0, help="recorded only; EM is deterministic")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate_plda)

    s = sub.add_parser("train", help="train Neural PLDA or DPLDA")
    s.add_argument("--backend", choices=("nplda", "dplda"), default="nplda")
    s.add_argument("--init", choices=("generative", "random"), default="generative")
    s.add_argument("--plda", help="generative model file (from estimate-plda)")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--val-trials")
    s.add_argument("--loss", choices=LOSSES, default="soft_cprimary")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=4096)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--alpha", type=float, default=20.0)
    s.add_argument("--lambda-reg", type=float, default=0.0)
    s.add_argument("--bce-weight", type=float, default=0.1)
    s.add_argument("--optimizer", choices=sorted(OPTIMIZERS), default="sgd")
    s.add_argument("--theta-init", choices=THETA_INITS, default="model")
    s.add_argument("--dim", type=int, default=None, help="network width for random init")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score a trial list with any model file")
    s.add_argument("--model", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="EER and detection costs of a labelled score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--trials", required=True, help="labelled key")
    s.add_argument("--tsv", help="also write the report as TSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("calibrate", help="fit and apply an affine calibration")
    s.add_argument("--scores", required=True, help="dev scores to fit on")
    s.add_argument("--trials", required=True, help="labelled key for --scores")
    s.add_argument("--apply-to", help="score file to calibrate (default: --scores)")
    s.add_argument("--prior", type=float, default=CALIBRATION_PRIOR,
                   help="target prior weighting the fit (default: %(default).4g)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("experiment", help="run the synthetic end-to-end comparison")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-nontarget", type=int, default=ExperimentConfig.n_nontarget)
    s.add_argument("--skip-random", action="store_true", help="skip random-init training")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_experiment)
    return p


ERRORS = (FormatError, ValueError, KeyError, OSError, np.linalg.LinAlgError,
          ConvergenceError, FloatingPointError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"nplda {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
