import os
import sys
import logging
import argparse
import numpy as np
import pandas as pd
from tqdm import tqdm
import constants
import utils
from data import condition_grid, load_corpus, normalize, sample_conditions
from generate import SamplerConfig, generate_batch
from metrics import MetricsReport, annotate_records, generative_efficiency, inter_decoder_kld, load_oracles, \
    records_from_csv, reconstruction_scores
from model import ModelConfig, count_parameters, model_size_mb
from smiles import check_validity, molecular_weight, tokenize
from sweep import run_sweep
from train import TrainConfig, TrainState, evaluate_losses, fit, shares_latent
from utils import CorpusIOError, MDVAEError, UnknownTokenError

logger = logging.getLogger(__name__)

# argparse bookkeeping that never goes into the effective config
internal_keys = {"command", "func", "config"}


def add_common_args(parser):
    parser.add_argument("--config", "-c", help="Path to a key = value config file; flags override its values")
    parser.add_argument("--seed", "-s", type=int, default=constants.seed, help="Master seed, specify 0 to use no seed and have different random behavior on each launch")
    parser.add_argument("--out_dir", "-o", default=constants.default_out_dir, help="Directory receiving every output of the run")
    parser.add_argument("--log_path", default=None, help="Directory path to dump log files (default <out_dir>/log), filepath if disable_logging is set")
    parser.add_argument("--disable_logging", action="store_true", help="Disable Logging, log_path becomes path to file")
    parser.add_argument("--no_progress", action="store_true", help="Disable progress bars")


def add_model_args(parser):
    parser.add_argument("--variant", "-v", default="md_dif_col", choices=constants.variants, help="Training variant")
    parser.add_argument("--k", type=int, default=constants.n_decoders, help="Number of decoders for MD variants")
    parser.add_argument("--corpus", default=constants.default_corpus, help="Training corpus CSV (smiles,molwt,logp,qed)")
    parser.add_argument("--epochs", "-e", type=int, default=constants.epochs)
    parser.add_argument("--batch_size", "-b", type=int, default=constants.batch_size)
    parser.add_argument("--lr", type=float, default=constants.lr)
    parser.add_argument("--max_len", type=int, default=constants.max_len, help="Longest SMILES kept, in tokens")
    parser.add_argument("--d_model", type=int, default=constants.d_model)
    parser.add_argument("--n_layers", type=int, default=constants.n_layers)
    parser.add_argument("--n_heads", type=int, default=constants.n_heads)
    parser.add_argument("--d_z", type=int, default=constants.d_z)
    parser.add_argument("--alpha", type=float, default=constants.alpha, help="Collaborative weight of the interpolated loss")
    parser.add_argument("--kld_target", type=float, default=constants.kld_target, help="KLD setpoint of the beta controller")
    parser.add_argument("--kp", type=float, default=constants.kp)
    parser.add_argument("--ki", type=float, default=constants.ki)
    parser.add_argument("--kld_ema", type=float, default=constants.kld_ema, help="Smoothing of the KLD fed to the controller")
    parser.add_argument("--anneal_steps", type=int, default=None, help="k-anneal ramp length, default 10%% of all steps")
    parser.add_argument("--grad_clip", type=float, default=constants.grad_clip)
    parser.add_argument("--checkpoint_every", type=int, default=constants.checkpoint_every, help="Steps between checkpoints, 0 for epoch ends only")
    parser.add_argument("--max_steps", type=int, default=None, help="Stop after this many optimizer steps")


def build_parser():
    parser = argparse.ArgumentParser(prog="mdvae", description="Multi-decoder conditional VAE for SMILES")
    sub = parser.add_subparsers(dest="command")
    subparsers = {}

    p = sub.add_parser("train", help="Train one variant")
    add_common_args(p)
    add_model_args(p)
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.set_defaults(func=cmd_train)
    subparsers["train"] = p

    p = sub.add_parser("generate", help="Generate molecules for every condition anchor")
    add_common_args(p)
    p.add_argument("--checkpoint", default=None, help="Checkpoint written by train")
    p.add_argument("--corpus", default=None, help="Training corpus for novelty, default the one stored in the checkpoint")
    p.add_argument("--regime", "-r", default="in_domain", choices=constants.regimes + ["both"])
    p.add_argument("--n", "-n", type=int, default=constants.n_generate, help="Generations per anchor")
    p.add_argument("--decode_rule", default="multinomial", choices=constants.decode_rules)
    p.add_argument("--temperature", type=float, default=constants.temperature)
    p.add_argument("--ensemble_space", default="pre_softmax", choices=constants.ensemble_spaces)
    p.add_argument("--oracles", default=list(constants.possible_oracles), nargs="+", help="Property oracles to compute, space separated")
    p.add_argument("--output", default=None, help="Generation CSV path, default <out_dir>/generations.csv")
    p.set_defaults(func=cmd_generate)
    subparsers["generate"] = p

    p = sub.add_parser("evaluate", help="Write the metrics report")
    add_common_args(p)
    p.add_argument("--checkpoint", default=None, help="Checkpoint written by train")
    p.add_argument("--seen", default=None, help="Corpus CSV of training molecules")
    p.add_argument("--unseen", default=None, help="Corpus CSV of held-out molecules")
    p.add_argument("--generations", default=[], nargs="+", help="Generation CSVs to score")
    p.add_argument("--batch_size", "-b", type=int, default=constants.batch_size)
    p.add_argument("--ensemble_space", default="pre_softmax", choices=constants.ensemble_spaces)
    p.add_argument("--kld_sample_size", type=int, default=constants.kld_sample_size)
    p.set_defaults(func=cmd_evaluate)
    subparsers["evaluate"] = p

    p = sub.add_parser("sweep-k", help="Train every decoder count at matched parameter count")
    add_common_args(p)
    add_model_args(p)
    p.add_argument("--ks", default=[1, 2, 3, 4, 5, 6, 7], type=int, nargs="+", help="Decoder counts, space separated")
    p.add_argument("--seeds", default=None, type=int, nargs="+", help="Seeds averaged per K, default --seed")
    p.add_argument("--unseen", default=None, help="Held-out corpus CSV")
    p.add_argument("--workers", "-w", type=int, default=1)
    p.add_argument("--verbose", action="store_true", help="Print tracebacks of failed runs")
    p.set_defaults(func=cmd_sweep_k)
    subparsers["sweep-k"] = p

    p = sub.add_parser("tokenize", help="Print the vocabulary symbols of SMILES strings")
    p.add_argument("smiles", nargs="+")
    p.set_defaults(func=cmd_tokenize)
    subparsers["tokenize"] = p

    p = sub.add_parser("validate", help="Check SMILES strings and print their molecular weight")
    p.add_argument("smiles", nargs="+")
    p.add_argument("--strict", action="store_true", help="Also enforce atom valences")
    p.set_defaults(func=cmd_validate)
    subparsers["validate"] = p
    return parser, subparsers


def apply_config_file(parser, path):
    """Turn the file's values into parser defaults so command-line flags still win."""
    if not os.path.isfile(path):
        raise CorpusIOError("Config file not found: {}".format(path))
    values = utils.read_config_file(path)
    defaults = {}
    for action in parser._actions:
        if action.dest not in values:
            continue
        raw = values.pop(action.dest)
        convert = action.type or str
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = raw.strip().lower() in ("1", "true", "yes")
        elif action.nargs in ("+", "*"):
            defaults[action.dest] = [convert(v) for v in raw.split()]
        else:
            defaults[action.dest] = convert(raw)
    for key in values:
        logger.warning("Ignoring unknown config key {}".format(key))
    parser.set_defaults(**defaults)


def prepare_run(args):
    """Create the output directory, start logging, fix the seed and dump the effective config."""
    os.makedirs(args.out_dir, exist_ok=True)
    if args.log_path is None:
        args.log_path = os.path.join(args.out_dir, "results.log" if args.disable_logging else constants.default_log_dir)
    utils.setup_logging(args.log_path, args.disable_logging)
    if args.seed == 0:
        args.seed = int(np.random.SeedSequence().entropy)
        logger.info("Initialise random number generator with no seed, drew entropy {}".format(args.seed))
    else:
        logger.info("Initialise random number generator with seed {}".format(args.seed))
    config = {k: v for k, v in vars(args).items() if k not in internal_keys and v is not None}
    utils.write_config_file(os.path.join(args.out_dir, constants.config_dump_name), config)
    return args.out_dir


def model_config_from_args(args):
    return ModelConfig(d_model=args.d_model, n_layers=args.n_layers, n_heads=args.n_heads, d_z=args.d_z,
                       n_decoders=args.k, max_len=args.max_len)


def train_config_from_args(args):
    return TrainConfig(variant=args.variant, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       seed=args.seed, checkpoint_every=args.checkpoint_every, grad_clip=args.grad_clip,
                       alpha=args.alpha, kld_target=args.kld_target, kp=args.kp, ki=args.ki, kld_ema=args.kld_ema,
                       anneal_steps=args.anneal_steps, max_steps=args.max_steps, progress=not args.no_progress)


def cmd_train(args):
    out_dir = prepare_run(args)
    corpus = load_corpus(args.corpus, max_len=args.max_len)
    state, history = fit(train_config_from_args(args), model_config_from_args(args), corpus, out_dir,
                         resume=args.resume, corpus_path=os.path.abspath(args.corpus))
    logger.info("Finished {} after {} steps, checkpoint {}".format(
        state.train_config.variant, state.step, os.path.join(out_dir, constants.checkpoint_name)))
    if not history.empty:
        print(history.to_string(index=False))
    return 0


def cmd_generate(args):
    out_dir = prepare_run(args)
    state = TrainState.load(args.checkpoint)
    model, stats = state.model, state.stats

    corpus_path = args.corpus or state.corpus_path
    if corpus_path and os.path.isfile(corpus_path):
        training_smiles = load_corpus(corpus_path, max_len=state.model_config.max_len).smiles_set()
    else:
        logger.warning("Training corpus {} unavailable, every valid molecule counts as novel".format(corpus_path))
        training_smiles = frozenset()

    regimes = constants.regimes if args.regime == "both" else [args.regime]
    anchors = [anchor for regime in regimes for anchor in condition_grid(stats, regime)]
    sampler = SamplerConfig(max_len=state.model_config.max_len, decode_rule=args.decode_rule,
                            temperature=args.temperature, ensemble_space=args.ensemble_space)
    shared = shares_latent(state.train_config.variant, model.n_decoders)
    oracles = load_oracles(args.oracles)
    rng = utils.numpy_rng(args.seed, "condition")

    rows = []
    for idx, anchor in enumerate(tqdm(anchors, disable=args.no_progress)):
        raw = sample_conditions(stats, anchor.property_name, anchor.value, args.n, rng)
        results = generate_batch(model, normalize(raw, stats), sampler, utils.torch_generator(args.seed, "decode", idx),
                                 shared_latent=shared)
        records = annotate_records([r.smiles for r in results], training_smiles, anchor.property_name, anchor.value,
                                   truncated=[r.truncated for r in results], oracles=oracles)
        logger.info("{} {} = {:.4f}: efficiency {:.4f}, {} valid".format(
            anchor.regime, anchor.property_name, anchor.value, generative_efficiency(records),
            sum(r.valid for r in records)))
        for r in records:
            rows.append([r.smiles, anchor.property_name, anchor.value, r.valid, r.unique, r.novel,
                         r.properties.get("molwt", np.nan)])

    output = args.output or os.path.join(out_dir, constants.generation_name)
    with utils.atomic_path(output) as tmp_path:
        pd.DataFrame(rows, columns=constants.generation_header).to_csv(tmp_path, index=False)
    logger.info("Wrote {} generations for {} anchors to {}".format(len(rows), len(anchors), output))
    return 0


def cmd_evaluate(args):
    out_dir = prepare_run(args)
    if not (args.seen or args.unseen or args.generations):
        raise MDVAEError("Nothing to evaluate: give --seen, --unseen or --generations")
    for path in [args.seen, args.unseen] + list(args.generations):
        if path and not os.path.isfile(path):
            raise CorpusIOError("Input file not found: {}".format(path))
    state = TrainState.load(args.checkpoint)
    model, stats = state.model, state.stats
    report = MetricsReport(n_parameters=count_parameters(model), model_size_mb=model_size_mb(model))

    seen_scores = unseen_scores = None
    seen = None
    if args.seen:
        seen = load_corpus(args.seen, max_len=state.model_config.max_len, name="seen")
        seen_scores = reconstruction_scores(seen, model, stats, args.batch_size, args.ensemble_space)
        report.l_recon, report.l_reg = evaluate_losses(state, seen, args.batch_size)
        if model.n_decoders >= 2:
            sample = seen.subset(range(min(len(seen), args.kld_sample_size)))
            report.inter_decoder_kld = inter_decoder_kld(sample, model, stats, args.batch_size)
    if args.unseen:
        unseen = load_corpus(args.unseen, max_len=state.model_config.max_len, name="unseen")
        if seen is not None:
            unseen = unseen.without(seen)
        if len(unseen):
            unseen_scores = reconstruction_scores(unseen, model, stats, args.batch_size, args.ensemble_space)
        else:
            logger.warning("Every unseen molecule also appears in the seen corpus, skipping")
    report.set_reconstruction(seen_scores, unseen_scores)
    for path in args.generations:
        report.add_generations(records_from_csv(path), stats)

    report.write_text(os.path.join(out_dir, constants.report_text_name))
    report.write_json(os.path.join(out_dir, constants.report_json_name))
    for key, value in report.to_flat().items():
        logger.info("{} = {}".format(key, "-" if value is None else value))
    with open(os.path.join(out_dir, constants.report_text_name), "r", encoding="utf-8") as f:
        print(f.read(), end="")
    return 0


def cmd_sweep_k(args):
    out_dir = prepare_run(args)
    for path in [args.corpus, args.unseen]:
        if path and not os.path.isfile(path):
            raise CorpusIOError("Corpus file not found: {}".format(path))
    summary = run_sweep(args.ks, args.seeds or [args.seed], train_config_from_args(args), model_config_from_args(args),
                        os.path.abspath(args.corpus), out_dir,
                        unseen_path=os.path.abspath(args.unseen) if args.unseen else None, workers=args.workers,
                        verbose=args.verbose)
    print(summary.to_string(index=False))
    return 0


def cmd_tokenize(args):
    status = 0
    for s in args.smiles:
        try:
            print(" ".join(tokenize(s).texts()))
        except UnknownTokenError as e:
            print("{}: {} {}".format(s, e.code, e), file=sys.stderr)
            status = 1
    return status


def cmd_validate(args):
    for s in args.smiles:
        report = check_validity(s, strict=args.strict)
        if not report.valid:
            print("{} invalid {}".format(s, ",".join(report.reasons)))
            continue
        try:
            print("{} valid molwt {:.3f}".format(s, molecular_weight(s, strict=args.strict)))
        except MDVAEError as e:
            print("{} valid molwt - ({})".format(s, e.code))
    return 0


def dispatch(parser, subparsers, argv):
    args, _ = parser.parse_known_args(argv)
    if args.command is None:
        parser.print_help()
        return 1
    try:
        if getattr(args, "config", None):
            apply_config_file(subparsers[args.command], args.config)
        args = parser.parse_args(argv)
        return args.func(args)
    except Exception as e:
        logger.error(e, exc_info=True)
        print("Error [{}]: {}".format(getattr(e, "code", type(e).__name__), e), file=sys.stderr)
        return 1


def main(argv=None):
    parser, subparsers = build_parser()
    try:
        return dispatch(parser, subparsers, argv)
    except SystemExit as e:
        # argparse exits with 2 on usage errors and 0 after --help
        return 0 if not e.code else 1


if __name__ == '__main__':
    sys.exit(main())
