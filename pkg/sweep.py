import os
import sys
import logging
import traceback
from dataclasses import replace
from multiprocessing import Pool
import numpy as np
import pandas as pd
from tqdm import tqdm
import constants
from data import load_corpus
from metrics import reconstruction_scores
from model import ModelConfig, count_parameters, model_size_mb
from train import TrainConfig, evaluate_losses, fit
from utils import slugify

logger = logging.getLogger(__name__)

result_cols = ["k", "seed", "variant", "n_parameters", "model_size_mb", "l_recon", "l_reg", "recon_seen",
               "recon_unseen"]
summary_cols = ["k", "variant", "n_seeds", "n_parameters", "model_size_mb", "l_recon", "l_reg", "recon_seen",
                "recon_unseen"]


def sweep_variant(k: int, variant: str) -> str:
    """K=1 runs are the single-decoder controller baseline."""
    return "controlvae" if k == 1 else variant


def build_configs(ks, seeds, train_config: TrainConfig, model_config: ModelConfig, corpus_path: str,
                  unseen_path, result_dir: str) -> list:
    configs = []
    for k in ks:
        for seed in seeds:
            config = dict()
            config["k"] = int(k)
            config["seed"] = int(seed)
            config["train_config"] = replace(train_config, variant=sweep_variant(k, train_config.variant),
                                             seed=int(seed), progress=False)
            config["model_config"] = replace(model_config, n_decoders=int(k), decoder_width=None)
            config["corpus_path"] = corpus_path
            config["unseen_path"] = unseen_path
            config["out_dir"] = os.path.join(result_dir, slugify("k{}_seed{}".format(k, seed)))
            configs.append(config)
    return configs


def worker(config):
    corpus = load_corpus(config["corpus_path"], max_len=config["model_config"].max_len)
    state, _ = fit(config["train_config"], config["model_config"], corpus, config["out_dir"],
                   corpus_path=config["corpus_path"], logger=logging.getLogger("train.k{}".format(config["k"])))
    l_recon, l_reg = evaluate_losses(state, corpus, state.train_config.batch_size)
    result = {
        "k": config["k"],
        "seed": config["seed"],
        "variant": state.train_config.variant,
        "n_parameters": count_parameters(state.model),
        "model_size_mb": model_size_mb(state.model),
        "l_recon": l_recon,
        "l_reg": l_reg,
        "recon_seen": reconstruction_scores(corpus, state.model, state.stats)[0],
        "recon_unseen": np.nan,
    }
    if config["unseen_path"]:
        unseen = load_corpus(config["unseen_path"], max_len=config["model_config"].max_len).without(corpus)
        if len(unseen):
            result["recon_unseen"] = reconstruction_scores(unseen, state.model, state.stats)[0]
    return result


def worker_exc(config):
    try:
        return (None, None, worker(config))
    except Exception as e:
        tb = traceback.format_exc()
        return (e, tb, config)


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Average every K over its seeds."""
    if results.empty:
        return pd.DataFrame([], columns=summary_cols)
    grouped = results.groupby(["k", "variant"], sort=True)
    summary = grouped[["n_parameters", "model_size_mb", "l_recon", "l_reg", "recon_seen", "recon_unseen"]].mean()
    summary.insert(0, "n_seeds", grouped.size())
    return summary.reset_index()[summary_cols]


def run_sweep(ks, seeds, train_config: TrainConfig, model_config: ModelConfig, corpus_path: str, result_dir: str,
              unseen_path=None, workers: int = 1, verbose: bool = False) -> pd.DataFrame:
    os.makedirs(result_dir, exist_ok=True)
    configs = build_configs(ks, seeds, train_config, model_config, corpus_path, unseen_path, result_dir)
    logger.info("Sweeping K in {} over seeds {}: {} runs".format(list(ks), list(seeds), len(configs)))

    out_fn = os.path.join(result_dir, "sweep_results.csv")
    err_dir = os.path.join(result_dir, "errors")
    os.makedirs(err_dir, exist_ok=True)
    results = []
    errors = 0
    with open(out_fn, "w", newline="") as csvf:
        pd.DataFrame([], columns=result_cols).to_csv(csvf, index=False, header=True)
        csvf.flush()
        if workers > 1:
            pool = Pool(workers)
            outcomes = pool.imap(worker_exc, configs)
        else:
            pool = None
            outcomes = map(worker_exc, configs)
        try:
            for exc, tb, result in tqdm(outcomes, total=len(configs)):
                if exc is not None:
                    errors += 1
                    print("Error processing K={} seed={}: {}".format(result["k"], result["seed"], exc),
                          file=sys.stderr)
                    if verbose:
                        print(tb, file=sys.stderr)
                    logger.error("Run K={} seed={} failed\n{}".format(result["k"], result["seed"], tb))
                    with open(os.path.join(err_dir, "error_{}.txt".format(errors)), "w") as ef:
                        ef.write("Error processing K={} seed={}\n".format(result["k"], result["seed"]))
                        ef.write(tb)
                        ef.write("\n")
                else:
                    results.append(result)
                    pd.DataFrame([result], columns=result_cols).to_csv(csvf, index=False, header=False)
                    csvf.flush()
        finally:
            if pool is not None:
                pool.close()
                pool.join()

    summary = summarize(pd.DataFrame(results, columns=result_cols))
    summary.to_csv(os.path.join(result_dir, constants.sweep_summary_name), index=False)
    for row in summary.itertuples(index=False):
        logger.info("K={} {} ({} seeds): {:.3f} MB, l_recon {:.4f}, recon seen {:.4f}".format(
            row.k, row.variant, row.n_seeds, row.model_size_mb, row.l_recon, row.recon_seen))
    logger.info("Sweep completed with {} errors".format(errors))
    if errors:
        raise RuntimeError("{} of {} sweep runs failed, see {}".format(errors, len(configs), err_dir))
    return summary
