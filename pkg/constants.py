import os

# vocabulary: special tokens first, then the 39 ZINC symbols
pad_token = "<pad>"
bos_token = "<bos>"
eos_token = "<eos>"
special_tokens = [pad_token, bos_token, eos_token]
smiles_symbols = ["1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "=", "#", "(", ")", "[", "]",
                  "H", "B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Br", "Sn", "I",
                  "c", "n", "o", "p", "s", "\\", "/", "@", "@@"]
vocab_size = len(special_tokens) + len(smiles_symbols)

property_names = ["molwt", "logp", "qed"]
corpus_header = ["smiles", "molwt", "logp", "qed"]
generation_header = ["smiles", "anchored_property", "anchor", "valid", "unique", "novel", "molwt"]
metrics_log_header = ["step", "epoch", "variant", "l_recon", "l_reg", "beta", "inter_kld"]

# reference corpus means (molwt, logp, qed)
zinc250k_means = (330.0, 2.457, 0.7318)
zinc310k_means = (313.0, 1.9029, 0.7527)

max_len = 120
in_domain_z = 1.645
ood_z = 4.0
regimes = ["in_domain", "ood"]

# model
d_model = 128
n_layers = 3
n_heads = 4
d_z = 100
n_decoders = 3
ff_mult = 4
dropout = 0.0
embedding_std = 0.02

# losses
alpha = 0.5
kld_target = 15.0
kp = 0.01
ki = 0.0001
kld_ema = 0.99
anneal_fraction = 0.1

# sampler
decode_rules = ["greedy", "multinomial"]
ensemble_spaces = ["pre_softmax", "post_softmax"]
temperature = 1.0

# training
variants = ["base", "controlvae", "sd_dif_col", "md", "md_col", "md_dif", "md_dif_col"]
epochs = 100
batch_size = 128
lr = 0.001
adam_betas = (0.9, 0.999)
adam_eps = 1e-6
grad_clip = 5.0
checkpoint_every = 1000
seed = 2
sd_draws = 3

# generation / evaluation
n_generate = 2000
kld_sample_size = 256
possible_oracles = ["molwt"]

# output layout
default_out_dir = "runs"
default_log_dir = "log"
checkpoint_name = "checkpoint.pt"
metrics_log_name = "metrics_log.csv"
config_dump_name = "config.txt"
report_text_name = "metrics.txt"
report_json_name = "metrics.json"
generation_name = "generations.csv"
sweep_summary_name = "sweep_summary.csv"
default_corpus = os.path.join("data", "zinc250k.csv")
checkpoint_version = 1
