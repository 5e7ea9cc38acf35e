import os
import re
import logging
import unicodedata
import configparser
import contextlib
import numpy as np
import torch


def slugify(value, allow_unicode=False):
    """
    Taken from https://github.com/django/django/blob/master/django/utils/text.py
    Convert to ASCII if 'allow_unicode' is False. Convert spaces or repeated
    dashes to single dashes. Remove characters that aren't alphanumerics,
    underscores, or hyphens. Convert to lowercase. Also strip leading and
    trailing whitespace, dashes, and underscores.
    """
    value = str(value)
    if allow_unicode:
        value = unicodedata.normalize('NFKC', value)
    else:
        value = unicodedata.normalize('NFKD', value).encode('ascii', 'ignore').decode('ascii')
    value = re.sub(r'[^\w\s-]', '-', value.lower())
    return re.sub(r'[-\s]+', '-', value).strip('-_')


class MDVAEError(Exception):
    code = "MDVAE_ERROR"


class UnknownTokenError(MDVAEError):
    code = "UNKNOWN_TOKEN"

    def __init__(self, text, position):
        super().__init__("No vocabulary symbol matches {!r} at position {}".format(text, position))
        self.text = text
        self.position = position


class CorpusIOError(MDVAEError):
    code = "IO_ERROR"


class MalformedRowError(MDVAEError):
    code = "MALFORMED_ROW"

    def __init__(self, row, message="malformed row"):
        super().__init__("Row {}: {}".format(row, message))
        self.row = row


class EmptyCorpusError(MDVAEError):
    code = "EMPTY_CORPUS"


class InvalidSmilesError(MDVAEError):
    code = "INVALID_SMILES"

    def __init__(self, message, reason=None):
        super().__init__(message)
        self.reason = reason


class UnsupportedAtomError(MDVAEError):
    code = "UNSUPPORTED_ATOM"


class ShapeMismatchError(MDVAEError):
    code = "SHAPE_MISMATCH"


class NonFiniteLossError(MDVAEError):
    code = "NON_FINITE_LOSS"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SingleDecoderError(MDVAEError):
    code = "SINGLE_DECODER"


class CheckpointError(MDVAEError):
    code = "CHECKPOINT_ERROR"


class ModuleLoggingFilter(logging.Filter):
    """Let through records of this project's module loggers only."""

    def __init__(self, names) -> None:
        super().__init__()
        self.names = set(names)

    def filter(self, record):
        return record.name.split(".")[0] in self.names


project_modules = ["__main__", "main", "smiles", "data", "model", "losses", "generate", "metrics", "train",
                   "sweep", "utils", "oracles"]


def setup_logging(log_path, disable_logging=False):
    """Attach the debug/results file handlers to the root logger.

    With logging on, log_path is a directory receiving debug.log and results.log.
    With logging off, log_path is a results file path, or None to stay silent.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_mdvae", False):
            root.removeHandler(handler)
            handler.close()

    handlers = []
    if not disable_logging:
        root.setLevel(logging.DEBUG)
        if log_path:
            os.makedirs(log_path, exist_ok=True)
        fh = logging.FileHandler(os.path.join(log_path, 'debug.log'), mode="w")
        fh.setLevel(logging.DEBUG)
        handlers.append(fh)
        rfh = logging.FileHandler(os.path.join(log_path, "results.log"), mode="w")
        rfh.setLevel(logging.INFO)
        handlers.append(rfh)
    elif log_path:
        root.setLevel(logging.INFO)
        log_dir = os.path.dirname(log_path)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        rfh = logging.FileHandler(log_path, mode="w")
        rfh.setLevel(logging.INFO)
        handlers.append(rfh)
    else:
        root.setLevel(logging.ERROR)

    for handler in handlers:
        handler.setFormatter(logging.Formatter('%(message)s'))
        handler.addFilter(ModuleLoggingFilter(project_modules))
        handler._mdvae = True
        root.addHandler(handler)
    return handlers


stream_ids = {"init": 0, "data": 1, "latent": 2, "decode": 3, "condition": 4}


def seed_sequence(seed, stream, *keys):
    """Named substream of the master seed; extra keys select e.g. an epoch or decoder."""
    return np.random.SeedSequence(seed, spawn_key=(stream_ids[stream],) + tuple(int(k) for k in keys))


def numpy_rng(seed, stream, *keys):
    return np.random.default_rng(seed_sequence(seed, stream, *keys))


def torch_generator(seed, stream, *keys):
    generator = torch.Generator()
    generator.manual_seed(int(seed_sequence(seed, stream, *keys).generate_state(1)[0]))
    return generator


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary sibling path; it replaces `path` only if the block succeeds."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = os.path.join(directory, ".{}.tmp".format(os.path.basename(path)))
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


def read_config_file(path):
    """Parse flat `key = value` lines with `#` comments into a dict of strings."""
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None)
    parser.optionxform = str
    with open(path, "r", encoding="utf-8") as f:
        parser.read_string("[run]\n" + f.read())
    return dict(parser["run"])


def write_config_file(path, config):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in config.items():
            if isinstance(value, (list, tuple)):
                value = " ".join(str(v) for v in value)
            f.write("{} = {}\n".format(key, value))
