import os
import sys
import json
import hashlib
import subprocess

import numpy as np
from enum import Enum
from loguru import logger
from pathlib import Path
from typing import Any, Iterable, Union


class Metavar(Enum):
    """This class is used to display intuitive input types via the metavar field of argparse."""

    file = "<file>"
    str = "<str>"
    folder = "<folder>"
    int = "<int>"
    list = "<list>"
    float = "<float>"

    def __str__(self):
        return self.value


class ArgParseException(Exception):
    pass


def get_arguments(parser, args):
    """Get arguments from function input or command line.

    Arguments:
        parser (argparse.ArgumentParser): ArgumentParser object
        args (list): either a list of arguments or None. The list
            should be formatted like this:
            ["--config", "SOME_ARG", "--seed", "SOME_ARG"]
    """
    try:
        args = parser.parse_args(args)
    except SystemExit as e:
        if e.code != 0:  # Calling `--help` raises SystemExit with 0 exit code (i.e. not an ArgParseException)
            raise ArgParseException('Error parsing args')
        else:
            sys.exit(0)

    return args


def derive_seed(*keys: int) -> int:
    """Derive an independent 32-bit seed from a tuple of non-negative integers.

    The same keys always give the same seed, and distinct key tuples give statistically independent
    streams, which is what lets every client, round and sample own its randomness.

    Args:
        *keys (int): Seed components, e.g. ``(seed, client_index, round_index)``.

    Returns:
        int: Seed usable by ``numpy.random.default_rng`` and ``torch.Generator.manual_seed``.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    """Generate the sha256 digest of a file, reading it by blocks.

    Args:
        path (str or Path): File to hash.

    Returns:
        str: Hexadecimal digest.
    """
    sha256_hash = hashlib.sha256()
    with open(path, "rb") as f:
        for byte_block in iter(lambda: f.read(4096), b""):
            sha256_hash.update(byte_block)
    return sha256_hash.hexdigest()


def directory_digest(path: Union[str, Path], exclude: Iterable[str] = ()) -> str:
    """Digest of every file below a directory (relative path and content), in sorted order."""
    exclude = set(exclude)
    digest = hashlib.sha256()
    for file in sorted(p for p in Path(path).rglob("*") if p.is_file()):
        relative = file.relative_to(path).as_posix()
        if relative in exclude:
            continue
        digest.update(relative.encode("utf-8"))
        digest.update(sha256_file(file).encode("ascii"))
    return digest.hexdigest()


def canonical_json(obj: Any) -> bytes:
    """Serialize ``obj`` to JSON bytes with sorted keys, so equal objects give equal bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_json(obj: Any, path: Union[str, Path]):
    with open(path, "w") as fp:
        json.dump(obj, fp, indent=4, sort_keys=True)
        fp.write("\n")


def load_json_file(path: Union[str, Path]) -> Any:
    with open(path, "r") as fp:
        return json.load(fp)


def _git_info(commit_env='MICROFED_COMMIT', branch_env='MICROFED_BRANCH'):
    """Get microfed version info from GIT.

    Args:
        commit_env (str): Environment variable consulted when git is unavailable.
        branch_env (str): Environment variable consulted when git is unavailable.
    Returns:
        str, str, str, str: installation type, commit, branch, version.
    """
    commit = os.getenv(commit_env, "unknown")
    branch = os.getenv(branch_env, "unknown")
    if Path(__microfed_dir__, ".git").is_dir():
        commit = _run_git(["rev-parse", "HEAD"]) or commit
        branch = _run_git(["rev-parse", "--abbrev-ref", "HEAD"]) or branch

    install_type = 'git' if commit != 'unknown' else 'package'

    path_version = Path(__microfed_dir__, 'microfed', 'version.txt')
    with path_version.open() as f:
        version = f.read().strip()

    return install_type, commit, branch, version


def _run_git(arguments):
    try:
        p = subprocess.Popen(["git"] + arguments, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                             cwd=__microfed_dir__)
    except OSError:
        return None
    output, _ = p.communicate()
    if p.returncode == 0:
        return output.decode().strip()
    return None


def _version_string():
    install_type, commit, branch, version = _git_info()
    if install_type == "package":
        return version
    else:
        return "{install_type}-{branch}-{commit}".format(install_type=install_type, branch=branch, commit=commit)


__microfed_dir__ = Path(__file__).resolve().parent.parent
__version__ = _version_string()


def init_microfed():
    """Initialize microfed for typical terminal usage."""
    # Display microfed version
    logger.info('\nmicrofed ({})\n'.format(__version__))
