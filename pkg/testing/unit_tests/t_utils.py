from pathlib import Path
from microfed.utils import init_microfed
from testing.common_testing_util import remove_tmp_dir, path_repo_root, path_temp

__test_dir__ = Path(path_repo_root, 'testing/unit_tests')
__tmp_dir__ = path_temp

init_microfed()


def create_tmp_dir():
    """Create a temporary directory for unit test output.

    1. Remove the ``tmp`` directory if it exists.
    2. Create an empty ``tmp`` directory.

    Any data files created during testing will go into ``tmp`` directory.
    This is created/removed for each test.
    """
    remove_tmp_dir()
    Path(path_temp).mkdir(parents=True)
