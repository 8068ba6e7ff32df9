import logging
import os
import time
import unittest
from collections import OrderedDict
from typing import Dict

from cdbuffer.test import (acceptance_test, adapt_test, additive_test,
                           backbone_test, cli_test, config_test,
                           discrepancy_test, harness_test, io_test,
                           subtractive_test, tensor_test)
from cdbuffer.util import colors as col

SUITES = OrderedDict([
    ('tensor', tensor_test),
    ('backbone', backbone_test),
    ('discrepancy', discrepancy_test),
    ('subtractive', subtractive_test),
    ('additive', additive_test),
    ('adapt', adapt_test),
    ('harness', harness_test),
    ('io', io_test),
    ('config', config_test),
    ('cli', cli_test),
])


def unittests(
    suites: Dict[str, bool],
    acceptance: bool = False,
    verbosity: int = logging.WARNING
) -> bool:
    """Run the selected unit test suites.

    Args:
        suites (dict): Suite name -> whether to run it.
        acceptance (bool, optional): Also run the long empirical acceptance
            tests. Defaults to False.
        verbosity (int, optional): Logging level. Defaults to
            logging.WARNING.

    Returns:
        bool: True if every test passed.
    """
    logging.getLogger('cdbuffer').setLevel(verbosity)
    modules = [SUITES[name] for name, run in suites.items() if run]
    if acceptance:
        os.environ['CDBUF_ACCEPTANCE'] = '1'
        modules.append(acceptance_test)

    print("Running unit tests...")
    start = time.time()
    loader = unittest.TestLoader()
    suite = unittest.TestSuite([loader.loadTestsFromModule(m) for m in modules])
    result = unittest.TextTestRunner().run(suite)
    m, s = divmod(time.time() - start, 60)
    status = col.green('passed') if result.wasSuccessful() else col.red('failed')
    print(f'Tests {status}. Time: {int(m)} min, {s:.2f} sec')
    return result.wasSuccessful()
