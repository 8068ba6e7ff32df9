'''Test script for running the unit tests and, optionally, the acceptance tests.'''

import logging
import multiprocessing
import os
import sys

import click
import tabulate  # type: ignore

from cdbuffer.test import SUITES, unittests
from cdbuffer.util import colors as col


def _suite_options(fn):
    for name in reversed(list(SUITES)):
        fn = click.option(f'--{name}', name, help=f'Run the {name} tests.',
                          required=False, type=bool)(fn)
    return fn


@click.command()
@click.option('--all', help='Run every unit test suite.',
              required=False, type=bool)
@click.option('--acceptance', help='Also run the long acceptance tests.',
              is_flag=True)
@_suite_options
def main(all, acceptance, **kwargs):
    '''Test script for the cdbuffer package.

    Unit tests live in `cdbuffer.test` and use the builtin `unittest`
    framework. Run every suite by executing this script with no arguments:

        python3 test.py

    To run only certain suites, set the individual flag to True:

        python3 test.py --adapt=True

    To run every suite while omitting some, set `--all` to True and other
    flags to False:

        python3 test.py --all=True --cli=False

    The acceptance tests train several source networks and take several
    minutes; enable them with `--acceptance` (or CDBUF_ACCEPTANCE=1).
    '''
    if 'CDBUF_LOGGING_LEVEL' in os.environ:
        verbosity = logging.getLogger('cdbuffer').getEffectiveLevel()
    else:
        verbosity = logging.WARNING
    if all is None and not any(v is not None for v in kwargs.values()):
        all = True
    if all is not None:
        kwargs = {k: all if kwargs[k] is None else kwargs[k] for k in kwargs}
    acceptance = acceptance or bool(os.environ.get('CDBUF_ACCEPTANCE'))

    print(col.bold("\nTests to run:"))
    runs = list(kwargs.values()) + [acceptance]
    print(tabulate.tabulate({
        'Test': list(kwargs.keys()) + ['acceptance'],
        'Run': [col.green('True') if v else col.red('False') for v in runs]
    }))
    ok = unittests(kwargs, acceptance=acceptance, verbosity=verbosity)
    sys.exit(0 if ok else 1)


if __name__ == '__main__':
    multiprocessing.freeze_support()
    main()  # pylint: disable=no-value-for-parameter
