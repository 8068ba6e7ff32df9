'''ANSI text styling for console logs and progress bars.'''

from typing import Any, Callable

RESET = '\033[0m'


def _style(code: str) -> Callable[[Any], str]:
    def apply(text: Any) -> str:
        return '\033[{}m{}{}'.format(code, text, RESET)
    return apply


dim = _style('2')
bold = _style('1')
red = _style('91')
green = _style('92')
yellow = _style('93')
blue = _style('94')

#: Every escape sequence emitted above, for stripping in file logs.
CODES = ['\033[2m', '\033[1m', '\033[91m', '\033[92m', '\033[93m',
         '\033[94m', RESET]
