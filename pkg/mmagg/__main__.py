"""Allow ``python -m mmagg``."""

from .cli import main

main()
