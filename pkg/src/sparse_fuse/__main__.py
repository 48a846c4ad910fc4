# Copyright 2026 sparse-fuse contributors

"""Allow `python -m sparse_fuse`."""

from sparse_fuse.cli import entry_point

entry_point()
