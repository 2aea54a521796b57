# Copyright (c) 2026 The flowlens authors.
# SPDX-License-Identifier: Apache-2.0
"""Flow-based density estimation over camera images, with pixel-level
out-of-distribution maps and evolutionary camera-parameter adaptation."""

from flowlens._core import *  # noqa: F401,F403
from flowlens._core import __version__  # noqa: F401
