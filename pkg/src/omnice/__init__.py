"""OmniCE: full-stack histopathology corruption emulation and robustness metrics.

Emulates 21 corruption types from the pathological slide life-cycle
(staining chemistry, mechanical deformation, scanner optics), each at 5
quantified severity levels, with deterministic seeding for reproducible
benchmark generation, plus CE/mCE/rCE/dice robustness metrics.
"""

__version__ = "0.1.0"

from .severity import KINDS, SEVERITIES, CorruptionSpec  # noqa: E402,F401


def corrupt_one(image, spec, table=None):
    from .pipeline import corrupt_one as _impl

    return _impl(image, spec, table)
