"""Reference oracle for the m2unet engine.

Everything here is computed from first principles in float64 with
direct-definition loops: no code is shared with the engine, only the
documented file formats, parameter names and sampling conventions.  The
package has two jobs: `fixtures.generate_fixtures` writes the committed
golden files the engine's test suite replays, and `table1.audit_table1`
recomputes the canonical per-row parameter counts from the closed-form
block formulas.
"""

from .fixtures import generate_fixtures
from .table1 import audit_table1

__all__ = ["generate_fixtures", "audit_table1"]
__version__ = "0.1.0"
