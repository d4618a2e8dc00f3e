import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Values frozen from tests/oracles.py (independent computations).
ALPHA_2 = 2.181961295780694  # oracles.alpha_grid(2)
ALPHA_3 = 4.390957855714127  # oracles.alpha_grid(3)
AI_0 = 0.3550280538878172  # oracles.airy_contour(0.0)
AI_M1 = 0.5355608832923523  # oracles.airy_contour(-1.0)
E_1_1_4 = 18.66666664  # mesh-1e4 obstacle minimizer energy for (x, y, lam) = (1, 1, 4)

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
