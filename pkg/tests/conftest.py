import numpy as np
import pytest

from voxel2vec.volume import QuantizedVolume, SymbolVolume, Volume, quantize, symbolize


def symbol_volume_from_levels(levels: np.ndarray, R: int) -> SymbolVolume:
    """Univariate symbol volume from an ``(nz, ny, nx)`` array of levels."""
    levels = np.asarray(levels, dtype=np.int64)
    nz, ny, nx = levels.shape
    _, sv = symbolize([QuantizedVolume((nx, ny, nz), levels, R)])
    return sv


def two_blob_volume(seed: int, n: int = 24, R: int = 16) -> tuple[SymbolVolume, np.ndarray]:
    """Left half holds values in [0, 0.5), right half in [0.5, 1).

    Returns the symbol volume and a boolean per symbol: True for the left blob.
    """
    rng = np.random.default_rng(seed)
    data = rng.random((n, n, n)) * 0.5
    data[:, :, n // 2:] += 0.5
    data[0, 0, 0], data[-1, -1, -1] = 0.0, 1.0  # pin the bounds
    sv = symbolize([quantize(Volume.from_array(data), R)])[1]
    left = sv.table.combos[:, 0] < R // 2
    return sv, left


def checkerboard(n: int = 8) -> SymbolVolume:
    z, y, x = np.indices((n, n, n))
    return symbol_volume_from_levels((x + y + z) % 2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def shell_blob_volume(n: int = 32, R: int = 16) -> tuple[SymbolVolume, np.ndarray]:
    """Two radial blobs on a zero background.

    Blob A holds values in [0.1, 0.54], blob B in [0.55, 0.99], each
    decreasing outward, so every level forms a shell and the background is
    the most frequent neighbour of both outer shells.  Returns the symbol
    volume and a group per symbol: 0 background, 1 blob A, 2 blob B.
    """
    z, y, x = np.indices((n, n, n)).astype(float)
    rad = 0.22 * n
    data = np.zeros((n, n, n))
    for cx, lo in ((0.27 * n, 0.1), (0.73 * n, 0.55)):
        r = np.sqrt((x - cx) ** 2 + (y - n / 2) ** 2 + (z - n / 2) ** 2)
        inside = r < rad
        data[inside] = lo + 0.44 * (1 - r[inside] / rad)
    data[-1, -1, -1] = 1.0  # pin the upper bound
    sv = symbolize([quantize(Volume.from_array(data), R)])[1]
    lv = sv.table.combos[:, 0]
    group = np.where(lv == 0, 0, np.where(lv < R // 2, 1, 2))
    return sv, group


# One pass/fail line per acceptance criterion, printed in the terminal summary.
_CRITERIA: dict[str, tuple[int, str, str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        outcome = "FAIL" if failed else "PASS"
        prev = _CRITERIA.get(report.nodeid)
        if prev is None or prev[2] == "PASS":
            _CRITERIA[report.nodeid] = (props["criterion"], props.get("title", ""), outcome,
                                        props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, outcome, detail in sorted(_CRITERIA.values()):
        line = f"criterion {num:2d} {outcome}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
