import pytest

from wbft.config import parse_config

ACCEPTANCE_LINES: list[str] = []


def equal_profiles(n, byzantine=None, mean=80.0):
    byzantine = byzantine or {}
    return [{"name": f"n{j}", "quality_mean": mean, "quality_stddev": 0.0,
             "byzantine": list(byzantine.get(j, ()))} for j in range(n)]


def lossless_config(n=10, requests=20, mode="WBFT", **extra):
    """Equal-quality honest nodes on perfect links: every attempt commits."""
    data = {
        "nodes": {"profiles": equal_profiles(n)},
        "consensus": {"mode": mode},
        "hsc": {"k_max": min(5, n)},
        "channel": {"target_pl": None, "link_success": 1.0, "tick_seconds": 1e-6},
        "workload": {"requests": requests},
    }
    for k, v in extra.items():
        data.setdefault(k, {}).update(v)
    return parse_config(data)


@pytest.fixture
def lossless():
    return lossless_config


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
