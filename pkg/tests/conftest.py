import pytest

from iqvic.cli import cmd_gen
from iqvic.config import load_config

TINY_INI = """\
[model]
d_model = 16
n_heads = 2
d_ff = 32
lora_rank = 2

[pipeline]
context_tokens = 2
memory_capacity = 3

[train]
learning_rate = 0.002
checkpoint_every = 2

[data]
n_frames = 5
step1_train = 64
step2_train = 48
eval = 20

[bench]
methods = iqvic-c2,avgpool-c2,truncate-c2
max_new = 3
"""

# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_ini):
    out = tmp_path_factory.mktemp("data")
    cmd_gen(load_config(tiny_ini), out)
    return out


@pytest.fixture(scope="session")
def acceptance():
    """``acceptance(n, title, ok, detail)`` records and prints one criterion line, then asserts it."""
    def record(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title}: {detail}"
        ACCEPTANCE_LINES.append((n, line))
        print(line)
        assert ok, line

    return record
