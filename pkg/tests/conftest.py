import pytest

from ffssd.synth import SceneSpec, gen_split, load_split


@pytest.fixture(scope="session")
def small_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("split")
    gen_split(7, SceneSpec(), 24, root)
    return load_split(root)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Record ``(criterion, ok, detail)``; a summary line per criterion is printed at the end."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
