import pytest

from expertrag.experts import Document, ExpertKind, build_index
from expertrag.synthetic import make_synthetic_task

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}")


def _doc(kind, doc_id, title, body):
    return Document(doc_id, kind, title, body)


@pytest.fixture(scope="session")
def small_experts():
    text = [
        _doc(ExpertKind.TEXT, "t1", "Setophaga", "Setophaga is a genus of New World warblers."),
        _doc(ExpertKind.TEXT, "t2", "Titanic", "Titanic is a 1997 film directed by James Cameron."),
        _doc(ExpertKind.TEXT, "t3", "Parulidae", "The family Parulidae contains the warblers."),
    ]
    image = [
        _doc(ExpertKind.IMAGE, "i1", "Warbler photo", "A bay-breasted warbler perched on a branch."),
        _doc(ExpertKind.IMAGE, "i2", "Ship photo", "The Titanic leaving Southampton harbour."),
    ]
    table = [
        _doc(ExpertKind.TABLE, "g1", "GDP", "GDP\nCountry: France | Year: 2020 | GDP: 2.6T"),
        _doc(ExpertKind.TABLE, "g2", "Population", "Population\nCountry: France | Year: 2020 | Population: 67M"),
    ]
    return {ExpertKind.TEXT: build_index(text), ExpertKind.IMAGE: build_index(image), ExpertKind.TABLE: build_index(table)}


@pytest.fixture(scope="session")
def synthetic_task():
    return make_synthetic_task(seed=0)


@pytest.fixture(scope="session")
def synthetic_experts(synthetic_task):
    return synthetic_task.indexes()
