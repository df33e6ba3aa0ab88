import sys

import pytest
import torch

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    """Replay the acceptance report lines after capture is released."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance report")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Eight-document corpus written once for the whole session."""
    from fsacdm.corpus import generate, read_corpus, write_corpus

    root = tmp_path_factory.mktemp("corpus8")
    write_corpus(root, generate(0, 8))
    docs, images = read_corpus(root)
    return root, docs, images
