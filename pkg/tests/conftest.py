import sys
from pathlib import Path

import pytest

from malverse import ir
from malverse.prototypes import default_registry
from malverse.triage import BayesModel

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"
GOLDEN = Path(__file__).resolve().parent / "golden"


def load(name: str) -> ir.Program:
    return ir.parse_program((CORPUS / f"{name}.mvir").read_text())


def corpus_programs() -> list[str]:
    return sorted(p.stem for p in CORPUS.glob("*.mvir"))


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture(scope="session")
def bayes():
    return BayesModel.load(CORPUS / "default.model")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
