import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gcdk.grammar import load_grammar, load_vocabulary, reduce_grammar

ASSETS = Path(__file__).parent.parent / "src" / "gcdk" / "assets"


def load_asset(name):
    text = (ASSETS / f"{name}.gram").read_text(encoding="utf-8")
    vocab = load_vocabulary((ASSETS / f"{name}.vocab").read_text(encoding="utf-8"))
    return reduce_grammar(load_grammar(text, vocab))


@pytest.fixture(scope="session")
def brackets():
    return load_asset("brackets")


@pytest.fixture(scope="session")
def gfor():
    return load_asset("mini_for")


@pytest.fixture(scope="session")
def json_schema():
    return load_asset("json_schema_example")


@pytest.fixture(scope="session")
def desk_grammars(brackets, gfor, json_schema):
    return {"brackets": brackets, "mini_for": gfor, "json_schema_example": json_schema}


@pytest.fixture(scope="session")
def assets_dir():
    return ASSETS
