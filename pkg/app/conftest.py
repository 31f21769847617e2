import json
from pathlib import Path

import pytest

REGRESSION_FILE = Path(__file__).with_name("regression_values.json")


@pytest.fixture
def frozen():
    """Look up a committed regression value; record it (and skip) when it is missing."""

    def lookup(key, value):
        data = json.loads(REGRESSION_FILE.read_text()) if REGRESSION_FILE.exists() else {}
        if key not in data:
            data[key] = value
            REGRESSION_FILE.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
            pytest.skip(f"recorded {key}={value!r} in {REGRESSION_FILE.name}; commit it")
        return data[key]

    return lookup
