import pytest


@pytest.fixture
def report(capsys):
    """Print one criterion line past pytest's output capture."""

    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")

    return emit
