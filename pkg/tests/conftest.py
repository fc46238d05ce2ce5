import time

import pytest

from slowfast.runner.config import build_config

TINY = {
    "model": {"num_layers": "2", "hidden": "16", "num_heads": "2", "ff_width": "32", "vocab_size": "512"},
    "bench": {"pretrain_per_language": "40", "n_train": "64", "n_validation": "90", "n_test": "40",
              "few_shot_pool": "10"},
    "pretrain": {"steps": "4", "batch_size": "16"},
    "train": {"steps": "12", "batch_size": "8", "eval_every": "4", "track_size": "30", "lr": "1e-3"},
    "policy": {"window_size": "3"},
    "experiment": {"seeds": "1 2"},
}


def tiny_values(**sections):
    values = {k: dict(v) for k, v in TINY.items()}
    for section, kv in sections.items():
        values.setdefault(section, {}).update({k: str(v) for k, v in kv.items()})
    return values


@pytest.fixture
def tiny_config():
    return build_config(tiny_values())


@pytest.fixture(scope="session")
def tiny_pretrained(tmp_path_factory):
    from slowfast.runner.experiment import pretrain
    return pretrain(build_config(tiny_values()), str(tmp_path_factory.mktemp("pre") / "tiny.ckpt"))


# ---- acceptance reporting ---------------------------------------------------------

class Criterion:
    """Context manager that times one acceptance criterion and records PASS/FAIL.

    The body fails the criterion by raising (usually ``assert``); exceeding
    ``budget`` seconds fails it too. ``detail`` ends up on the report line.
    """

    def __init__(self, results, number, title, budget):
        self.results, self.number, self.title, self.budget = results, number, title, budget
        self.detail = ""
        self.charged = 0.0  # seconds spent on shared work elsewhere that count against this budget

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = max(time.perf_counter() - self.start, self.charged)
        over = elapsed > self.budget
        ok = exc_type is None and not over
        why = self.detail
        if exc_type is not None:
            why = f"{why}; {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".lstrip("; ")
        elif over:
            why = f"{why}; over budget".lstrip("; ")
        line = (f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}  "
                f"[{elapsed:.1f}s / {self.budget:g}s]  {why}")
        self.results[self.number] = line
        print(line)
        if exc_type is None and over:
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s, budget {self.budget:g}s")
        return False


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def criterion(request):
    results = request.config.acceptance_results
    return lambda number, title, budget: Criterion(results, number, title, budget)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
