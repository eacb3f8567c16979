import pytest

from gavebid.dataset import build_corpus
from gavebid.score import ScoreConfig, Variant
from gavebid.sim import EnvConfig, collect_episodes

TINY_ENV = EnvConfig(num_steps=8, impressions_mean=30, num_agents=3, budget=30.0)


@pytest.fixture(scope="session")
def tiny_logs():
    return collect_episodes(TINY_ENV, 3, seed=7)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_logs):
    return build_corpus(tiny_logs, ScoreConfig(1.0, Variant.S2), M=3, env_config=TINY_ENV.to_dict(), env_seed=7)


_ACCEPTANCE: list[str] = []


def acceptance_line(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} :: {detail}"
    print(line)
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
