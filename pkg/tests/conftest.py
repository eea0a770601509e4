import hashlib
import json
from pathlib import Path

import pytest

import ems_adversary
from ems_adversary import agents as ag
from ems_adversary.envsim import synthesize_trips

FLEET_SEED = 0
FLEET_SIZE = 52
TARGET_SEED = 0
SURROGATE_SEED = 1
IQN_SEED = 2
SRC = Path(ems_adversary.__file__).parent


def _source_digest() -> str:
    h = hashlib.sha256()
    for name in ("numerics.py", "envsim.py", "agents.py"):
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by the test")
    config._criteria = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    results = item.config._criteria.setdefault(number, {"title": title, "ok": True, "ran": False, "notes": []})
    if call.excinfo is not None:
        results["ok"] = False
        results["notes"].append(f"{item.name}: {call.excinfo.typename}")
    if call.when == "call":
        results["ran"] = True
        results["notes"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(crit):
        r = crit[number]
        status = "PASS" if r["ok"] and r["ran"] else "FAIL"
        terminalreporter.line(f"criterion {number} [{status}] {r['title']}")
        for note in r["notes"]:
            terminalreporter.line(f"    {note}")


@pytest.fixture(scope="session")
def fleet():
    return synthesize_trips(FLEET_SEED, FLEET_SIZE)


def _cached_agent(cache_dir: Path, agent, trips):
    key = json.dumps([agent.kind, ag._params_to_json(agent), FLEET_SEED, FLEET_SIZE, _source_digest()],
                     sort_keys=True)
    path = cache_dir / f"{agent.kind}_{hashlib.sha256(key.encode()).hexdigest()[:20]}.json"
    if path.exists():
        return ag.load_agent(path, expected_kind=agent.kind), path
    agent.fit(trips)
    ag.save_agent(agent, path)
    return agent, path


@pytest.fixture(scope="session")
def agent_cache(request):
    return Path(request.config.cache.mkdir("ems_adversary_agents"))


@pytest.fixture(scope="session")
def target_bundle(agent_cache, fleet):
    """Trained DQN target (fixed seed) and its bundle path."""
    return _cached_agent(agent_cache, ag.DqnAgent(random_state=TARGET_SEED), fleet)


@pytest.fixture(scope="session")
def target(target_bundle):
    return target_bundle[0]


@pytest.fixture(scope="session")
def surrogate_dqn(agent_cache, fleet):
    return _cached_agent(agent_cache, ag.DqnAgent(random_state=SURROGATE_SEED), fleet)[0]


@pytest.fixture(scope="session")
def surrogate_iqn(agent_cache, fleet):
    return _cached_agent(agent_cache, ag.IqnAgent(random_state=IQN_SEED), fleet)[0]
