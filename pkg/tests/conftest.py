import dataclasses

import pytest

from replaylab.data import ProtocolSpec, default_domains, generate_domain

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def small_protocol(n_domains=2, num_places=24, points=32):
    domains = [dataclasses.replace(d, num_places=num_places, points_per_submap=points,
                                   area_side=num_places * 20.0)
               for d in default_domains(n=n_domains)]
    return ProtocolSpec(domains=domains)


@pytest.fixture
def tiny_protocol():
    return small_protocol()


@pytest.fixture(scope="session")
def tiny_domains():
    proto = small_protocol()
    return proto, [generate_domain(s) for s in proto.domains]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
