from pathlib import Path

import pytest

from case_io import Branch, Bus, Case, GenCost, Generator, load_case

DATA = Path(__file__).resolve().parent.parent / 'data'
CASE39 = DATA / 'pglib_opf_case39_epri.m'


def two_bus_case(x: float = 0.1, b_chg: float = 0.0, rate_a: float = 0.0) -> Case:
    """Lossless single line feeding a 50 MW load."""
    return Case(
        base_mva=100.0,
        buses=(Bus(1, 0.0, 0.0, 0.9, 1.1, is_ref=True), Bus(2, 50.0, 10.0, 0.9, 1.1)),
        branches=(Branch(1, 2, 0.0, x, b_chg=b_chg, rate_a=rate_a),),
        generators=(Generator(1, 0.0, 200.0, -100.0, 100.0),),
        costs=(GenCost(0.01, 20.0, 0.0),),
        name='two_bus',
    )


@pytest.fixture(scope='session')
def case2():
    return load_case(DATA / 'case2.m')


@pytest.fixture(scope='session')
def toy():
    return load_case(DATA / 'case3_toy.m')


@pytest.fixture(scope='session')
def case9():
    return load_case(DATA / 'case9.m')


@pytest.fixture(scope='session')
def case39():
    if not CASE39.exists():
        pytest.skip(f'{CASE39.name} not downloaded (run: python fetch_case.py case39_epri)')
    return load_case(CASE39)
