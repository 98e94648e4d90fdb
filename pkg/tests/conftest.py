from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from core.ingest import ConfirmedPresence, PreparedData, site_table_from_grid
from core.log import setup_logging
from core.model import ModelOptions, OccupancyModel
from core.records import GridSpec, StudyWindow

setup_logging("WARNING")

SIGHTINGS_CSV = """observer,species,date,x,y,validated,countable
alice,A,2020-06-01,500,500,0,1
alice,B,2020-06-01,520,480,0,1
alice,C,2020-06-01,560,410,0,1
bob,B,2020-06-02,1500,500,0,1
carol,A,2021-07-14,2500,500,1,1
"""

SMALL_OPTIONS = ModelOptions(spline_n=4, trend_spline_n=4)


def make_sites():
    """一行三个格子，一个协变量"""
    sites = site_table_from_grid(GridSpec(ncols=3, nrows=1))
    return replace(sites, X=np.array([[0.2], [0.5], [0.9]]), covariate_names=["cov_1"])


def make_prepared(rows: list[tuple], a: np.ndarray, years=(2020, 2021), sites=None) -> PreparedData:
    """rows: (site, year, week, observer, ll_class, y)"""
    sites = sites if sites is not None else make_sites()
    visits = pd.DataFrame(rows, columns=["site", "year", "week", "observer", "ll_class", "y"])
    visits.insert(1, "site_id", sites.cell_id[visits["site"].to_numpy(int)] if len(visits) else [])
    presence = ConfirmedPresence(a=np.asarray(a, dtype=np.int8), years=list(years))
    return PreparedData(visits, presence, sites, "A")


TINY_ROWS = [
    (0, 2020, 10, "obsA", "L1", 1),
    (0, 2020, 20, "obsB", "L4plus", 0),
    (1, 2021, 30, "obsA", "L2_3", 0),
    (2, 2020, 40, "obsB", "L4plus", 0),
    (2, 2020, 41, "obsC", "L2_3", 0),
]


@pytest.fixture
def grid():
    return GridSpec(origin_x=0.0, origin_y=0.0, cell_size=1000.0, ncols=10, nrows=10)


@pytest.fixture
def window():
    return StudyWindow()


@pytest.fixture
def tiny_prepared():
    a = np.zeros((3, 2), dtype=np.int8)
    a[0, 0] = 1
    return make_prepared(TINY_ROWS, a)


@pytest.fixture
def tiny_model(tiny_prepared):
    return OccupancyModel(tiny_prepared, SMALL_OPTIONS)
