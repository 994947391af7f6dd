import numpy as np
import pytest

from transflower import geodata

FEATURE_ZEROS = ",".join(["0"] * 19)


def region_rows(rows):
    """regions.csv text for (id, x, y, population) rows with zero POI counts."""
    lines = [",".join(geodata.REGION_HEADER)]
    lines += [f"{rid},{x},{y},{pop},{FEATURE_ZEROS}" for rid, x, y, pop in rows]
    return "\n".join(lines) + "\n"


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


@pytest.fixture(scope="session")
def city():
    return geodata.synth_city(geodata.SynthConfig(n_regions=49, mean_outflow=200, epsilon=0.5), 3)


@pytest.fixture(scope="session")
def city_split(city):
    return geodata.split_by_origin(city, (0.7, 0.1, 0.2), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
