import textwrap

import pytest


@pytest.fixture
def write_ini(tmp_path):
    """Write a scenario file under tmp_path and return its path."""
    def write(text, name='scenario.ini'):
        path = tmp_path / name
        path.write_text(textwrap.dedent(text), encoding='utf-8')
        return path
    return write


@pytest.fixture
def no_settings(tmp_path):
    return tmp_path / 'missing-settings.ini'


SMALL_RUN = """
    [scenario]
    name = small
    seed = 5
    include_unmodulated = True

    [grid]
    dt_ns = 0.002

    [timing]
    n_pulses = 200000
    gate_lead_ns = 2.0

    [detector]
    span_ns = 12

    [drive:mod720]
    shape = gaussian
    optical_fwhm_ns = 0.72
    delay_ns = 0.0, 0.8
    """


@pytest.fixture
def small_run(write_ini):
    return write_ini(SMALL_RUN, 'small.ini')
