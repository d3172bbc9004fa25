import sys
import pathlib
from dataclasses import replace

import pytest

# Ensure project root on sys.path
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1]))

from app.services.atom_cavity_model import POL_SIGMA_PLUS, reference_parameters  # noqa: E402

DEFAULT_CFG = pathlib.Path(__file__).resolve().parents[1] / "default.cfg"


@pytest.fixture
def reference():
    return reference_parameters()


@pytest.fixture
def single_mode(reference):
    """Reference parameters with one sigma+ cavity mode; keeps the Liouvillian small."""
    return replace(reference, cavity_modes=1, cavity_polarizations=(POL_SIGMA_PLUS,))


@pytest.fixture
def default_cfg_path():
    return DEFAULT_CFG
