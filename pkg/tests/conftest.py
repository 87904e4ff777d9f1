import numpy as np
import pytest

from homogenlab.coeff import CoefficientField
from homogenlab.coeff import RandomFieldModel
from homogenlab.geometry import build_box_mask

SHEAR = np.array([[0.3, 1.0], [-0.5, 0.2]])


@pytest.fixture
def unit_square():
    return build_box_mask(1 / 8, (0.0, 0.0), 0.5)


@pytest.fixture
def identity_field():
    return CoefficientField.uniform(np.eye(4), 0.0, 1.0)


@pytest.fixture
def two_phase_model():
    return RandomFieldModel('two-phase-checkerboard', contrast=4.0, big_lambda=2.0)


@pytest.fixture
def affine():
    def affine_data(points):
        return points @ SHEAR.T

    affine_data.matrix = SHEAR
    return affine_data
