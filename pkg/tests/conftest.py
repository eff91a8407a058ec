"""Shared fixtures: the three reference patient parameter sets.

Values are entered here by hand, independently of the package's built-in
defaults, so the tests pin them rather than echo them.
"""

import pytest

from doasim.patient_model import PatientParams


@pytest.fixture
def nominal() -> PatientParams:
    return PatientParams(
        v1=9.5855,
        k10=0.0028,
        k12=0.0042,
        k21=8.495e-4,
        k13=0.0017,
        k31=6.182e-5,
        ke0=0.039,
        td=12.9,
        bis0=100.0,
        gamma=2.0,
        ec50=3.3,
        weight=70.0,
    )


@pytest.fixture
def patient_1() -> PatientParams:
    return PatientParams(
        v1=10.450,
        k10=0.0029,
        k12=0.0044,
        k21=8.506e-4,
        k13=0.0018,
        k31=6.659e-5,
        ke0=0.0248,
        td=4.0,
        bis0=100.0,
        gamma=2.0,
        ec50=2.7,
        weight=70.0,
    )


@pytest.fixture
def patient_2() -> PatientParams:
    return PatientParams(
        v1=8.947,
        k10=0.0027,
        k12=0.0042,
        k21=8.485e-4,
        k13=0.0017,
        k31=5.810e-5,
        ke0=0.0831,
        td=29.0,
        bis0=100.0,
        gamma=2.3,
        ec50=4.0,
        weight=70.0,
    )
