import numpy as np
from fastapi.testclient import TestClient

from main import app

client = TestClient(app)


def test_check_success(load_problem):
    """Test the multiplier report of a constrained problem."""
    response = client.post(
        "/api/v1/problems/check",
        json={"problem": load_problem("bound_1d"), "controls": [[0.0]]},
    )

    assert response.status_code == 200
    data = response.json()
    assert data["constrained"]["lambda0"] == 1.0
    assert np.allclose(data["constrained"]["multipliers"], [2.0])
    assert len(data["costates"]) == 2


def test_check_control_outside_its_set(load_problem):
    """Test that a control outside its control set is rejected."""
    response = client.post(
        "/api/v1/problems/check",
        json={"problem": load_problem("attitude"), "controls": [[2.0, 0.0, 0.0]] * 10},
    )

    assert response.status_code == 422
