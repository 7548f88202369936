import pytest
from fastapi.testclient import TestClient

from emulator import EmulatorServer
from status_api import create_app, status_server


@pytest.fixture
def emulator(make_config, test_settings, boundary_factory) -> EmulatorServer:
    server = EmulatorServer(make_config(4), test_settings)
    server.controller.register(boundary_factory(4), [0.0] * 6, plan_index=0)
    return server


@pytest.fixture
def test_client(emulator) -> TestClient:
    return TestClient(create_app(emulator))


def test_health(test_client):
    response = test_client.get("/health")
    assert response.status_code == 200
    assert response.json() == {
        "status": "healthy",
        "real_rank": 0,
        "emulated_ranks": [1, 2, 3],
        "session_active": False,
        "sessions_served": 0,
        "live_operations": 1,
        "completed_operations": 0,
    }


def test_operations(test_client):
    response = test_client.get("/operations")
    assert response.status_code == 200
    data = response.json()
    assert len(data) == 1
    assert data[0]["op_id"] == 0
    assert data[0]["plan_index"] == 0
    assert (data[0]["to_real_total"], data[0]["from_real_total"]) == (6, 6)
    assert data[0]["sent"] == 0


def test_single_operation(test_client, emulator):
    emulator.controller.poll()
    response = test_client.get("/operations/0")
    assert response.status_code == 200
    assert response.json()["sent"] == 1


def test_unknown_operation(test_client):
    response = test_client.get("/operations/42")
    assert response.status_code == 404
    assert response.json()["detail"] == "Unknown operation 42"


def test_traces(test_client, emulator):
    emulator.controller.abort_all("session closed")
    data = test_client.get("/traces").json()
    assert len(data) == 1
    assert data[0]["failed"] is True
    assert data[0]["error"] == "session closed"
    assert test_client.get("/traces", params={"limit": 0}).json() == []
    assert test_client.get("/traces", params={"limit": -1}).status_code == 400
    assert test_client.get("/health").json()["live_operations"] == 0


def test_status_server_is_configured_quietly(emulator):
    server = status_server(emulator, "127.0.0.1", 8123)
    assert server.config.port == 8123
    assert server.config.lifespan == "off"
