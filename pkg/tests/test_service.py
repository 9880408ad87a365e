import warnings

import pytest

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from genlab.harness import COMMANDS
from genlab.service import create_app


@pytest.fixture
def client(tmp_path):
    with TestClient(create_app(tmp_path)) as c:
        yield c


def test_health_and_commands(client):
    assert client.get("/health").json() == {"status": "ok", "runs": 0}
    cmds = client.get("/commands").json()
    assert [c["command"] for c in cmds] == list(COMMANDS)
    assert all(c["replicates"] >= 1 for c in cmds)


def test_submit_and_fetch(client, tmp_path):
    body = {"command": "cox", "seed": 3, "replicates": 200}
    rec = client.post("/runs", json=body).json()
    assert rec["config"]["options"]["h"] == 1.0 and rec["passed"] in (True, False)
    assert client.get("/runs").json() == [rec["hash"]]
    assert client.get(f"/runs/{rec['hash'][:8]}").json()["hash"] == rec["hash"]
    assert (tmp_path / "runs" / f"cox-{rec['hash'][:16]}.json").exists()
    # identical config, identical record hash
    assert client.post("/runs", json=body).json()["hash"] == rec["hash"]
    assert client.get("/health").json()["runs"] == 1


def test_errors(client):
    assert client.post("/runs", json={"command": "cox", "replicates": 0}).status_code == 422
    assert client.post("/runs", json={"command": "cox", "options": {"bogus": 1}}).status_code == 422
    assert client.post("/runs", json={"command": "simulate", "options": {"model": "x"}}).status_code == 422
    assert client.get("/runs/ffff").status_code == 404
