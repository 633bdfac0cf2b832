import pytest
from fastapi.testclient import TestClient

import app as service
from cli import main
from model import count_params


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, write_tiny_run):
    run_dir = tmp_path_factory.mktemp("served")
    args = write_tiny_run(run_dir)
    assert main(["make-synthetic", *args]) == 0
    assert main(["train", *args]) == 0
    return run_dir


@pytest.fixture
def client(trained_run, monkeypatch):
    monkeypatch.setenv("SERVE_RUN_DIR", str(trained_run))
    service._loaded_runs.clear()
    return TestClient(service.app)


def test_health():
    response = TestClient(service.app).get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "ok"


def test_params_report(client):
    body = client.get("/params").json()
    assert body["config"]["num_classes"] == 3
    assert body["params"] == count_params(service.load_run()[0])
    assert body["flops"] > 2 * body["macs"]


def test_predict_returns_rendered_map(client, trained_run):
    payload = (trained_run / "cube.hsi").read_bytes()
    response = client.post("/predict", files={"file": ("cube.hsi", payload, "application/octet-stream")})
    assert response.status_code == 200
    assert response.headers["content-type"] == "image/x-portable-pixmap"
    assert response.headers["x-pixels"] == "256"
    assert float(response.headers["x-forward-seconds"]) >= 0.0
    header = b"P6\n16 16\n255\n"
    assert response.content.startswith(header)
    assert len(response.content) == len(header) + 16 * 16 * 3


def test_predict_rejects_corrupt_upload(client):
    response = client.post("/predict", files={"file": ("bad.hsi", b"not a cube", "application/octet-stream")})
    assert response.status_code == 400
    assert response.json()["detail"].startswith("FormatError")


def test_missing_run_dir(monkeypatch):
    monkeypatch.delenv("SERVE_RUN_DIR", raising=False)
    service._loaded_runs.clear()
    response = TestClient(service.app).get("/params")
    assert response.status_code == 400
    assert "ConfigurationError" in response.json()["detail"]
