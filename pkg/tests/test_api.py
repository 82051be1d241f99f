"""Tests for the FastAPI endpoints."""
import pytest
from fastapi.testclient import TestClient

import app.api as api
from app.api import app
from app.config import Config
from app.confusion import save_partition
from app.model import init_model, save_checkpoint
from app.schemas import GroupPartition

client = TestClient(app)


@pytest.fixture
def served_model(tmp_path, monkeypatch):
    """Checkpoint and partition files wired into the configuration."""
    partition = GroupPartition.from_groups([[0, 1]], 3)
    model_path = save_checkpoint(init_model(2, 4, 3, partition, 5, ["cat", "dog", "fox"]), str(tmp_path / "m.ckpt"))
    partition_path = save_partition(partition, str(tmp_path / "groups.txt"))
    monkeypatch.setattr(Config, "MODEL_PATH", model_path)
    monkeypatch.setattr(Config, "PARTITION_PATH", partition_path)
    monkeypatch.setattr(api, "_loaded", None)
    return model_path


def test_root_endpoint():
    """Test root endpoint returns status."""
    response = client.get("/")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_health_endpoint():
    """Test health check endpoint."""
    response = client.get("/health")
    assert response.status_code == 200
    data = response.json()
    assert data["status"] == "healthy"
    assert data["config"]["fusion_rule"] in ("sum", "product")


def test_predict_without_model(monkeypatch):
    """No configured checkpoint means the service is unavailable."""
    monkeypatch.setattr(Config, "MODEL_PATH", "")
    response = client.post("/predict", json={"features": [[0.0, 0.0]]})
    assert response.status_code == 503


def test_predict_with_model(served_model):
    """Fused distributions and classes for every row."""
    response = client.post("/predict", json={"features": [[0.1, 0.2], [1.0, -1.0]], "rule": "sum"})
    assert response.status_code == 200
    data = response.json()
    assert data["rule"] == "sum"
    assert len(data["classes"]) == 2
    assert data["class_names"] == ["cat", "dog", "fox"]
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in data["probabilities"])
    assert client.get("/health").json()["config"]["model_loaded"]


def test_predict_bad_features(served_model):
    """Wrong widths and ragged rows are bad requests."""
    assert client.post("/predict", json={"features": [[0.1, 0.2, 0.3]]}).status_code == 400
    assert client.post("/predict", json={"features": [[0.1, 0.2], [0.3]]}).status_code == 400


def test_predict_rejects_unknown_rule(served_model):
    """The rule must be sum or product."""
    assert client.post("/predict", json={"features": [[0.1, 0.2]], "rule": "max"}).status_code == 422


def test_gradcheck_endpoint():
    """A short gradient check passes."""
    response = client.post("/gradcheck", json={"trials": 20, "k_min": 2, "k_max": 6, "seed": 1})
    assert response.status_code == 200
    data = response.json()
    assert data["passed"]
    assert data["trials"] == 20


def test_gradcheck_validation():
    """k_max below k_min is rejected."""
    assert client.post("/gradcheck", json={"k_min": 6, "k_max": 3}).status_code == 422
