import pytest


@pytest.fixture(autouse=True)
def _isolate_env_seed(monkeypatch):
    # keep an ambient ZEPO_SEED from leaking into config resolution
    monkeypatch.delenv("ZEPO_SEED", raising=False)
