"""
Common pytest fixtures for local-attention-lab tests.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SCHEMA_PATH = PROJECT_ROOT / "schemas" / "run_config.schema.json"
SAMPLE_CONFIG_DIR = PROJECT_ROOT / "samples" / "configs"

SAMPLE_CONFIGS = tuple(sorted(SAMPLE_CONFIG_DIR.glob("*.conf")))


@pytest.fixture(scope="session")
def schema_path() -> Path:
    return SCHEMA_PATH


@pytest.fixture(scope="session")
def sample_config_dir() -> Path:
    return SAMPLE_CONFIG_DIR


@pytest.fixture(params=SAMPLE_CONFIGS, ids=lambda path: path.stem)
def sample_config(request: pytest.FixtureRequest) -> Iterator[Path]:
    yield request.param


@pytest.fixture
def rng() -> np.random.Generator:
    """テストごとに同じ値を返すGenerator。"""
    return np.random.default_rng(20240601)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch: pytest.MonkeyPatch) -> None:
    """開発者の .env / 環境変数がテスト結果に影響しないようにする。"""
    for name in ("LATTICE_SEED", "LATTICE_DTYPE", "LATTICE_OUT_DIR", "LATTICE_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr("src.utils.config.load_dotenv", lambda: None)
