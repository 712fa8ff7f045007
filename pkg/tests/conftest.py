"""Shared fixtures for the test suite; builders live in ``_helpers``."""

from __future__ import annotations

import pytest

from longppl.tokenizers import ByteTokenizer


@pytest.fixture
def byte_tokenizer() -> ByteTokenizer:
    return ByteTokenizer()
