#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from corpus import CorpusConfig, generate_corpus  # noqa: E402
from model import ModelConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: end-to-end runs that take more than a few seconds')
    config.addinivalue_line('markers', 'acceptance: the full three-seed comparison on the shipped desk configuration')


@pytest.fixture(autouse=True)
def _no_worker_env(monkeypatch):
    monkeypatch.delenv('META_TTS_WORKERS', raising=False)


@pytest.fixture
def tiny_corpus_config():
    return CorpusConfig(n_phonemes=8, n_mel=4, min_len=3, max_len=5, k_shot=2)


@pytest.fixture
def tiny_train(tiny_corpus_config):
    return generate_corpus(4, 6, 11, tiny_corpus_config)


@pytest.fixture
def tiny_test(tiny_corpus_config):
    return generate_corpus(2, 6, 12, tiny_corpus_config, split_tag='test', first_speaker_id=1000)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(hidden_dim=8, n_encoder_blocks=1, n_decoder_blocks=1, n_heads=2, n_phonemes=8, n_mel=4,
                       n_bins=4)
