import os

import numpy as np
import pytest

from corpus import (Corpus, CorpusConfig, SpeakerParams, dump_embeddings, generate_corpus, load_corpus,
                    make_speaker, oracle_embed, phoneme_templates, render_utterance, save_corpus)
from lib.errors import ConfigError, CorpusParseError, DataError, InputError


def _cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_generation_is_deterministic(tiny_corpus_config):
    a = generate_corpus(3, 4, 5, tiny_corpus_config)
    b = generate_corpus(3, 4, 5, tiny_corpus_config)
    assert a == b
    c = generate_corpus(3, 4, 6, tiny_corpus_config)
    assert not a == c


def test_counts_ids_and_frame_budget(tiny_train):
    assert tiny_train.speaker_ids() == [0, 1, 2, 3]
    assert len(tiny_train.utterances) == 24
    assert tiny_train.utterances[0].utt_id == 's0000_u000'
    groups = tiny_train.by_speaker()
    assert all(len(v) == 6 for v in groups.values())
    for u in tiny_train.utterances:
        u.check()
        assert u.mel.shape == (int(np.sum(u.durations)), 4)
        assert 3 <= len(u.phonemes) <= 5


def test_test_split_uses_disjoint_ids(tiny_train, tiny_test):
    assert set(tiny_train.speaker_ids()).isdisjoint(tiny_test.speaker_ids())
    assert tiny_test.speaker_ids() == [1000, 1001]
    assert tiny_test.split_tag == 'test'


def test_unknown_utterance_lookup(tiny_train):
    with pytest.raises(DataError):
        tiny_train.get('s9999_u000')


def test_neutral_speaker_single_phoneme():
    cfg = CorpusConfig(n_phonemes=8, n_mel=4, noise_std=0.0)
    spk = SpeakerParams(0, duration_scale=1.0, pitch_offset=0.0, energy_scale=1.0, timbre=np.zeros(4))
    u = render_utterance(spk, [0], 0, cfg)
    assert u.durations.tolist() == [2]
    assert u.pitch.tolist() == [60.0]
    assert u.energy.tolist() == [1.0]
    expected = phoneme_templates(cfg)[0].copy()
    expected[0] += 0.6
    assert u.mel.shape == (2, 4)
    assert np.allclose(u.mel[0], expected, atol=1e-12)
    assert np.allclose(u.mel[1], expected, atol=1e-12)


def test_slow_speaker_stretches_durations():
    cfg = CorpusConfig(n_phonemes=8, n_mel=4, noise_std=0.0)
    spk = SpeakerParams(0, duration_scale=1.6, pitch_offset=0.0, energy_scale=1.0, timbre=np.zeros(4))
    # base duration of phoneme 2 is 4 frames; 4 * 1.6 = 6.4 -> 6
    assert render_utterance(spk, [2], 0, cfg).durations.tolist() == [6]


def test_oracle_recovers_latents_without_noise():
    cfg = CorpusConfig(n_phonemes=8, n_mel=4, min_len=4, max_len=8, noise_std=0.0)
    c = generate_corpus(5, 3, 21, cfg)
    for u in c.utterances:
        spk = c.speakers[u.speaker_id]
        e = oracle_embed(u, cfg)
        assert e.shape == (cfg.emb_dim,)
        assert abs(e[1] - spk.pitch_offset) < 1e-9
        assert abs(e[2] - spk.energy_scale) < 1e-9
        assert np.max(np.abs(e[3:] - spk.timbre)) < 1e-6
        # integer rounding of the frame counts
        assert abs(e[0] - spk.duration_scale) <= 0.26


def test_same_speaker_embeddings_are_closer(tiny_corpus_config):
    c = generate_corpus(6, 4, 31, tiny_corpus_config)
    emb = {u.utt_id: (u.speaker_id, oracle_embed(u, tiny_corpus_config)) for u in c.utterances}
    intra, inter = [], []
    items = list(emb.values())
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            s = _cosine(items[i][1], items[j][1])
            (intra if items[i][0] == items[j][0] else inter).append(s)
    assert np.mean(intra) > np.mean(inter)


def test_save_load_keeps_everything(tiny_train, tmp_path):
    path = str(tmp_path / 'train')
    save_corpus(tiny_train, path)
    assert sorted(os.listdir(path)) == ['meta.json', 'speakers.jsonl', 'utterances.jsonl']
    loaded = load_corpus(path)
    assert loaded == tiny_train
    assert loaded.has_latents


def test_truncated_record_is_rejected(tiny_train, tmp_path):
    path = str(tmp_path / 'train')
    save_corpus(tiny_train, path)
    utt_file = os.path.join(path, 'utterances.jsonl')
    with open(utt_file) as fp:
        text = fp.read()
    with open(utt_file, 'w') as fp:
        fp.write(text[:-10])
    with pytest.raises(CorpusParseError) as info:
        load_corpus(path)
    assert info.value.line_no == 24


def test_missing_records_are_rejected(tiny_train, tmp_path):
    path = str(tmp_path / 'train')
    save_corpus(tiny_train, path)
    utt_file = os.path.join(path, 'utterances.jsonl')
    with open(utt_file) as fp:
        lines = fp.readlines()
    with open(utt_file, 'w') as fp:
        fp.writelines(lines[:-1])
    with pytest.raises(CorpusParseError):
        load_corpus(path)


def test_corpus_without_latents_loads_as_non_synthetic(tiny_train, tmp_path):
    path = str(tmp_path / 'train')
    save_corpus(tiny_train, path)
    with open(os.path.join(path, 'speakers.jsonl'), 'w') as fp:
        for spk in tiny_train.speaker_ids():
            fp.write('{{"id": {}}}\n'.format(spk))
    loaded = load_corpus(path)
    assert not loaded.has_latents
    assert not loaded.config.synthetic
    with pytest.raises(DataError):
        oracle_embed(loaded.utterances[0], loaded.config)


def test_bad_phoneme_is_rejected(tiny_corpus_config):
    spk = make_speaker(0, tiny_corpus_config)
    with pytest.raises(InputError):
        render_utterance(spk, [0, 8], 0, tiny_corpus_config)
    with pytest.raises(InputError):
        render_utterance(spk, [], 0, tiny_corpus_config)


def test_rendering_needs_latents(tiny_corpus_config):
    with pytest.raises(DataError):
        render_utterance(SpeakerParams(7), [0, 1], 0, tiny_corpus_config)


def test_generation_arguments_are_checked(tiny_corpus_config):
    with pytest.raises(ConfigError):
        generate_corpus(0, 4, 1, tiny_corpus_config)
    with pytest.raises(ConfigError):
        generate_corpus(2, 1, 1, tiny_corpus_config)
    with pytest.raises(ConfigError):
        generate_corpus(2, 4, 1, CorpusConfig(min_len=5, max_len=3))


def test_embedding_dump(tiny_train, tmp_path):
    out = str(tmp_path / 'emb.tsv')
    dump_embeddings(tiny_train, out)
    with open(out) as fp:
        lines = fp.read().splitlines()
    assert len(lines) == len(tiny_train.utterances)
    fields = lines[0].split('\t')
    assert fields[0] == 's0000_u000'
    assert fields[1] == '0'
    assert len(fields) == 2 + tiny_train.config.emb_dim


def test_empty_corpus_equality_helpers():
    c = Corpus(speakers={}, utterances=[], split_tag='train', global_seed=0)
    assert c.speaker_ids() == []
    assert c.by_speaker() == {}
