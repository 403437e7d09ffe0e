import numpy as np
import pytest

from corpus import generate_corpus
from episodes import (TaskEpisode, build_eval_tasks, check_samplable, load_manifest, load_or_build_eval_tasks,
                      manifest_hash, sample_episode, save_manifest)
from lib.errors import ConfigError, CorpusParseError, SamplingError


def test_episode_sets_are_disjoint_and_single_speaker(tiny_train):
    rng = np.random.default_rng(0)
    for _ in range(50):
        ep = sample_episode(tiny_train, 2, 3, rng)
        assert ep.K == 2 and ep.Q == 3
        assert set(ep.support).isdisjoint(ep.query)
        ep.check(tiny_train)
        support, query = ep.resolve(tiny_train)
        assert {u.speaker_id for u in support + query} == {ep.speaker_id}


def test_episode_sampling_is_seeded(tiny_train):
    a = [sample_episode(tiny_train, 2, 2, np.random.default_rng(5)).to_record() for _ in range(3)]
    b = [sample_episode(tiny_train, 2, 2, np.random.default_rng(5)).to_record() for _ in range(3)]
    assert a == b


def test_episode_speakers_are_drawn_uniformly(tiny_train):
    rng = np.random.default_rng(7)
    n = 10000
    counts = {spk: 0 for spk in tiny_train.speaker_ids()}
    for _ in range(n):
        counts[sample_episode(tiny_train, 2, 2, rng).speaker_id] += 1
    p = 1.0 / len(counts)
    sigma = np.sqrt(n * p * (1.0 - p))
    for spk, count in counts.items():
        assert abs(count - n * p) <= 3 * sigma, (spk, count)


def test_too_few_utterances_names_the_speaker(tiny_corpus_config):
    c = generate_corpus(2, 3, 7, tiny_corpus_config, first_speaker_id=40)
    with pytest.raises(SamplingError) as info:
        sample_episode(c, 2, 2, np.random.default_rng(0))
    assert 'speaker 4' in str(info.value)
    with pytest.raises(SamplingError) as info:
        check_samplable(c, 2, 2)
    assert 'speaker 40' in str(info.value)
    with pytest.raises(ConfigError):
        sample_episode(c, 0, 1, np.random.default_rng(0))


def test_overlapping_episode_is_rejected():
    with pytest.raises(SamplingError):
        TaskEpisode(0, ['a', 'b'], ['b']).check()
    with pytest.raises(SamplingError):
        TaskEpisode(0, ['a', 'a'], ['b']).check()


def test_eval_tasks(tiny_test):
    tasks = build_eval_tasks(tiny_test, 3, 2, seed=0)
    assert len(tasks) == 6
    assert [t.task_id for t in tasks[:3]] == ['spk1000_t00', 'spk1000_t01', 'spk1000_t02']
    for t in tasks:
        assert t.K == 2 and t.Q == 1
        t.check(tiny_test)
    assert [t.to_record() for t in build_eval_tasks(tiny_test, 3, 2, seed=0)] == [t.to_record() for t in tasks]
    with pytest.raises(ConfigError):
        build_eval_tasks(tiny_test, 0, 2, seed=0)
    with pytest.raises(SamplingError):
        build_eval_tasks(tiny_test, 1, 6, seed=0)


def test_manifest_is_frozen_on_first_use(tiny_test, tmp_path):
    path = str(tmp_path / 'manifests' / 'eval_tasks.jsonl')
    first = load_or_build_eval_tasks(path, tiny_test, 2, 2, seed=0)
    with open(path, 'rb') as fp:
        written = fp.read()
    again = load_or_build_eval_tasks(path, tiny_test, 2, 2, seed=0)
    assert manifest_hash(first) == manifest_hash(again)
    assert load_manifest(path) == first
    with open(path, 'rb') as fp:
        assert fp.read() == written


@pytest.mark.parametrize('tasks_per_speaker, K, seed', [(3, 2, 0), (2, 3, 0), (2, 2, 9)])
def test_reused_manifest_must_match_build_params(tiny_test, tmp_path, tasks_per_speaker, K, seed):
    path = str(tmp_path / 'eval_tasks.jsonl')
    load_or_build_eval_tasks(path, tiny_test, 2, 2, seed=0)
    with pytest.raises(ConfigError):
        load_or_build_eval_tasks(path, tiny_test, tasks_per_speaker, K, seed)


def test_reused_manifest_must_cover_the_test_speakers(tiny_test, tiny_corpus_config, tmp_path):
    path = str(tmp_path / 'eval_tasks.jsonl')
    load_or_build_eval_tasks(path, tiny_test, 2, 2, seed=0)
    # same generator and ids, one speaker more
    wider = generate_corpus(3, 6, 12, tiny_corpus_config, split_tag='test', first_speaker_id=1000)
    with pytest.raises(ConfigError):
        load_or_build_eval_tasks(path, wider, 2, 2, seed=0)


def test_manifest_hash_tracks_content(tiny_test, tmp_path):
    tasks = build_eval_tasks(tiny_test, 2, 2, seed=0)
    other = build_eval_tasks(tiny_test, 2, 2, seed=1)
    assert manifest_hash(tasks) != manifest_hash(other)
    path = str(tmp_path / 'tasks.jsonl')
    assert save_manifest(tasks, path) == manifest_hash(tasks)


def test_corrupt_manifest_line(tiny_test, tmp_path):
    path = str(tmp_path / 'tasks.jsonl')
    save_manifest(build_eval_tasks(tiny_test, 2, 2, seed=0), path)
    with open(path, 'a') as fp:
        fp.write('{"speaker_id": 1000, "support": ["x"]\n')
    with pytest.raises(CorpusParseError) as info:
        load_manifest(path)
    assert info.value.line_no == 5
