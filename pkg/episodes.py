#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# K-shot meta-tasks: one speaker, K support utterances, Q disjoint query utterances


import hashlib
import json
import logging
import os

import numpy as np

from corpus import derive_seed
from lib.errors import ConfigError, CorpusParseError, SamplingError
from lib.file_util import atomic_write_bytes, canonical_json


class TaskEpisode(object):
    def __init__(self, speaker_id, support, query, task_id=None, seed=None):
        self.speaker_id = int(speaker_id)
        self.support = list(support)
        self.query = list(query)
        self.task_id = task_id
        # seed provenance, e.g. {'seed': 0, 'speaker_id': 1000, 'index': 3}
        self.seed = seed

    @property
    def K(self):
        return len(self.support)

    @property
    def Q(self):
        return len(self.query)

    def check(self, corpus=None):
        if set(self.support) & set(self.query):
            raise SamplingError('episode {}: support and query overlap'.format(self.task_id))
        if len(set(self.support)) != self.K or len(set(self.query)) != self.Q:
            raise SamplingError('episode {}: repeated utterance within a set'.format(self.task_id))
        if corpus is not None:
            for utt_id in self.support + self.query:
                if corpus.get(utt_id).speaker_id != self.speaker_id:
                    raise SamplingError('episode {}: {} is not spoken by speaker {}'.format(
                        self.task_id, utt_id, self.speaker_id))
        return self

    def resolve(self, corpus):
        """(support utterances, query utterances)"""
        return [corpus.get(i) for i in self.support], [corpus.get(i) for i in self.query]

    def to_record(self):
        return {'task_id': self.task_id, 'speaker_id': self.speaker_id, 'support': self.support,
                'query': self.query, 'K': self.K, 'Q': self.Q, 'seed': self.seed}

    @classmethod
    def from_record(cls, rec):
        ep = cls(rec['speaker_id'], rec['support'], rec['query'], task_id=rec.get('task_id'), seed=rec.get('seed'))
        if ep.K != rec.get('K', ep.K) or ep.Q != rec.get('Q', ep.Q):
            raise SamplingError('episode {}: K/Q fields disagree with its utterance lists'.format(ep.task_id))
        return ep

    def __eq__(self, other):
        if not isinstance(other, TaskEpisode):
            return NotImplemented
        return self.to_record() == other.to_record()


def sample_episode(c, K, Q, rng):
    """Uniform speaker, then K+Q of its utterances without replacement; the first K form the support set."""
    if K < 1 or Q < 1:
        raise ConfigError('K and Q must be >= 1, got K={}, Q={}'.format(K, Q))
    speakers = c.speaker_ids()
    spk = speakers[int(rng.integers(len(speakers)))]
    utt_ids = c.by_speaker()[spk]
    if len(utt_ids) < K + Q:
        raise SamplingError('speaker {} has {} utterances, episode needs K+Q={}'.format(spk, len(utt_ids), K + Q))
    chosen = rng.choice(len(utt_ids), size=K + Q, replace=False)
    picked = [utt_ids[i] for i in chosen]
    return TaskEpisode(spk, picked[:K], picked[K:]).check()


def check_samplable(c, K, Q):
    for spk, utt_ids in sorted(c.by_speaker().items()):
        if len(utt_ids) < K + Q:
            raise SamplingError('speaker {} has {} utterances, episodes need K+Q={}'.format(spk, len(utt_ids), K + Q))


def build_eval_tasks(c, tasks_per_speaker, K, seed):
    if tasks_per_speaker < 1:
        raise ConfigError('tasks_per_speaker must be >= 1, got {}'.format(tasks_per_speaker))
    check_samplable(c, K, 1)

    tasks = []
    groups = c.by_speaker()
    for spk in c.speaker_ids():
        utt_ids = groups[spk]
        for t in range(tasks_per_speaker):
            rng = np.random.default_rng(derive_seed(seed, spk, t))
            chosen = rng.choice(len(utt_ids), size=K + 1, replace=False)
            picked = [utt_ids[i] for i in chosen]
            ep = TaskEpisode(spk, picked[:K], picked[K:], task_id='spk{}_t{:02d}'.format(spk, t),
                             seed={'seed': int(seed), 'speaker_id': int(spk), 'index': t})
            tasks.append(ep.check())
    logging.info('built {} evaluation tasks ({} speakers x {} tasks, K={})'.format(
        len(tasks), len(groups), tasks_per_speaker, K))
    return tasks


def manifest_bytes(tasks):
    return ''.join(canonical_json(ep.to_record()) + '\n' for ep in tasks).encode('utf-8')


def manifest_hash(tasks):
    return hashlib.sha256(manifest_bytes(tasks)).hexdigest()


def save_manifest(tasks, path):
    atomic_write_bytes(path, manifest_bytes(tasks))
    return manifest_hash(tasks)


def load_manifest(path):
    tasks = []
    with open(path) as fp:
        for line_no, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tasks.append(TaskEpisode.from_record(rec).check())
            except (ValueError, KeyError, TypeError, SamplingError) as e:
                raise CorpusParseError(path, line_no, 'bad task record ({})'.format(e))
    return tasks


def check_build_params(tasks, c, tasks_per_speaker, K, seed, path):
    """A reused manifest must match the requested speakers, tasks per speaker, K and seed."""
    counts = {}
    for ep in tasks:
        counts[ep.speaker_id] = counts.get(ep.speaker_id, 0) + 1
        if ep.K != K:
            raise ConfigError('manifest {} was built with K={}, requested K={}'.format(path, ep.K, K))
        if not ep.seed or ep.seed.get('seed') != seed:
            raise ConfigError('manifest {} was built with seed {}, requested seed {}'.format(
                path, (ep.seed or {}).get('seed'), seed))
    if sorted(counts) != c.speaker_ids():
        raise ConfigError('manifest {} covers speakers {}, test corpus has {}'.format(
            path, sorted(counts), c.speaker_ids()))
    if set(counts.values()) != {tasks_per_speaker}:
        raise ConfigError('manifest {} has {} tasks per speaker, requested {}'.format(
            path, sorted(set(counts.values())), tasks_per_speaker))


def load_or_build_eval_tasks(path, c, tasks_per_speaker, K, seed):
    # frozen on first use so every model is evaluated on the same tasks
    if os.path.exists(path):
        tasks = load_manifest(path)
        for ep in tasks:
            ep.check(c)
        check_build_params(tasks, c, tasks_per_speaker, K, seed, path)
        logging.info('reusing task manifest {} ({} tasks)'.format(path, len(tasks)))
        return tasks
    tasks = build_eval_tasks(c, tasks_per_speaker, K, seed)
    save_manifest(tasks, path)
    return tasks
