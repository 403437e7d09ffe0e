#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# Neural-evaluation surrogates on oracle embeddings:
#   similarity  cosine similarity of a synthesized utterance to its speaker's real centroid, task query left out
#   EER / DET   speaker verification against random real enrollment utterances
#   ROC AUC     real-vs-synthesized detection against same-speaker real enrollment utterances


import logging

import numpy as np
from scipy.stats import rankdata

from corpus import oracle_embed
from lib.errors import InputError, MetricError, PairingError

ORACLE_NOTE = 'embeddings by oracle-embedder on synthesized features (no audio, no verification model)'


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError('cosine similarity of a zero vector')
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def speaker_centroid(embeddings):
    embeddings = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not embeddings:
        raise InputError('centroid of an empty embedding set')
    return np.mean(np.stack(embeddings), axis=0)


def similarity_to_target(synth_embedding, target_centroid):
    return cosine_similarity(synth_embedding, target_centroid)


def aggregate_similarity(values):
    """(mean, standard deviation) over a task set."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise MetricError('no similarities to aggregate')
    return float(np.mean(values)), float(np.std(values))


def similarity_matrix(synth_reps, real_reps):
    """synth_reps, real_reps: speaker id -> representation. Entry (i, j) compares synthesized i to real j."""
    if sorted(synth_reps.keys()) != sorted(real_reps.keys()):
        raise InputError('synthesized and real representations cover different speakers')
    ids = sorted(real_reps.keys())
    mat = np.zeros((len(ids), len(ids)))
    for i, si in enumerate(ids):
        for j, sj in enumerate(ids):
            mat[i, j] = cosine_similarity(synth_reps[si], real_reps[sj])
    return ids, mat


def diagonal_rate(mat):
    # share of rows whose argmax sits on the diagonal
    if mat.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(mat, axis=1) == np.arange(mat.shape[0])))


class ScoreSet(object):
    """Labeled scores; label True is the positive class (same speaker / real)."""

    def __init__(self, scores, labels, context):
        if context not in ('verification', 'detection'):
            raise InputError('unknown score context {}'.format(context))
        self.scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(labels, dtype=bool).reshape(-1)
        if self.scores.size != self.labels.size:
            raise InputError('{} scores but {} labels'.format(self.scores.size, self.labels.size))
        self.context = context

    @property
    def positives(self):
        return self.scores[self.labels]

    @property
    def negatives(self):
        return self.scores[~self.labels]

    def check(self):
        if self.positives.size == 0 or self.negatives.size == 0:
            raise MetricError('{} scores need at least one positive and one negative ({} / {})'.format(
                self.context, self.positives.size, self.negatives.size))
        if not np.all(np.isfinite(self.scores)):
            raise MetricError('non-finite {} score'.format(self.context))
        return self


def _sweep(s):
    # thresholds: -inf, then every distinct score ascending
    s.check()
    pos = np.sort(s.positives)
    neg = np.sort(s.negatives)
    thresholds = np.concatenate(([-np.inf], np.unique(s.scores)))
    far = (neg.size - np.searchsorted(neg, thresholds, side='right')) / float(neg.size)
    frr = np.searchsorted(pos, thresholds, side='right') / float(pos.size)
    return thresholds, far, frr


def det_curve(s):
    """(FAR, FRR) per sweep threshold; accepted iff score > threshold."""
    _, far, frr = _sweep(s)
    return np.stack([far, frr], axis=1)


def compute_eer(s):
    thresholds, far, frr = _sweep(s)
    diff = far - frr
    # diff starts at 1 (everything accepted) and ends at -1 (everything rejected)
    for k in range(diff.size):
        if diff[k] == 0:
            return {'eer': float(far[k]), 'threshold': float(thresholds[k])}
        if diff[k] < 0:
            a = diff[k - 1]
            b = diff[k]
            w = a / (a - b)
            eer = far[k - 1] + w * (far[k] - far[k - 1])
            t_lo = thresholds[k - 1] if np.isfinite(thresholds[k - 1]) else thresholds[k]
            return {'eer': float(eer), 'threshold': float(t_lo + w * (thresholds[k] - t_lo))}
    raise MetricError('no FAR/FRR crossing found')


def roc_curve(s):
    """(false positive rate, true positive rate) per sweep threshold, positive = real."""
    _, far, frr = _sweep(s)
    return np.stack([far, 1.0 - frr], axis=1)


def roc_auc(s):
    # Mann-Whitney rank statistic, ties counted one half
    s.check()
    P = s.positives.size
    N = s.negatives.size
    ranks = rankdata(s.scores)
    rank_sum = float(np.sum(ranks[s.labels]))
    return (rank_sum - P * (P + 1) / 2.0) / (P * N)


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def verification_scores(synth_items, enrollment, pairing_seed, same_ratio=1.0):
    """synth_items: [(speaker_id, embedding)]; enrollment: speaker id -> [(utt_id, embedding)].

    Each item is paired with one random real utterance of speaker j. A share
    same_ratio / (1 + same_ratio) of the items, picked at random, get j == i; the rest get j uniform
    over the other speakers. With two or more items and two or more speakers both labels occur.
    """
    if same_ratio < 0:
        raise InputError('same/different ratio must be >= 0, got {}'.format(same_ratio))
    rng = np.random.default_rng(pairing_seed)
    speakers = sorted(enrollment.keys())
    n = len(synth_items)
    p_same = 1.0 if np.isinf(same_ratio) else same_ratio / (1.0 + same_ratio)
    n_same = int(round(n * p_same))
    if n >= 2 and len(speakers) > 1 and 0.0 < p_same < 1.0:
        n_same = min(max(n_same, 1), n - 1)
    same = set(int(k) for k in rng.permutation(n)[:n_same])

    scores, labels = [], []
    for k, (spk, emb) in enumerate(synth_items):
        if not enrollment.get(spk):
            raise PairingError('speaker {} has no real enrollment utterances'.format(spk))
        others = [j for j in speakers if j != spk]
        if k in same or not others:
            j = spk
        else:
            j = _pick(rng, others)
        if not enrollment.get(j):
            raise PairingError('speaker {} has no real enrollment utterances'.format(j))
        _, ref = _pick(rng, enrollment[j])
        scores.append(cosine_similarity(emb, ref))
        labels.append(j == spk)
    return ScoreSet(scores, labels, 'verification')


def detection_scores(synth_items, real_items, enrollment, pairing_seed):
    """synth_items: [(speaker_id, embedding)] labeled negative; real_items: [(speaker_id, utt_id, embedding)]
    labeled positive. Every item is scored against a random same-speaker real enrollment utterance,
    never against itself."""
    rng = np.random.default_rng(pairing_seed)
    scores, labels = [], []
    for spk, emb in synth_items:
        pool = enrollment.get(spk, [])
        if not pool:
            raise PairingError('speaker {} has no real enrollment utterances'.format(spk))
        _, ref = _pick(rng, pool)
        scores.append(cosine_similarity(emb, ref))
        labels.append(False)
    for spk, utt_id, emb in real_items:
        pool = [e for e in enrollment.get(spk, []) if e[0] != utt_id]
        if not pool:
            raise PairingError('speaker {} needs a second real utterance to enroll against'.format(spk))
        _, ref = _pick(rng, pool)
        scores.append(cosine_similarity(emb, ref))
        labels.append(True)
    return ScoreSet(scores, labels, 'detection')


class MetricReport(object):
    def __init__(self, marks, matrices, real, manifest_hash, meta=None):
        self.marks = marks              # mark -> scalars and curves
        self.matrices = matrices        # mark -> {'speaker_ids', 'values'}
        self.real = real                # real-utterance reference block
        self.manifest_hash = manifest_hash
        self.meta = dict(meta or {})

    def to_dict(self):
        return {'manifest_hash': self.manifest_hash,
                'marks': {str(m): v for m, v in sorted(self.marks.items())},
                'matrices': {str(m): v for m, v in sorted(self.matrices.items())},
                'real': self.real,
                'meta': self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls({int(m): v for m, v in d['marks'].items()}, {int(m): v for m, v in d['matrices'].items()},
                   d.get('real'), d['manifest_hash'], d.get('meta'))

    def trend(self, key='similarity_mean'):
        marks = sorted(self.marks.keys())
        return marks, [self.marks[m][key] for m in marks]


def held_out_centroid(enrollment, speaker_id, exclude):
    """Centroid of the speaker's enrollment utterances minus the excluded ids (the task's query)."""
    kept = [e for utt_id, e in enrollment.get(speaker_id, []) if utt_id not in exclude]
    if not kept:
        raise PairingError('speaker {} has no enrollment utterances outside the query'.format(speaker_id))
    return speaker_centroid(kept)


def _score_block(items, real_items, centroids, enrollment, pairing_seed, same_ratio, held_out):
    # items: [(speaker_id, embedding)] for one mark; held_out[k]: utterance ids item k may not be scored against
    sims = [similarity_to_target(emb, held_out_centroid(enrollment, spk, held_out[k]))
            for k, (spk, emb) in enumerate(items)]
    mean, std = aggregate_similarity(sims)
    ver = verification_scores(items, enrollment, pairing_seed, same_ratio)
    det = detection_scores(items, real_items, enrollment, pairing_seed)
    eer = compute_eer(ver)

    by_spk = {}
    for spk, emb in items:
        by_spk.setdefault(spk, []).append(emb)
    synth_reps = {spk: speaker_centroid(v) for spk, v in by_spk.items()}
    ids, mat = similarity_matrix(synth_reps, {spk: centroids[spk] for spk in synth_reps})
    block = {'similarity_mean': mean, 'similarity_std': std, 'eer': eer['eer'], 'eer_threshold': eer['threshold'],
             'roc_auc': roc_auc(det), 'n_items': len(items), 'diagonal_rate': diagonal_rate(mat),
             'det': det_curve(ver).tolist(), 'roc': roc_curve(det).tolist()}
    return block, {'speaker_ids': ids, 'values': mat.tolist()}


def build_report(results, test_corpus, pairing_seed=0, same_ratio=1.0, meta=None):
    """Aggregate per-task results into per-mark similarity / EER / AUC and similarity matrices."""
    if not results:
        raise MetricError('no task results to report')
    hashes = sorted(set(r.manifest_hash for r in results))
    if len(hashes) != 1:
        raise MetricError('task results come from different manifests: {}'.format(hashes))
    marks = sorted(set.intersection(*[set(r.outputs.keys()) for r in results]))
    if not marks:
        raise MetricError('task results share no step marks')

    cfg = test_corpus.config
    enrollment = {}
    for u in test_corpus.utterances:
        enrollment.setdefault(u.speaker_id, []).append((u.utt_id, oracle_embed(u, cfg)))
    centroids = {spk: speaker_centroid([e for _, e in v]) for spk, v in enrollment.items()}

    real_items = []
    real_held_out = []
    for r in results:
        for utt_id in r.query_ids:
            real_items.append((r.speaker_id, utt_id, oracle_embed(test_corpus.get(utt_id), cfg)))
            real_held_out.append(set(r.query_ids))

    per_mark = {}
    matrices = {}
    for m in marks:
        items = [(r.speaker_id, oracle_embed(u, cfg)) for r in results for u in r.outputs[m]]
        held_out = [set(r.query_ids) for r in results for _ in r.outputs[m]]
        per_mark[m], matrices[m] = _score_block(items, real_items, centroids, enrollment, pairing_seed, same_ratio,
                                                held_out)
        logging.info('mark {}: similarity {:.4f} +- {:.4f}, EER {:.4f}, AUC {:.4f}, diagonal {:.2f}'.format(
            m, per_mark[m]['similarity_mean'], per_mark[m]['similarity_std'], per_mark[m]['eer'],
            per_mark[m]['roc_auc'], per_mark[m]['diagonal_rate']))

    # the real query utterances scored as if synthesized
    real_block, real_matrix = _score_block([(spk, e) for spk, _, e in real_items], real_items, centroids,
                                           enrollment, pairing_seed, same_ratio, real_held_out)
    real_block['matrix'] = real_matrix

    meta = dict(meta or {})
    meta.setdefault('approach', results[0].approach)
    meta.setdefault('mask', results[0].mask)
    meta.setdefault('emb_mode', results[0].emb_mode)
    meta['n_tasks'] = len(results)
    meta['embedder'] = ORACLE_NOTE
    meta['support_loss'] = {str(m): float(np.mean([r.support_losses[m] for r in results])) for m in marks}
    return MetricReport(per_mark, matrices, real_block, hashes[0], meta)
