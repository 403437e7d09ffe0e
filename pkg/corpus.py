#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# Synthetic multi-speaker corpus with known latent speaker parameters.
#
# Every speaker is a handful of latent numbers (speaking rate, pitch offset, loudness, timbre gains); every
# utterance is rendered from them by a fixed recipe, so an analytic "oracle" embedding can invert the recipe
# and stand in for a pre-trained d-vector extractor.
#
# On disk a corpus is a directory:
#   speakers.jsonl     one speaker per line
#   utterances.jsonl   one utterance per line, mel stored flat (row-major) plus its shape
#   meta.json          global seed, split tag, config echo, record counts, format_version


import functools
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from lib.errors import ConfigError, CorpusParseError, DataError, InputError
from lib.file_util import atomic_write_json, ensure_dir

FORMAT_VERSION = 1

# recipe constants
PITCH_BASE = 60.0
PITCH_STEP = 2.0
ENERGY_STEP = 0.1
PITCH_TO_MEL = 0.01

# sampling ranges of the latent speaker parameters
DURATION_SCALE_RANGE = (0.6, 1.6)   # log-uniform
PITCH_OFFSET_RANGE = (-4.0, 4.0)
ENERGY_SCALE_RANGE = (0.5, 2.0)
TIMBRE_RANGE = (-0.5, 0.5)


@dataclass
class CorpusConfig:
    n_phonemes: int = 16
    n_mel: int = 8
    min_len: int = 4
    max_len: int = 12
    noise_std: float = 0.01
    template_seed: int = 1234
    k_shot: int = 5
    synthetic: bool = True

    def validate(self):
        if self.n_mel < 2:
            raise ConfigError('n_mel must be >= 2, got {}'.format(self.n_mel))
        if self.n_phonemes < 1:
            raise ConfigError('n_phonemes must be >= 1, got {}'.format(self.n_phonemes))
        if not (1 <= self.min_len <= self.max_len):
            raise ConfigError('need 1 <= min_len <= max_len, got {}, {}'.format(self.min_len, self.max_len))
        if self.noise_std < 0:
            raise ConfigError('noise_std must be >= 0, got {}'.format(self.noise_std))
        if self.k_shot < 1:
            raise ConfigError('k_shot must be >= 1, got {}'.format(self.k_shot))
        return self

    @property
    def emb_dim(self):
        return 3 + self.n_mel

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            logging.warning('corpus config: ignoring unknown fields {}'.format(unknown))
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(eq=False)
class SpeakerParams:
    speaker_id: int
    duration_scale: float = None
    pitch_offset: float = None
    energy_scale: float = None
    timbre: np.ndarray = None

    @property
    def has_latents(self):
        return self.timbre is not None

    def __eq__(self, other):
        if not isinstance(other, SpeakerParams):
            return NotImplemented
        if self.has_latents != other.has_latents:
            return False
        if not self.has_latents:
            return self.speaker_id == other.speaker_id
        return (self.speaker_id == other.speaker_id and self.duration_scale == other.duration_scale
                and self.pitch_offset == other.pitch_offset and self.energy_scale == other.energy_scale
                and np.array_equal(self.timbre, other.timbre))

    def latent_vector(self):
        # same layout as the oracle embedding
        return np.concatenate(([self.duration_scale, self.pitch_offset, self.energy_scale], self.timbre))


@dataclass(eq=False)
class Utterance:
    utt_id: str
    speaker_id: int
    phonemes: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    mel: np.ndarray

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.mel = np.asarray(self.mel, dtype=np.float64)

    def check(self):
        n = self.phonemes.size
        if n == 0:
            raise InputError('utterance {} has no phonemes'.format(self.utt_id))
        if not (self.durations.size == self.pitch.size == self.energy.size == n):
            raise InputError('utterance {}: durations/pitch/energy must have one value per phoneme'.format(self.utt_id))
        if np.any(self.durations < 1):
            raise InputError('utterance {}: durations must be >= 1'.format(self.utt_id))
        if self.mel.ndim != 2 or self.mel.shape[0] != int(np.sum(self.durations)):
            raise InputError('utterance {}: mel rows {} != sum(durations) {}'.format(
                self.utt_id, self.mel.shape[0] if self.mel.ndim == 2 else None, int(np.sum(self.durations))))
        return self

    @property
    def n_frames(self):
        return self.mel.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.utt_id == other.utt_id and self.speaker_id == other.speaker_id
                and np.array_equal(self.phonemes, other.phonemes) and np.array_equal(self.durations, other.durations)
                and np.array_equal(self.pitch, other.pitch) and np.array_equal(self.energy, other.energy)
                and np.array_equal(self.mel, other.mel))


@dataclass(eq=False)
class Corpus:
    speakers: dict
    utterances: list
    split_tag: str
    global_seed: int
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def __post_init__(self):
        self._by_id = {u.utt_id: u for u in self.utterances}

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.split_tag == other.split_tag and self.global_seed == other.global_seed
                and self.config == other.config
                and sorted(self.speakers) == sorted(other.speakers)
                and all(self.speakers[k] == other.speakers[k] for k in self.speakers)
                and len(self.utterances) == len(other.utterances)
                and all(a == b for a, b in zip(self.utterances, other.utterances)))

    def speaker_ids(self):
        return sorted(self.speakers.keys())

    def utterances_of(self, speaker_id):
        return [u for u in self.utterances if u.speaker_id == speaker_id]

    def by_speaker(self):
        # speaker id -> utterance ids, corpus order
        groups = {spk: [] for spk in self.speaker_ids()}
        for u in self.utterances:
            groups[u.speaker_id].append(u.utt_id)
        return groups

    def get(self, utt_id):
        try:
            return self._by_id[utt_id]
        except KeyError:
            raise DataError('utterance {} is not in the {} corpus'.format(utt_id, self.split_tag))

    @property
    def has_latents(self):
        return self.config.synthetic and all(s.has_latents for s in self.speakers.values())


def base_duration(p):
    return 2 + (np.asarray(p) % 3)


def base_pitch(p):
    return PITCH_BASE + PITCH_STEP * (np.asarray(p) % 7)


def energy_pattern(p):
    return 1.0 + ENERGY_STEP * (np.asarray(p) % 2)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@functools.lru_cache(maxsize=None)
def _template_table(template_seed, n_phonemes, n_mel):
    table = np.zeros((n_phonemes, n_mel))
    for p in range(n_phonemes):
        v = np.random.default_rng([template_seed, p]).standard_normal(n_mel)
        table[p] = v / np.linalg.norm(v)
    table.setflags(write=False)
    return table


def phoneme_templates(config):
    # unit-norm template per phoneme, shape (n_phonemes, n_mel)
    return _template_table(config.template_seed, config.n_phonemes, config.n_mel)


def derive_seed(*entropy):
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def make_speaker(seed, config, speaker_id=0):
    config.validate()
    rng = np.random.default_rng(seed)
    lo, hi = DURATION_SCALE_RANGE
    duration_scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    pitch_offset = float(rng.uniform(*PITCH_OFFSET_RANGE))
    energy_scale = float(rng.uniform(*ENERGY_SCALE_RANGE))
    timbre = rng.uniform(TIMBRE_RANGE[0], TIMBRE_RANGE[1], size=config.n_mel)
    return SpeakerParams(speaker_id=speaker_id, duration_scale=duration_scale, pitch_offset=pitch_offset,
                         energy_scale=energy_scale, timbre=timbre)


def render_utterance(spk, phonemes, noise_seed, config, utt_id=None):
    phonemes = np.asarray(phonemes, dtype=np.int64)
    if phonemes.ndim != 1 or phonemes.size == 0:
        raise InputError('phoneme sequence must be a non-empty 1-D sequence')
    if np.any(phonemes < 0) or np.any(phonemes >= config.n_phonemes):
        raise InputError('phoneme id out of range [0, {}): {}'.format(config.n_phonemes, phonemes.tolist()))
    if not spk.has_latents:
        raise DataError('speaker {} has no latent parameters to render from'.format(spk.speaker_id))

    durations = np.maximum(1, round_half_away(base_duration(phonemes) * spk.duration_scale)).astype(np.int64)
    pitch = base_pitch(phonemes) + spk.pitch_offset
    energy = spk.energy_scale * energy_pattern(phonemes)

    templates = phoneme_templates(config)
    rows = energy[:, np.newaxis] * templates[phonemes] * (1.0 + spk.timbre[np.newaxis, :])
    rows[:, 0] += PITCH_TO_MEL * pitch
    mel = np.repeat(rows, durations, axis=0)

    if config.noise_std > 0:
        rng = np.random.default_rng(noise_seed)
        mel = mel + rng.normal(0.0, config.noise_std, size=mel.shape)

    if utt_id is None:
        utt_id = 's{}_n{}'.format(spk.speaker_id, noise_seed)
    return Utterance(utt_id=utt_id, speaker_id=spk.speaker_id, phonemes=phonemes, durations=durations,
                     pitch=pitch, energy=energy, mel=mel)


def generate_corpus(n_speakers, utts_per_speaker, seed, config, split_tag='train', first_speaker_id=0):
    config.validate()
    if n_speakers < 1:
        raise ConfigError('n_speakers must be >= 1, got {}'.format(n_speakers))
    if utts_per_speaker < 2:
        raise ConfigError('utts_per_speaker must be >= 2, got {}'.format(utts_per_speaker))
    if utts_per_speaker < 2 * config.k_shot:
        logging.warning('utts_per_speaker={} < 2K={}: K-shot meta-tasks will not be samplable'.format(
            utts_per_speaker, 2 * config.k_shot))

    speakers = {}
    utterances = []
    for idx in range(n_speakers):
        speaker_id = first_speaker_id + idx
        spk = make_speaker(derive_seed(seed, idx), config, speaker_id=speaker_id)
        speakers[speaker_id] = spk

        rng = np.random.default_rng([seed, idx, 1])
        for j in range(utts_per_speaker):
            length = int(rng.integers(config.min_len, config.max_len + 1))
            phonemes = rng.integers(0, config.n_phonemes, size=length)
            utt_id = 's{:04d}_u{:03d}'.format(speaker_id, j)
            utterances.append(render_utterance(spk, phonemes, derive_seed(seed, idx, 2, j), config, utt_id=utt_id))

    logging.info('generated {} corpus: {} speakers, {} utterances (seed {})'.format(
        split_tag, n_speakers, len(utterances), seed))
    return Corpus(speakers=speakers, utterances=utterances, split_tag=split_tag, global_seed=seed, config=config)


def oracle_embed(u, config, eps=1e-12):
    """Invert the rendering recipe: (rate, pitch offset, loudness, per-channel timbre) statistics of one utterance."""
    if not config.synthetic:
        raise DataError('oracle embedding needs synthetic latents; use a trained speaker encoder for real features')
    phonemes = np.asarray(u.phonemes, dtype=np.int64)
    durations = np.asarray(u.durations, dtype=np.float64)
    pitch = np.asarray(u.pitch, dtype=np.float64)
    energy = np.asarray(u.energy, dtype=np.float64)
    mel = np.asarray(u.mel, dtype=np.float64)

    dur_stat = np.mean(durations / base_duration(phonemes))
    pitch_stat = np.mean(pitch - base_pitch(phonemes))
    energy_stat = np.mean(energy / energy_pattern(phonemes))

    frame_phonemes = np.repeat(phonemes, durations.astype(np.int64))
    frame_pitch = np.repeat(pitch, durations.astype(np.int64))
    frame_energy = np.repeat(energy, durations.astype(np.int64))
    n = min(mel.shape[0], frame_phonemes.size)

    templates = phoneme_templates(config)
    denom = frame_energy[:n, np.newaxis] * templates[frame_phonemes[:n]]
    frames = mel[:n].copy()
    frames[:, 0] -= PITCH_TO_MEL * frame_pitch[:n]

    valid = np.abs(denom) > eps
    ratio = np.where(valid, frames / np.where(valid, denom, 1.0), 0.0)
    counts = np.sum(valid, axis=0)
    timbre_stat = np.where(counts > 0, np.sum(ratio, axis=0) / np.maximum(counts, 1), 1.0) - 1.0

    return np.concatenate(([dur_stat, pitch_stat, energy_stat], timbre_stat))


def embed_corpus(c):
    # utt_id -> oracle vector
    return {u.utt_id: oracle_embed(u, c.config) for u in c.utterances}


def _speaker_record(s):
    rec = {'id': int(s.speaker_id)}
    if s.has_latents:
        rec.update({'duration_scale': s.duration_scale, 'pitch_offset': s.pitch_offset,
                    'energy_scale': s.energy_scale, 'timbre': [float(x) for x in s.timbre]})
    return rec


def _utterance_record(u):
    return {'id': u.utt_id, 'speaker_id': int(u.speaker_id),
            'phonemes': [int(x) for x in u.phonemes], 'durations': [int(x) for x in u.durations],
            'pitch': [float(x) for x in u.pitch], 'energy': [float(x) for x in u.energy],
            'mel': [float(x) for x in u.mel.reshape(-1)], 'mel_shape': [int(x) for x in u.mel.shape]}


def save_corpus(c, path):
    # build the whole directory next to the target, then swap it in
    path = os.path.abspath(path)
    tmp_dir = path + '.tmp_{}'.format(os.getpid())
    if os.path.exists(tmp_dir):
        shutil.rmtree(tmp_dir)
    ensure_dir(tmp_dir)

    with open(os.path.join(tmp_dir, 'speakers.jsonl'), 'w') as fp:
        for spk_id in c.speaker_ids():
            fp.write(json.dumps(_speaker_record(c.speakers[spk_id])) + '\n')
    with open(os.path.join(tmp_dir, 'utterances.jsonl'), 'w') as fp:
        for u in c.utterances:
            fp.write(json.dumps(_utterance_record(u)) + '\n')
    atomic_write_json(os.path.join(tmp_dir, 'meta.json'), {
        'format_version': FORMAT_VERSION, 'global_seed': c.global_seed, 'split_tag': c.split_tag,
        'config': c.config.to_dict(), 'n_speakers': len(c.speakers), 'n_utterances': len(c.utterances)})

    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(tmp_dir, path)
    logging.info('saved corpus {} to {}'.format(c.split_tag, path))


def _take(rec, key, path, line_no):
    if key not in rec:
        raise CorpusParseError(path, line_no, 'missing field "{}"'.format(key))
    return rec[key]


def _read_jsonl(path, known_fields):
    if not os.path.exists(path):
        raise CorpusParseError(path, 0, 'file not found')
    records = []
    warned = set()
    with open(path) as fp:
        for line_no, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            if not line.endswith('\n'):
                raise CorpusParseError(path, line_no, 'truncated record (no line terminator)')
            try:
                rec = json.loads(line)
            except ValueError as e:
                raise CorpusParseError(path, line_no, 'malformed JSON: {}'.format(e))
            if not isinstance(rec, dict):
                raise CorpusParseError(path, line_no, 'record is not an object')
            extra = set(rec) - known_fields - warned
            if extra:
                logging.warning('{}:{}: ignoring unknown fields {}'.format(path, line_no, sorted(extra)))
                warned |= extra
            records.append((line_no, rec))
    return records


def load_corpus(path):
    meta_path = os.path.join(path, 'meta.json')
    try:
        with open(meta_path) as fp:
            meta = json.load(fp)
    except (OSError, ValueError) as e:
        raise CorpusParseError(meta_path, 0, 'cannot read meta: {}'.format(e))
    if meta.get('format_version') != FORMAT_VERSION:
        raise CorpusParseError(meta_path, 0, 'unsupported format_version {}'.format(meta.get('format_version')))
    config = CorpusConfig.from_dict(meta.get('config', {}))

    spk_path = os.path.join(path, 'speakers.jsonl')
    speakers = {}
    latent_keys = ('duration_scale', 'pitch_offset', 'energy_scale', 'timbre')
    for line_no, rec in _read_jsonl(spk_path, {'id'} | set(latent_keys)):
        spk_id = int(_take(rec, 'id', spk_path, line_no))
        if all(k in rec for k in latent_keys):
            timbre = np.asarray(rec['timbre'], dtype=np.float64)
            if timbre.size != config.n_mel:
                raise CorpusParseError(spk_path, line_no, 'timbre has {} components, expected {}'.format(
                    timbre.size, config.n_mel))
            speakers[spk_id] = SpeakerParams(spk_id, float(rec['duration_scale']), float(rec['pitch_offset']),
                                             float(rec['energy_scale']), timbre)
        else:
            speakers[spk_id] = SpeakerParams(spk_id)

    utt_path = os.path.join(path, 'utterances.jsonl')
    utterances = []
    utt_fields = {'id', 'speaker_id', 'phonemes', 'durations', 'pitch', 'energy', 'mel', 'mel_shape'}
    for line_no, rec in _read_jsonl(utt_path, utt_fields):
        for key in utt_fields:
            _take(rec, key, utt_path, line_no)
        shape = tuple(int(x) for x in rec['mel_shape'])
        mel = np.asarray(rec['mel'], dtype=np.float64)
        if len(shape) != 2 or mel.size != shape[0] * shape[1]:
            raise CorpusParseError(utt_path, line_no, 'mel payload does not match shape {}'.format(shape))
        u = Utterance(utt_id=str(rec['id']), speaker_id=int(rec['speaker_id']), phonemes=rec['phonemes'],
                      durations=rec['durations'], pitch=rec['pitch'], energy=rec['energy'], mel=mel.reshape(shape))
        try:
            u.check()
        except InputError as e:
            raise CorpusParseError(utt_path, line_no, str(e))
        if u.speaker_id not in speakers:
            raise CorpusParseError(utt_path, line_no, 'speaker {} not in speakers.jsonl'.format(u.speaker_id))
        utterances.append(u)

    if len(speakers) != meta.get('n_speakers', len(speakers)):
        raise CorpusParseError(spk_path, len(speakers), 'expected {} speakers, found {} (truncated?)'.format(
            meta['n_speakers'], len(speakers)))
    if len(utterances) != meta.get('n_utterances', len(utterances)):
        raise CorpusParseError(utt_path, len(utterances), 'expected {} utterances, found {} (truncated?)'.format(
            meta['n_utterances'], len(utterances)))

    if not all(s.has_latents for s in speakers.values()):
        config.synthetic = False
    return Corpus(speakers=speakers, utterances=utterances, split_tag=meta.get('split_tag', 'train'),
                  global_seed=int(meta.get('global_seed', 0)), config=config)


def dump_embeddings(c, path):
    # tab-separated: utt_id, speaker_id, vector components
    lines = []
    for u in c.utterances:
        vec = oracle_embed(u, c.config)
        lines.append('\t'.join([u.utt_id, str(u.speaker_id)] + [repr(float(x)) for x in vec]))
    with open(path, 'w') as fp:
        fp.write('\n'.join(lines) + '\n')
