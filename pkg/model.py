#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# Toy multi-speaker FastSpeech 2, written functionally over a flat name -> tensor store so that the meta-learner
# can run forward passes with adapted ("fast") weights and differentiate through them.
#
#   phonemes -> encoder (theta_E, speaker independent)
#            -> + speaker vector -> duration predictor -> length regulator
#            -> pitch predictor -> + pitch embedding -> energy predictor -> + energy embedding   (theta_VA)
#            -> + speaker vector -> decoder -> mel                                              (theta_D)
#
# Parameter names carry their partition as prefix: enc.*, va.*, dec.*, spk.*


import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from lib.errors import ConfigError, InputError, SpeakerLookupError

DTYPE = torch.float64

ENCODER = 'theta_E'
VARIANCE_ADAPTOR = 'theta_VA'
DECODER = 'theta_D'
SPEAKER_STORE = 'spk_store'
PARTITIONS = (ENCODER, VARIANCE_ADAPTOR, DECODER, SPEAKER_STORE)
_PREFIX_TO_PARTITION = {'enc.': ENCODER, 'va.': VARIANCE_ADAPTOR, 'dec.': DECODER, 'spk.': SPEAKER_STORE}

_NEG_INF = -1e9


@dataclass
class ModelConfig:
    hidden_dim: int = 32
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    n_heads: int = 2
    n_phonemes: int = 16
    n_mel: int = 8
    spk_emb_dim: int = None
    emb_mode: str = 'table'
    n_bins: int = 16
    ff_mult: int = 2
    kernel_size: int = 3
    pitch_min: float = 52.0
    pitch_max: float = 80.0
    energy_min: float = 0.3
    energy_max: float = 2.6
    # pitch/energy heads predict standardized values
    pitch_mean: float = 64.0
    pitch_scale: float = 4.0
    energy_mean: float = 1.2
    energy_scale: float = 0.5

    def __post_init__(self):
        if self.spk_emb_dim is None:
            self.spk_emb_dim = self.hidden_dim

    def validate(self):
        if self.hidden_dim < 1 or self.n_heads < 1 or self.hidden_dim % self.n_heads != 0:
            raise ConfigError('hidden_dim ({}) must be a positive multiple of n_heads ({})'.format(
                self.hidden_dim, self.n_heads))
        if self.emb_mode not in ('table', 'shared'):
            raise ConfigError('emb_mode must be "table" or "shared", got {}'.format(self.emb_mode))
        if self.n_bins < 2:
            raise ConfigError('n_bins must be >= 2')
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError('kernel_size must be odd and positive')
        if self.n_encoder_blocks < 0 or self.n_decoder_blocks < 0 or self.ff_mult < 1:
            raise ConfigError('block counts must be >= 0 and ff_mult >= 1')
        if not (self.pitch_min < self.pitch_max and self.energy_min < self.energy_max):
            raise ConfigError('quantization ranges must be increasing')
        if self.pitch_scale <= 0 or self.energy_scale <= 0 or self.spk_emb_dim < 1:
            raise ConfigError('scales and spk_emb_dim must be positive')
        return self

    def check_corpus(self, corpus_config):
        if self.n_phonemes != corpus_config.n_phonemes or self.n_mel != corpus_config.n_mel:
            raise ConfigError('model dims (P={}, C_mel={}) do not match corpus (P={}, C_mel={})'.format(
                self.n_phonemes, self.n_mel, corpus_config.n_phonemes, corpus_config.n_mel))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def partition_of(name):
    for prefix, tag in _PREFIX_TO_PARTITION.items():
        if name.startswith(prefix):
            return tag
    raise ConfigError('parameter {} belongs to no partition'.format(name))


class ModelParameters(object):
    """Partitioned parameter store {theta_E, theta_VA, theta_D, spk_store}."""

    def __init__(self, tensors, emb_mode, speaker_rows=None):
        self.tensors = OrderedDict(tensors)
        self.emb_mode = emb_mode
        self.speaker_rows = dict(speaker_rows or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self, partition=None):
        if partition is None:
            return list(self.tensors.keys())
        return [n for n in self.tensors if partition_of(n) == partition]

    def partition(self, tag):
        return OrderedDict((n, self.tensors[n]) for n in self.names(tag))

    def replace(self, updates):
        tensors = OrderedDict(self.tensors)
        for name, value in updates.items():
            if name not in tensors:
                raise KeyError(name)
            tensors[name] = value
        return ModelParameters(tensors, self.emb_mode, self.speaker_rows)

    def detach(self):
        return ModelParameters(OrderedDict((n, t.detach()) for n, t in self.tensors.items()),
                               self.emb_mode, self.speaker_rows)

    def clone(self):
        return ModelParameters(OrderedDict((n, t.detach().clone()) for n, t in self.tensors.items()),
                               self.emb_mode, self.speaker_rows)

    def num_parameters(self, partition=None):
        return int(sum(self.tensors[n].numel() for n in self.names(partition)))

    def check_partition(self):
        seen = {tag: 0 for tag in PARTITIONS}
        for name in self.tensors:
            seen[partition_of(name)] += 1
        if self.emb_mode == 'table' and 'spk.table' not in self.tensors:
            raise ConfigError('table mode needs spk.table')
        if self.emb_mode == 'shared' and ('spk.shared' not in self.tensors or 'spk.table' in self.tensors):
            raise ConfigError('shared mode needs exactly one shared speaker vector')
        return seen

    def partition_equal(self, other, tag):
        names = self.names(tag)
        if names != other.names(tag):
            return False
        return all(torch.equal(self.tensors[n], other.tensors[n]) for n in names)

    def speaker_vectors(self, speaker_ids):
        if self.emb_mode == 'shared':
            shared = self.tensors['spk.shared']
            return shared.unsqueeze(0).expand(len(speaker_ids), shared.shape[0])
        rows = []
        for spk in speaker_ids:
            if spk not in self.speaker_rows:
                raise SpeakerLookupError(spk)
            rows.append(self.speaker_rows[spk])
        return self.tensors['spk.table'][torch.as_tensor(rows, dtype=torch.long)]

    def to_flat(self):
        # flat float64 payload plus (name, partition, shape, offset) manifest, insertion order
        manifest = []
        chunks = []
        offset = 0
        for name, t in self.tensors.items():
            arr = t.detach().cpu().numpy().astype(np.float64).reshape(-1)
            manifest.append({'name': name, 'partition': partition_of(name), 'shape': list(t.shape), 'offset': offset})
            chunks.append(arr)
            offset += arr.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return flat, manifest

    @classmethod
    def from_flat(cls, flat, manifest, emb_mode, speaker_rows=None):
        tensors = OrderedDict()
        for entry in manifest:
            size = int(np.prod(entry['shape'])) if entry['shape'] else 1
            chunk = np.array(flat[entry['offset']:entry['offset'] + size], dtype=np.float64)
            tensors[entry['name']] = torch.from_numpy(chunk.reshape(entry['shape']))
        return cls(tensors, emb_mode, speaker_rows)


def param_shapes(cfg, n_speakers):
    """Expected name -> shape for a config, in creation order."""
    H = cfg.hidden_dim
    S = cfg.spk_emb_dim
    k = cfg.kernel_size
    ff = cfg.ff_mult * H
    shapes = OrderedDict()

    def block(prefix):
        shapes[prefix + 'ln1.g'] = (H,)
        shapes[prefix + 'ln1.b'] = (H,)
        for w in ('q', 'k', 'v', 'o'):
            shapes[prefix + 'attn.w' + w] = (H, H)
            shapes[prefix + 'attn.b' + w] = (H,)
        shapes[prefix + 'ln2.g'] = (H,)
        shapes[prefix + 'ln2.b'] = (H,)
        shapes[prefix + 'ff.w1'] = (H, ff)
        shapes[prefix + 'ff.b1'] = (ff,)
        shapes[prefix + 'ff.w2'] = (ff, H)
        shapes[prefix + 'ff.b2'] = (H,)

    def predictor(prefix):
        for i in (1, 2):
            shapes['{}conv{}.w'.format(prefix, i)] = (H, H, k)
            shapes['{}conv{}.b'.format(prefix, i)] = (H,)
            shapes['{}ln{}.g'.format(prefix, i)] = (H,)
            shapes['{}ln{}.b'.format(prefix, i)] = (H,)
        shapes[prefix + 'out.w'] = (H, 1)
        shapes[prefix + 'out.b'] = (1,)

    shapes['enc.phone_emb'] = (cfg.n_phonemes, H)
    for i in range(cfg.n_encoder_blocks):
        block('enc.block{}.'.format(i))
    shapes['enc.ln_f.g'] = (H,)
    shapes['enc.ln_f.b'] = (H,)

    if S != H:
        shapes['va.spk_proj.w'] = (S, H)
        shapes['va.spk_proj.b'] = (H,)
    predictor('va.dur.')
    predictor('va.pitch.')
    predictor('va.energy.')
    shapes['va.pitch_emb'] = (cfg.n_bins, H)
    shapes['va.energy_emb'] = (cfg.n_bins, H)

    if S != H:
        shapes['dec.spk_proj.w'] = (S, H)
        shapes['dec.spk_proj.b'] = (H,)
    for i in range(cfg.n_decoder_blocks):
        block('dec.block{}.'.format(i))
    shapes['dec.ln_f.g'] = (H,)
    shapes['dec.ln_f.b'] = (H,)
    shapes['dec.out.w'] = (H, cfg.n_mel)
    shapes['dec.out.b'] = (cfg.n_mel,)

    if cfg.emb_mode == 'table':
        shapes['spk.table'] = (n_speakers, S)
    else:
        shapes['spk.shared'] = (S,)
    return shapes


def _fan_in(name, shape):
    if name.endswith('conv1.w') or name.endswith('conv2.w'):
        return shape[1] * shape[2]
    return shape[0]


def init_params(cfg, speaker_ids, seed, per_speaker_rows=None):
    cfg.validate()
    speaker_ids = sorted(set(int(s) for s in speaker_ids))
    if per_speaker_rows is None:
        per_speaker_rows = cfg.emb_mode == 'table'
    if per_speaker_rows and cfg.emb_mode == 'shared':
        raise ConfigError('shared embedding mode cannot hold per-speaker rows')
    if cfg.emb_mode == 'table' and not speaker_ids:
        raise ConfigError('table mode needs at least one speaker id')

    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg, len(speaker_ids)).items():
        if name.startswith('spk.'):
            arr = np.zeros(shape)
        elif name.endswith('.g'):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            # scaled-uniform
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = torch.from_numpy(np.asarray(arr, dtype=np.float64))

    rows = {spk: i for i, spk in enumerate(speaker_ids)} if cfg.emb_mode == 'table' else {}
    params = ModelParameters(tensors, cfg.emb_mode, rows)
    params.check_partition()
    return params


@dataclass
class Batch:
    utt_ids: list
    speaker_ids: list
    phonemes: torch.Tensor      # [B, L] long, 0 at padding
    src_mask: torch.Tensor      # [B, L] bool
    durations: torch.Tensor = None   # [B, L] long, 0 at padding
    pitch: torch.Tensor = None       # [B, L]
    energy: torch.Tensor = None      # [B, L]
    mel: torch.Tensor = None         # [B, T, C]
    mel_mask: torch.Tensor = None    # [B, T] bool

    @property
    def size(self):
        return self.phonemes.shape[0]

    @property
    def has_targets(self):
        return self.durations is not None


def collate(utterances, with_targets=True, n_phonemes=None):
    """Pad a list of utterances (or (utt_id, speaker_id, phonemes) tuples for text-only input) into a Batch."""
    if len(utterances) == 0:
        raise InputError('empty batch')
    B = len(utterances)
    L = max(len(u.phonemes) for u in utterances)
    phonemes = np.zeros((B, L), dtype=np.int64)
    src_mask = np.zeros((B, L), dtype=bool)
    for i, u in enumerate(utterances):
        ids = np.asarray(u.phonemes, dtype=np.int64)
        if n_phonemes is not None and (np.any(ids < 0) or np.any(ids >= n_phonemes)):
            raise InputError('phoneme id out of range [0, {}) in {}'.format(n_phonemes, u.utt_id))
        phonemes[i, :ids.size] = ids
        src_mask[i, :ids.size] = True
    batch = Batch(utt_ids=[u.utt_id for u in utterances], speaker_ids=[int(u.speaker_id) for u in utterances],
                  phonemes=torch.from_numpy(phonemes), src_mask=torch.from_numpy(src_mask))
    if not with_targets:
        return batch

    T = max(int(np.sum(u.durations)) for u in utterances)
    C = utterances[0].mel.shape[1]
    durations = np.zeros((B, L), dtype=np.int64)
    pitch = np.zeros((B, L))
    energy = np.zeros((B, L))
    mel = np.zeros((B, T, C))
    mel_mask = np.zeros((B, T), dtype=bool)
    for i, u in enumerate(utterances):
        n = len(u.phonemes)
        durations[i, :n] = u.durations
        pitch[i, :n] = u.pitch
        energy[i, :n] = u.energy
        mel[i, :u.mel.shape[0]] = u.mel
        mel_mask[i, :u.mel.shape[0]] = True
    batch.durations = torch.from_numpy(durations)
    batch.pitch = torch.from_numpy(pitch)
    batch.energy = torch.from_numpy(energy)
    batch.mel = torch.from_numpy(mel)
    batch.mel_mask = torch.from_numpy(mel_mask)
    return batch


@dataclass
class ForwardOutput:
    mel_pred: torch.Tensor            # [B, T, C]
    frame_mask: torch.Tensor          # [B, T]
    log_duration_pred: torch.Tensor   # [B, L]
    pitch_pred: torch.Tensor          # [B, L]
    energy_pred: torch.Tensor         # [B, L]
    durations: torch.Tensor           # [B, L] durations that drove the length regulator
    src_mask: torch.Tensor            # [B, L]

    def split(self):
        # per-utterance numpy views, padding stripped
        items = []
        for i in range(self.mel_pred.shape[0]):
            n = int(self.src_mask[i].sum())
            t = int(self.frame_mask[i].sum())
            items.append({'mel': self.mel_pred[i, :t].detach().numpy().copy(),
                          'durations': self.durations[i, :n].detach().numpy().copy(),
                          'log_duration': self.log_duration_pred[i, :n].detach().numpy().copy(),
                          'pitch': self.pitch_pred[i, :n].detach().numpy().copy(),
                          'energy': self.energy_pred[i, :n].detach().numpy().copy()})
        return items


@dataclass
class LossBreakdown:
    mel_loss: torch.Tensor
    duration_loss: torch.Tensor
    pitch_loss: torch.Tensor
    energy_loss: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {'mel_loss': float(self.mel_loss), 'duration_loss': float(self.duration_loss),
                'pitch_loss': float(self.pitch_loss), 'energy_loss': float(self.energy_loss),
                'total': float(self.total)}


_sinusoid_cache = {}


def sinusoid_table(n_position, d_hid):
    key = (n_position, d_hid)
    if key not in _sinusoid_cache:
        pos = np.arange(n_position)[:, np.newaxis]
        i = np.arange(d_hid)[np.newaxis, :]
        angle = pos / np.power(10000.0, 2 * (i // 2) / d_hid)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _sinusoid_cache[key] = torch.from_numpy(table.astype(np.float64))
    return _sinusoid_cache[key]


def _layer_norm(x, t, prefix):
    return F.layer_norm(x, (x.shape[-1],), weight=t[prefix + '.g'], bias=t[prefix + '.b'])


def _attention(x, t, prefix, mask, n_heads):
    B, L, H = x.shape
    dh = H // n_heads

    def heads(y):
        return y.view(B, L, n_heads, dh).transpose(1, 2)

    q = heads(x @ t[prefix + 'wq'] + t[prefix + 'bq'])
    k = heads(x @ t[prefix + 'wk'] + t[prefix + 'bk'])
    v = heads(x @ t[prefix + 'wv'] + t[prefix + 'bv'])
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    scores = scores.masked_fill(~mask[:, None, None, :], _NEG_INF)
    out = torch.softmax(scores, dim=-1) @ v
    out = out.transpose(1, 2).reshape(B, L, H)
    return out @ t[prefix + 'wo'] + t[prefix + 'bo']


def _fft_block(x, t, prefix, mask, n_heads):
    # pre-norm self-attention + position-wise feed-forward
    keep = mask.unsqueeze(-1).to(x.dtype)
    x = x + _attention(_layer_norm(x, t, prefix + 'ln1'), t, prefix + 'attn.', mask, n_heads)
    h = _layer_norm(x, t, prefix + 'ln2')
    h = torch.relu(h @ t[prefix + 'ff.w1'] + t[prefix + 'ff.b1']) @ t[prefix + 'ff.w2'] + t[prefix + 'ff.b2']
    return (x + h) * keep


def _variance_predictor(x, t, prefix, mask):
    keep = mask.unsqueeze(-1).to(x.dtype)
    h = x * keep
    for i in (1, 2):
        w = t['{}conv{}.w'.format(prefix, i)]
        h = F.conv1d(h.transpose(1, 2), w, t['{}conv{}.b'.format(prefix, i)], padding=w.shape[-1] // 2)
        h = torch.relu(h.transpose(1, 2))
        h = _layer_norm(h, t, '{}ln{}'.format(prefix, i)) * keep
    return (h @ t[prefix + 'out.w'] + t[prefix + 'out.b']).squeeze(-1)


def check_phonemes(phonemes, cfg):
    if phonemes.numel() and (int(phonemes.min()) < 0 or int(phonemes.max()) >= cfg.n_phonemes):
        raise InputError('phoneme id out of range [0, {})'.format(cfg.n_phonemes))


def encode_batch(theta_E, phonemes, src_mask, cfg):
    check_phonemes(phonemes[src_mask], cfg)
    L = phonemes.shape[1]
    x = theta_E['enc.phone_emb'][phonemes] + sinusoid_table(L, cfg.hidden_dim)[:L].unsqueeze(0)
    x = x * src_mask.unsqueeze(-1).to(x.dtype)
    for i in range(cfg.n_encoder_blocks):
        x = _fft_block(x, theta_E, 'enc.block{}.'.format(i), src_mask, cfg.n_heads)
    return _layer_norm(x, theta_E, 'enc.ln_f') * src_mask.unsqueeze(-1).to(x.dtype)


def encode(theta_E, phonemes, cfg):
    """Phoneme ids [L] -> hidden [L, hidden_dim]. No speaker input."""
    phonemes = torch.as_tensor(np.asarray(phonemes, dtype=np.int64)).reshape(1, -1)
    mask = torch.ones_like(phonemes, dtype=torch.bool)
    return encode_batch(theta_E, phonemes, mask, cfg)[0]


def length_regulate(hidden, durations):
    durations = torch.as_tensor(np.asarray(durations, dtype=np.int64))
    if durations.ndim != 1 or durations.shape[0] != hidden.shape[0]:
        raise InputError('need one duration per hidden row ({} rows, {} durations)'.format(
            hidden.shape[0], durations.numel()))
    if bool((durations < 1).any()):
        raise InputError('durations must be >= 1, got {}'.format(durations.tolist()))
    return torch.repeat_interleave(hidden, durations, dim=0)


def alignment(durations):
    """Durations [B, L] (0 at padding) -> one-hot frame-to-phoneme map [B, T, L] and frame mask [B, T]."""
    B, L = durations.shape
    totals = durations.sum(dim=1)
    T = max(int(totals.max()), 1)
    ends = torch.cumsum(durations, dim=1)
    frames = torch.arange(T).unsqueeze(0).expand(B, T).contiguous()
    idx = torch.searchsorted(ends, frames, right=True).clamp(max=L - 1)
    frame_mask = frames < totals.unsqueeze(1)
    align = F.one_hot(idx, L).to(DTYPE) * frame_mask.unsqueeze(-1).to(DTYPE)
    return align, frame_mask


def _speaker_input(spk_vec, t, prefix, cfg):
    if spk_vec.shape[-1] != cfg.spk_emb_dim:
        raise InputError('speaker vector has dim {}, expected {}'.format(spk_vec.shape[-1], cfg.spk_emb_dim))
    if cfg.spk_emb_dim == cfg.hidden_dim:
        return spk_vec
    return spk_vec @ t[prefix + 'spk_proj.w'] + t[prefix + 'spk_proj.b']


def _bins(lo, hi, n_bins):
    return torch.linspace(lo, hi, n_bins - 1, dtype=DTYPE)


def _segment_mean(align, frame_values, durations):
    # frame values [B, T] -> per-phoneme means [B, L]
    sums = (align * frame_values.unsqueeze(-1)).sum(dim=1)
    return sums / durations.clamp(min=1).to(DTYPE)


def free_run_durations(log_duration_pred, src_mask):
    d = torch.round(torch.exp(log_duration_pred.detach())).clamp(min=1).to(torch.long)
    return d * src_mask.to(torch.long)


def variance_adapt(theta_VA, hidden, spk_vec, src_mask, cfg, targets=None):
    """Returns regulated hidden [B, T, H], frame mask, log-duration/pitch/energy predictions [B, L], durations used."""
    if spk_vec.ndim == 1:
        spk_vec = spk_vec.unsqueeze(0).expand(hidden.shape[0], spk_vec.shape[0])
    keep = src_mask.unsqueeze(-1).to(hidden.dtype)
    x = (hidden + _speaker_input(spk_vec, theta_VA, 'va.', cfg).unsqueeze(1)) * keep

    log_duration_pred = _variance_predictor(x, theta_VA, 'va.dur.', src_mask)
    if targets is not None:
        durations = targets['durations']
    else:
        durations = free_run_durations(log_duration_pred, src_mask)
    align, frame_mask = alignment(durations)
    xr = align @ x

    pitch_frame = _variance_predictor(xr, theta_VA, 'va.pitch.', frame_mask)
    pitch_pred = cfg.pitch_mean + cfg.pitch_scale * _segment_mean(align, pitch_frame, durations)
    pitch_value = targets['pitch'] if targets is not None else pitch_pred.detach()
    pitch_idx = torch.bucketize(pitch_value, _bins(cfg.pitch_min, cfg.pitch_max, cfg.n_bins))
    xr = xr + align @ (theta_VA['va.pitch_emb'][pitch_idx] * keep)

    energy_frame = _variance_predictor(xr, theta_VA, 'va.energy.', frame_mask)
    energy_pred = cfg.energy_mean + cfg.energy_scale * _segment_mean(align, energy_frame, durations)
    energy_value = targets['energy'] if targets is not None else energy_pred.detach()
    energy_idx = torch.bucketize(energy_value, _bins(cfg.energy_min, cfg.energy_max, cfg.n_bins))
    xr = xr + align @ (theta_VA['va.energy_emb'][energy_idx] * keep)

    mask = src_mask.to(DTYPE)
    return {'hidden': xr, 'frame_mask': frame_mask, 'durations': durations,
            'log_duration_pred': log_duration_pred * mask, 'pitch_pred': pitch_pred * mask,
            'energy_pred': energy_pred * mask}


def decode(theta_D, regulated, spk_vec, frame_mask, cfg):
    if regulated.shape[-1] != cfg.hidden_dim:
        raise InputError('decoder input has dim {}, expected {}'.format(regulated.shape[-1], cfg.hidden_dim))
    if spk_vec.ndim == 1:
        spk_vec = spk_vec.unsqueeze(0).expand(regulated.shape[0], spk_vec.shape[0])
    T = regulated.shape[1]
    keep = frame_mask.unsqueeze(-1).to(regulated.dtype)
    x = regulated + _speaker_input(spk_vec, theta_D, 'dec.', cfg).unsqueeze(1) \
        + sinusoid_table(T, cfg.hidden_dim)[:T].unsqueeze(0)
    x = x * keep
    for i in range(cfg.n_decoder_blocks):
        x = _fft_block(x, theta_D, 'dec.block{}.'.format(i), frame_mask, cfg.n_heads)
    x = _layer_norm(x, theta_D, 'dec.ln_f')
    return (x @ theta_D['dec.out.w'] + theta_D['dec.out.b']) * keep


def forward(params, batch, cfg, spk_vecs=None, teacher_forcing=None):
    """encode -> variance_adapt -> decode. Teacher-forced whenever the batch carries targets (unless disabled)."""
    if teacher_forcing is None:
        teacher_forcing = batch.has_targets
    if teacher_forcing and not batch.has_targets:
        raise InputError('teacher forcing needs duration/pitch/energy targets')

    if spk_vecs is None:
        spk_vecs = params.speaker_vectors(batch.speaker_ids)
    elif spk_vecs.ndim == 1:
        spk_vecs = spk_vecs.unsqueeze(0).expand(batch.size, spk_vecs.shape[0])

    t = params.tensors
    hidden = encode_batch(t, batch.phonemes, batch.src_mask, cfg)
    targets = None
    if teacher_forcing:
        targets = {'durations': batch.durations, 'pitch': batch.pitch, 'energy': batch.energy}
    va = variance_adapt(t, hidden, spk_vecs, batch.src_mask, cfg, targets=targets)
    mel = decode(t, va['hidden'], spk_vecs, va['frame_mask'], cfg)
    return ForwardOutput(mel_pred=mel, frame_mask=va['frame_mask'], log_duration_pred=va['log_duration_pred'],
                         pitch_pred=va['pitch_pred'], energy_pred=va['energy_pred'], durations=va['durations'],
                         src_mask=batch.src_mask)


def _masked_mean(values, mask):
    m = mask.to(values.dtype)
    while m.ndim < values.ndim:
        m = m.unsqueeze(-1)
    m = m.expand_as(values)
    return (values * m).sum() / m.sum().clamp(min=1.0)


def compute_loss(out, batch):
    if not batch.has_targets:
        raise InputError('loss needs targets')
    if out.mel_pred.shape[:2] != batch.mel.shape[:2] or not torch.equal(out.frame_mask, batch.mel_mask):
        raise InputError('predicted frames {} do not align with target frames {}; loss needs teacher forcing'.format(
            tuple(out.mel_pred.shape), tuple(batch.mel.shape)))
    if out.pitch_pred.shape != batch.pitch.shape:
        raise InputError('phoneme-level shapes differ: {} vs {}'.format(
            tuple(out.pitch_pred.shape), tuple(batch.pitch.shape)))

    mel_loss = _masked_mean(torch.abs(out.mel_pred - batch.mel), batch.mel_mask)
    log_target = torch.log(batch.durations.clamp(min=1).to(DTYPE))
    duration_loss = _masked_mean((out.log_duration_pred - log_target) ** 2, batch.src_mask)
    pitch_loss = _masked_mean((out.pitch_pred - batch.pitch) ** 2, batch.src_mask)
    energy_loss = _masked_mean((out.energy_pred - batch.energy) ** 2, batch.src_mask)
    total = mel_loss + duration_loss + pitch_loss + energy_loss
    return LossBreakdown(mel_loss, duration_loss, pitch_loss, energy_loss, total)


def make_loss_fn(cfg):
    """loss_fn(params, batch, spk_vecs=None) -> LossBreakdown, the task loss used by every trainer."""
    def loss_fn(params, batch, spk_vecs=None):
        return compute_loss(forward(params, batch, cfg, spk_vecs=spk_vecs, teacher_forcing=True), batch)
    return loss_fn
