#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================

# checkpoint archive layout (zip, stored entries, fixed timestamps):
#   manifest.json    format_version, approach, model_config, partition manifest, speaker rows, info
#   params.npy       flat float64 payload of the model parameters
#   extra.npy        optional flat payload of auxiliary tensors (speaker encoder)
#   <name>.npy       optional named arrays (outer optimizer moments)


import io
import json
import logging
import zipfile
from collections import OrderedDict

import numpy as np
import torch

from lib.errors import ConfigError, DataError
from lib.file_util import atomic_write_bytes
from model import ModelConfig, ModelParameters, param_shapes

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def flatten_tensors(tensors):
    manifest = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype(np.float64).reshape(-1)
        manifest.append({'name': name, 'shape': list(t.shape), 'offset': offset})
        chunks.append(arr)
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return flat, manifest


def unflatten_tensors(flat, manifest):
    tensors = OrderedDict()
    for entry in manifest:
        size = int(np.prod(entry['shape'])) if entry['shape'] else 1
        if entry['offset'] + size > flat.size:
            raise DataError('payload too short for tensor {}'.format(entry['name']))
        chunk = np.array(flat[entry['offset']:entry['offset'] + size], dtype=np.float64)
        tensors[entry['name']] = torch.from_numpy(chunk.reshape(entry['shape']))
    return tensors


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _zip_entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


class Checkpoint(object):
    def __init__(self, params, model_cfg, approach, info=None, extra_tensors=None, arrays=None):
        self.params = params
        self.model_cfg = model_cfg
        self.approach = approach
        self.info = dict(info or {})
        self.extra_tensors = OrderedDict(extra_tensors or {})
        self.arrays = dict(arrays or {})

    @property
    def step(self):
        return self.info.get('step', 0)

    @property
    def mask(self):
        return self.info.get('mask')


def save_checkpoint(path, ckpt):
    flat, manifest = ckpt.params.to_flat()
    doc = {'format_version': FORMAT_VERSION,
           'approach': ckpt.approach,
           'model_config': ckpt.model_cfg.to_dict(),
           'emb_mode': ckpt.params.emb_mode,
           'partitions': manifest,
           'speaker_rows': [[int(spk), int(row)] for spk, row in sorted(ckpt.params.speaker_rows.items())],
           'info': ckpt.info}

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, 'w', zipfile.ZIP_STORED) as zf:
        if ckpt.extra_tensors:
            extra_flat, extra_manifest = flatten_tensors(ckpt.extra_tensors)
            doc['extra'] = extra_manifest
        _zip_entry(zf, 'manifest.json', json.dumps(doc, indent=2, sort_keys=True).encode('utf-8'))
        _zip_entry(zf, 'params.npy', _npy_bytes(flat))
        if ckpt.extra_tensors:
            _zip_entry(zf, 'extra.npy', _npy_bytes(extra_flat))
        for name in sorted(ckpt.arrays.keys()):
            _zip_entry(zf, '{}.npy'.format(name), _npy_bytes(np.asarray(ckpt.arrays[name])))
    atomic_write_bytes(path, buf.getvalue())
    logging.info('checkpoint written: {} ({} parameters)'.format(path, flat.size))
    return path


def validate_manifest(manifest, model_cfg, n_rows):
    expected = param_shapes(model_cfg, n_rows)
    got = OrderedDict((e['name'], tuple(e['shape'])) for e in manifest)
    if list(got.keys()) != list(expected.keys()):
        missing = sorted(set(expected) - set(got))
        unknown = sorted(set(got) - set(expected))
        raise ConfigError('checkpoint parameters do not match model config (missing {}, unknown {})'.format(
            missing, unknown))
    for name, shape in expected.items():
        if got[name] != tuple(shape):
            raise ConfigError('checkpoint tensor {} has shape {}, config expects {}'.format(
                name, got[name], tuple(shape)))


def load_checkpoint(path, model_cfg=None):
    try:
        with zipfile.ZipFile(path, 'r') as zf:
            names = set(zf.namelist())
            if 'manifest.json' not in names or 'params.npy' not in names:
                raise DataError('{}: not a checkpoint archive'.format(path))
            doc = json.loads(zf.read('manifest.json').decode('utf-8'))
            flat = np.load(io.BytesIO(zf.read('params.npy')), allow_pickle=False)
            extra_flat = None
            if 'extra.npy' in names:
                extra_flat = np.load(io.BytesIO(zf.read('extra.npy')), allow_pickle=False)
            arrays = {}
            for name in sorted(names):
                if name.endswith('.npy') and name not in ('params.npy', 'extra.npy'):
                    arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    except zipfile.BadZipFile as e:
        raise DataError('{}: corrupt checkpoint ({})'.format(path, e))

    if doc.get('format_version') != FORMAT_VERSION:
        raise DataError('{}: unsupported format_version {}'.format(path, doc.get('format_version')))

    stored_cfg = ModelConfig.from_dict(doc['model_config'])
    if model_cfg is None:
        model_cfg = stored_cfg
    elif model_cfg.to_dict() != stored_cfg.to_dict():
        raise ConfigError('{}: model config differs from the one the checkpoint was trained with'.format(path))

    speaker_rows = {int(spk): int(row) for spk, row in doc['speaker_rows']}
    n_rows = len(speaker_rows) if doc['emb_mode'] == 'table' else 0
    if doc['emb_mode'] == 'table':
        table = [e for e in doc['partitions'] if e['name'] == 'spk.table']
        n_rows = table[0]['shape'][0] if table else n_rows
    validate_manifest(doc['partitions'], model_cfg, n_rows)

    total = sum(int(np.prod(e['shape'])) for e in doc['partitions'])
    if flat.size != total:
        raise DataError('{}: payload has {} values, manifest needs {}'.format(path, flat.size, total))
    params = ModelParameters.from_flat(flat, doc['partitions'], doc['emb_mode'], speaker_rows)

    extra = None
    if extra_flat is not None:
        extra = unflatten_tensors(extra_flat, doc.get('extra', []))
    return Checkpoint(params, model_cfg, doc['approach'], info=doc.get('info'), extra_tensors=extra, arrays=arrays)
