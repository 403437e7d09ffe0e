#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


import errno
import hashlib
import json
import os
import tempfile

from lib.errors import ConfigError


def ensure_dir(path):
    if not os.path.exists(path):
        os.makedirs(path)
    return path


def atomic_write_bytes(path, data):
    # write to a temp file next to the target, then rename over it
    out_dir = os.path.dirname(os.path.abspath(path))
    ensure_dir(out_dir)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp_', dir=out_dir)
    try:
        with os.fdopen(fd, 'wb') as fp:
            fp.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def atomic_write_json(path, obj, indent=2):
    atomic_write_text(path, json.dumps(obj, indent=indent, sort_keys=True) + '\n')


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, 'rb') as fp:
        for chunk in iter(lambda: fp.read(1 << 16), b''):
            h.update(chunk)
    return h.hexdigest()


class DirLock(object):
    """Exclusive lock file inside a work directory; a second holder is rejected."""

    def __init__(self, work_dir):
        self.path = os.path.join(work_dir, '.lock')
        self.fd = None

    def __enter__(self):
        ensure_dir(os.path.dirname(self.path))
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except OSError as e:
            if e.errno == errno.EEXIST:
                raise ConfigError('work dir is locked by another run: {}'.format(self.path))
            raise
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
        if os.path.exists(self.path):
            os.remove(self.path)
        return False
