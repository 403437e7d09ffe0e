#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


import os

from lib.file_util import atomic_write_text


class TrainLog(object):
    """Per-step training records written as a tab-separated sidecar next to the checkpoints."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)
        self.rows = []

    def append(self, record):
        self.rows.append([record[c] for c in self.columns])

    def resume(self, step):
        # keep the rows written up to (and including) a checkpointed step
        self.rows = []
        if self.path is None or not os.path.exists(self.path):
            return self
        with open(self.path) as fp:
            header = fp.readline().rstrip('\n').split('\t')
            if header != self.columns:
                return self
            for line in fp:
                values = line.rstrip('\n').split('\t')
                row = [int(values[0])] + [float(v) for v in values[1:]]
                if row[0] <= step:
                    self.rows.append(row)
        return self

    def column(self, name):
        idx = self.columns.index(name)
        return [r[idx] for r in self.rows]

    def save(self):
        if self.path is None:
            return
        lines = ['\t'.join(self.columns)]
        for row in self.rows:
            lines.append('\t'.join([str(row[0])] + ['{:.12g}'.format(v) for v in row[1:]]))
        atomic_write_text(self.path, '\n'.join(lines) + '\n')
