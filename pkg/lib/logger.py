#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


import logging
import os
import sys


_FORMAT = '%(asctime)s %(levelname)s %(module)s: %(message)s'


class GlobalLogger(object):
    """Root-logger wrapper: one log file per pipeline step, optional terminal mirror."""

    def __init__(self, log_dir=None, level=logging.INFO):
        logging.root.setLevel(level)
        self.level = level
        self.log_dir = log_dir

        self.file_handler = None
        self.stream_handler = None

    def set_log_file(self, log_file):
        self.turn_off_file_log()

        log_dir = os.path.dirname(os.path.abspath(log_file))
        if not os.path.exists(log_dir):
            os.makedirs(log_dir)

        self.file_handler = logging.FileHandler(log_file, 'w')
        self.file_handler.setLevel(self.level)
        self.file_handler.setFormatter(logging.Formatter(_FORMAT))
        logging.root.addHandler(self.file_handler)

    def open_step(self, step_name):
        # logs/log_<step>.txt under the configured log dir
        if self.log_dir is None:
            return
        self.set_log_file(os.path.join(self.log_dir, 'log_{}.txt'.format(step_name)))

    def turn_off_file_log(self):
        if self.file_handler is not None:
            logging.root.removeHandler(self.file_handler)
            self.file_handler.close()
            self.file_handler = None

    def turn_on_terminal(self):
        if self.stream_handler is not None:
            return
        self.stream_handler = logging.StreamHandler(sys.stdout)
        self.stream_handler.setLevel(self.level)
        self.stream_handler.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))
        logging.root.addHandler(self.stream_handler)

    def turn_off_terminal(self):
        if self.stream_handler is not None:
            logging.root.removeHandler(self.stream_handler)
            self.stream_handler = None
