#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


import time
from datetime import datetime


class Timer(object):
    def __init__(self, description=None):
        self.description = description
        self.start_time = None
        self.start_clock = None
        self.clocks = []
        self.texts = []

    def start(self):
        self.start_time = datetime.now()
        self.start_clock = time.perf_counter()
        self.clocks.append(self.start_clock)
        self.texts.append('start')
        return self

    def elapsed(self):
        # seconds since start, monotonic
        return time.perf_counter() - self.start_clock

    # unit can be min or sec
    def mark(self, text, unit='min'):
        assert unit in ('sec', 'min')

        now = time.perf_counter()
        since_last = now - self.clocks[-1]
        since_start = now - self.start_clock
        self.clocks.append(now)
        self.texts.append(text)

        if unit == 'min':
            since_last /= 60.
            since_start /= 60.
        return since_last, since_start

    def total_minutes(self):
        return (self.clocks[-1] - self.start_clock) / 60.

    def summary(self):
        report = 'Timer started at {}, total elapsed {:.6} minutes\n'.format(
            self.start_time.strftime('%Y-%m-%d %H:%M:%S'), self.total_minutes())
        report += '\tdescription: {}\n'.format(self.description)
        for i in range(1, len(self.clocks)):
            since_last = (self.clocks[i] - self.clocks[i - 1]) / 60.
            since_start = (self.clocks[i] - self.start_clock) / 60.
            report += '\t{}: since_last: {:.6} minutes, since_start: {:.6} minutes\n'.format(
                self.texts[i], since_last, since_start)
        return report
