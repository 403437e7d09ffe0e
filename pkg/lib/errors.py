#  ===============================================================================================================
#  Copyright (c) 2026, the desk Meta-TTS contributors. All rights reserved.
#
#  Redistribution and use in source and binary forms, with or without modification, are permitted provided that
#  the conditions of the 3-clause BSD license are met; see README.md.
#  ===============================================================================================================


# every error carries the process exit code the command line maps it to
class MetaTTSError(Exception):
    exit_code = 1


class ConfigError(MetaTTSError, ValueError):
    exit_code = 2


class DataError(MetaTTSError, ValueError):
    exit_code = 3


class InputError(DataError):
    pass


class CorpusParseError(DataError):
    def __init__(self, path, line_no, msg):
        self.path = path
        self.line_no = line_no
        super(CorpusParseError, self).__init__('{}:{}: {}'.format(path, line_no, msg))


class SamplingError(DataError):
    pass


class PairingError(DataError):
    pass


class MetricError(DataError):
    pass


class SpeakerLookupError(DataError, KeyError):
    def __init__(self, speaker_id):
        self.speaker_id = speaker_id
        super(SpeakerLookupError, self).__init__(
            'unknown speaker id {} (unseen speakers need a fresh embedding row)'.format(speaker_id))

    def __str__(self):
        return self.args[0]


class NumericError(MetaTTSError, ArithmeticError):
    exit_code = 4


def check_finite(value, what):
    value = float(value)
    if value != value or value in (float('inf'), float('-inf')):
        raise NumericError('non-finite {}: {}'.format(what, value))
    return value
