class PtychoNLOSException(Exception):
    exit_code = 1


class ConfigException(PtychoNLOSException):
    exit_code = 2


class DataException(PtychoNLOSException):
    exit_code = 3


class NumericalException(PtychoNLOSException):
    exit_code = 4
