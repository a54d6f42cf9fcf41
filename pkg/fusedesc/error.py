"""
Errors raised by the descriptor pipeline
"""


class FuseDescException (Exception):
    """
    Base class for all expected pipeline exceptions

    @cvar exitCode: process exit code used by the command line front end
    """
    exitCode = 1


class ContractError (FuseDescException):
    """
    Thrown when an operation is called in violation of its preconditions
    """
    exitCode = 5


class DimensionError (ContractError):
    """
    Thrown when tensor shapes do not agree. The message names both shapes
    """

    def __init__(self, what, shapeA, shapeB):
        ContractError.__init__(
            self,
            f'{what}: incompatible shapes {tuple(shapeA)} and {tuple(shapeB)}',
        )
        self.shapes = (tuple(shapeA), tuple(shapeB))


class EmptyTensorError (ContractError):
    pass


class AlignmentError (ContractError):
    """
    Thrown when two sparse tensors are expected to share coordinates and
    do not
    """
    pass


class NumericError (FuseDescException):
    """
    Thrown when non-finite values reach an operation that requires finite
    input
    """
    exitCode = 4


class TrainingError (NumericError):
    """
    Thrown when training diverges

    @ivar step: global step index at which the loss became non-finite
    """

    def __init__(self, step, loss):
        NumericError.__init__(
            self, f'Training diverged at step {step} (loss={loss!r})')
        self.step = step


class DegenerateError (FuseDescException):
    """
    Thrown when a rigid fit is requested on rank deficient data
    """
    exitCode = 6


class BehindCameraError (ContractError):
    pass


class ConstructionError (FuseDescException):
    """
    Thrown when a registration pair cannot be built with the requested
    overlap
    """
    exitCode = 3


class ParseError (FuseDescException):
    """
    Thrown when a PLY or PPM file is malformed

    @ivar offset: byte offset at which the fault was detected
    """
    exitCode = 3

    def __init__(self, message, offset):
        FuseDescException.__init__(self, f'{message} (at byte {offset})')
        self.offset = offset


class MarshallingError (FuseDescException):
    """
    Thrown when errors are encountered by the marshalling/unmarshalling
    code
    """
    exitCode = 3


class ContainerError (MarshallingError):
    """
    Thrown when a binary container is malformed or was written for a
    different configuration
    """
    pass


class ConfigError (FuseDescException):
    """
    Thrown when configuration validation fails. Every violation found is
    listed, not just the first one

    @ivar errors: C{list} of violation messages
    """
    exitCode = 2

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        FuseDescException.__init__(self, '; '.join(self.errors))
