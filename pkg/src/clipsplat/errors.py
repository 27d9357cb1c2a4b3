"""Exception types shared across the pipeline."""


class ClipSplatError(Exception):
    """Base class for all pipeline errors."""


class DegenerateInputError(ClipSplatError):
    """Input is structurally valid but numerically unusable."""


class DecompositionError(ClipSplatError):
    """Clip splitting could not recover from provider failures."""

    def __init__(self, message, first=None, last=None):
        super().__init__(message)
        self.first = first
        self.last = last


class ColmapParseError(ClipSplatError):
    """Malformed COLMAP text file."""

    def __init__(self, message, path=None, line=None):
        super().__init__(message)
        self.path = path
        self.line = line


class SceneFormatError(ClipSplatError):
    """Scene file is missing, truncated, or carries the wrong version."""


class TrainingDivergedError(ClipSplatError):
    """Loss went non-finite during optimization."""

    def __init__(self, message, iteration, component):
        super().__init__(message)
        self.iteration = iteration
        self.component = component


class EditorError(ClipSplatError):
    """An editor provider failed to produce edited frames."""

    def __init__(self, message, phase=None):
        super().__init__(message)
        self.phase = phase
