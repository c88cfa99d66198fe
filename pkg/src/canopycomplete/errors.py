"""Exception types shared across the package."""


class DataFileError(Exception):
    """A file could not be parsed or failed validation.

    Carries enough context (path, optionally a line number) for the CLI to
    print a located diagnostic.
    """

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        self.message = message
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class NoOccludedPoints(Exception):
    """A simulated scene produced zero occluded points; the caller may
    reassemble the scene with a different seed."""


class TrainingDiverged(Exception):
    """Training produced a non-finite loss; carries epoch/batch context."""

    def __init__(self, epoch, batch, message):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
