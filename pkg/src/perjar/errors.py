"""Exception types shared across the toolkit."""


class PerjarError(Exception):
    """Base class for all toolkit errors."""


class CorpusError(PerjarError):
    """Corpus file is missing, malformed, or violates an invariant.

    Carries optional file/line context so parse failures point at the
    offending record.
    """

    def __init__(self, message, path=None, line=None):
        ctx = ""
        if path is not None:
            ctx = f" ({path}" + (f", line {line}" if line is not None else "") + ")"
        super().__init__(message + ctx)
        self.path = path
        self.line = line


class RetrievalError(PerjarError):
    """Retrieval precondition failed (empty index, unknown doc, no candidates)."""


class PromptError(PerjarError):
    """Prompt assembly failed (missing profile, label/entity mismatch, ...)."""


class BackendError(PerjarError):
    """A model backend call failed or returned an unusable result."""


class ConfigError(PerjarError):
    """Experiment configuration is invalid. CLI maps this to exit code 3."""
