"""Exception hierarchy shared across the package."""


class MaskPipeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(MaskPipeError):
    """A file or byte stream does not follow the documented format."""


class CorruptionError(FormatError):
    """A file follows the format header but its payload is inconsistent."""


class ValidationError(MaskPipeError):
    """An in-memory object violates its invariants."""


class ParameterError(MaskPipeError):
    """A caller-supplied parameter is out of its documented range."""


class EmptyMaskError(ValidationError):
    """An operation that requires at least one set pixel got an empty mask."""


class EmbeddingLookupError(MaskPipeError):
    """A candidate record has no corresponding embedding."""

    def __init__(self, image_id: str):
        super().__init__(f"no embedding found for image_id {image_id!r}")
        self.image_id = image_id
