"""Exception hierarchy for the histopatch toolkit.

Every failure mode raised by the library is a subclass of HistopatchError so
batch drivers can isolate per-slide failures with a single except clause.
"""


class HistopatchError(Exception):
    """Base class for all histopatch errors."""


# slide I/O


class UnsupportedFormat(HistopatchError):
    """File is readable but not one of the supported raster formats."""


class CorruptImage(HistopatchError):
    """File cannot be decoded as an image."""


class OutOfBounds(HistopatchError):
    """Region request extends past the slide bounds at its level."""


# tissue segmentation


class EmptyImage(HistopatchError):
    """Zero-sized image where pixels were required."""


class ZeroArea(HistopatchError):
    """Rectangle with zero area passed where a ratio is undefined."""


# patch selection


class NoCandidates(HistopatchError):
    """No candidate patch location survives construction and filtering."""


class DegenerateBandwidth(HistopatchError):
    """Kernel bandwidth is not a positive finite number."""


class EmptyDensity(HistopatchError):
    """Density model holds no candidate points to sample from."""


class NoTissue(HistopatchError):
    """Slide produced an empty contour set; counted as a missed slide."""


# augmentation


class ImageTooSmall(HistopatchError):
    """Source image below the minimum side length for crop generation."""


class DegenerateOutput(HistopatchError):
    """Rotation output square would be smaller than the minimum side."""


# model


class ShapeMismatch(HistopatchError):
    """Input raster does not match the model configuration."""


class NonFiniteOutput(HistopatchError):
    """Forward pass produced NaN or Inf."""


class ManifestMismatch(HistopatchError):
    """Weight manifest disagrees with the configuration-derived shapes."""


class TruncatedBlob(HistopatchError):
    """Weight blob is shorter than the manifest requires."""


# retrieval / evaluation


class EmptySet(HistopatchError):
    """Empty row set where at least one embedding is required."""


class InsufficientNeighbors(HistopatchError):
    """A query has fewer eligible neighbors than requested."""


class InsufficientSlides(HistopatchError):
    """Fewer than two slides available for slide-level retrieval."""


class LengthMismatch(HistopatchError):
    """Prediction and truth sequences differ in length."""


class ClassTooSmall(HistopatchError):
    """A class has fewer samples than the number of folds."""
