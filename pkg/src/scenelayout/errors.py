"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the CLI prints as
the prefix of its single-line error message.
"""


class SceneLayoutError(Exception):
    code = "E_GENERIC"


class GeometryError(SceneLayoutError):
    code = "E_GEOMETRY"


class NonPositiveDepth(GeometryError):
    code = "E_NONPOSITIVE_DEPTH"


class BehindCamera(NonPositiveDepth):
    code = "E_BEHIND_CAMERA"


class EmptyMesh(GeometryError):
    code = "E_EMPTY_MESH"


class EmptyCloud(GeometryError):
    code = "E_EMPTY_CLOUD"


class InvalidMesh(GeometryError):
    code = "E_INVALID_MESH"


class DegenerateGeometry(GeometryError):
    code = "E_DEGENERATE_GEOMETRY"


class TooFewPoints(DegenerateGeometry):
    code = "E_TOO_FEW_POINTS"


class DepthError(SceneLayoutError):
    code = "E_DEPTH"


class DegenerateDepth(DepthError):
    code = "E_DEGENERATE_DEPTH"


class TooFewPixels(DepthError):
    code = "E_TOO_FEW_PIXELS"


class EmptyResult(DepthError):
    code = "E_EMPTY_RESULT"


class EmptyMask(SceneLayoutError):
    code = "E_EMPTY_MASK"


class SelectionError(SceneLayoutError):
    code = "E_SELECTION"


class ZeroVector(SelectionError):
    code = "E_ZERO_VECTOR"


class KTooLarge(SelectionError):
    code = "E_K_TOO_LARGE"


class EmptyList(SelectionError):
    code = "E_EMPTY_LIST"


class EmptyCategory(SelectionError):
    code = "E_EMPTY_CATEGORY"


class NoProposals(SceneLayoutError):
    code = "E_NO_PROPOSALS"


class ConfigError(SceneLayoutError, ValueError):
    code = "E_CONFIG"


class InvalidSpec(ConfigError):
    code = "E_INVALID_SPEC"


class ManifestError(SceneLayoutError):
    code = "E_MANIFEST"


class FormatError(SceneLayoutError):
    code = "E_FORMAT"


class IoFailure(SceneLayoutError):
    code = "E_IO"


class AdapterError(SceneLayoutError):
    code = "E_ADAPTER"


class RemoteFailure(AdapterError):
    code = "E_REMOTE"


class SchemaError(AdapterError):
    code = "E_SCHEMA"
