"""Volume I/O Module - keyreg

Readers and writers for:

- NIfTI-1 single files (.nii, .nii.gz) via nibabel, with an explicit
  sform > qform > pixdim affine precedence
- the raw interchange format: ``.rkm.txt`` metadata + ``.rkm.bin`` payload
- activation stacks (``RKMACT1`` binary)
- transform and keypoint text files used by the CLI

Arrays are indexed (i, j, k) in header-dimension order; orientation lives
only in the affine and axes are never reordered.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.openers import ImageOpener

from coords import WorldAffine
from errors import (
    BadMagic,
    IoFailure,
    ParseError,
    TruncatedData,
    UnsupportedDatatype,
)
from keypoints import ActivationStack
from solvers import AffineTransform, KeypointSet, RigidTransform, TpsTransform
from warp import Volume, WorldTransform

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NIFTI_MAGIC = b"n+1\x00"
NIFTI_HEADER_BYTES = 348
NIFTI_DATATYPES: Dict[int, str] = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 64: "float64"}
SFORM_ALIGNED = 2

RAW_META_SUFFIX = ".rkm.txt"
RAW_DATA_SUFFIX = ".rkm.bin"
RAW_DATATYPES = ("uint8", "int16", "int32", "float32", "float64")

ACTIVATION_MAGIC = b"RKMACT1\x00"
ACTIVATION_HEADER_BYTES = 32


# ----------------------------------------------------------------------------
# NIfTI-1
# ----------------------------------------------------------------------------

def _read_header_bytes(path: Path) -> bytes:
    try:
        with ImageOpener(str(path), "rb") as fobj:
            raw = fobj.read(NIFTI_HEADER_BYTES)
    except (OSError, EOFError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < NIFTI_HEADER_BYTES:
        raise TruncatedData(f"{path}: header has {len(raw)} of {NIFTI_HEADER_BYTES} bytes")
    return raw


def nifti_affine(header: nib.Nifti1Header) -> np.ndarray:
    """sform if sform_code > 0, else qform if qform_code > 0, else diag(pixdim)."""
    sform, scode = header.get_sform(coded=True)
    if sform is not None and scode > 0:
        return np.asarray(sform, dtype=np.float64)
    qform, qcode = header.get_qform(coded=True)
    if qform is not None and qcode > 0:
        return np.asarray(qform, dtype=np.float64)
    affine = np.eye(4)
    affine[[0, 1, 2], [0, 1, 2]] = header["pixdim"][1:4]
    return affine


def _scaled(raw: np.ndarray, header: nib.Nifti1Header) -> np.ndarray:
    slope = float(header["scl_slope"])
    inter = float(header["scl_inter"])
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    data = raw.astype(np.float32)
    if slope != 1.0 or inter != 0.0:
        data = (raw.astype(np.float64) * slope + inter).astype(np.float32)
    return data


def _read_nifti_array(path: Path) -> Tuple[np.ndarray, nib.Nifti1Header]:
    raw_header = _read_header_bytes(path)
    magic = raw_header[344:348]
    if magic != NIFTI_MAGIC:
        raise BadMagic(f"{path}: magic field is {magic!r}, expected {NIFTI_MAGIC!r}")
    try:
        img = nib.Nifti1Image.from_filename(str(path))
    except Exception as exc:  # nibabel raises several header error types
        raise IoFailure(f"{path}: unreadable NIfTI header: {exc}") from exc
    header = img.header
    code = int(header["datatype"])
    if code not in NIFTI_DATATYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {code} is not one of {sorted(NIFTI_DATATYPES)}")
    try:
        raw = np.asanyarray(img.dataobj.get_unscaled())
    except (OSError, EOFError, ValueError) as exc:
        raise TruncatedData(f"{path}: data block is shorter than the header dims require ({exc})") from exc
    if raw.ndim > 3:
        raw = raw.reshape(raw.shape[:3])
    while raw.ndim < 3:
        raw = raw[..., None]
    return np.ascontiguousarray(raw), header


def read_nifti(path: PathLike, labels_path: Optional[PathLike] = None) -> Volume:
    """Volume from a NIfTI-1 file; ``labels_path`` optionally adds a label grid."""
    path = Path(path)
    raw, header = _read_nifti_array(path)
    affine = WorldAffine(nifti_affine(header))
    labels = None
    if labels_path is not None:
        label_raw, _ = _read_nifti_array(Path(labels_path))
        labels = label_raw.astype(np.int32)
    logger.debug("read %s dims=%s", path, raw.shape)
    return Volume(_scaled(raw, header), affine, labels)


def labels_path_for(path: PathLike) -> Path:
    """Sibling path ``<stem>_labels<ext>`` used for label grids."""
    path = Path(path)
    name = path.name
    for ext in (".nii.gz", ".nii", RAW_META_SUFFIX):
        if name.endswith(ext):
            return path.with_name(name[: -len(ext)] + "_labels" + ext)
    return path.with_name(name + "_labels")


def _nifti_image(data: np.ndarray, affine: np.ndarray, dtype) -> nib.Nifti1Image:
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), affine)
    img.header.set_data_dtype(dtype)
    img.header.set_sform(affine, code=SFORM_ALIGNED)
    img.header.set_qform(affine, code=SFORM_ALIGNED)
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    return img


def write_nifti(vol: Volume, path: PathLike) -> List[Path]:
    """Write float32 data (sform code 2) and, if present, labels to a sibling file."""
    path = Path(path)
    written = [path]
    try:
        nib.save(_nifti_image(vol.data, vol.affine.matrix, np.float32), str(path))
        if vol.labels is not None:
            dtype = np.uint8 if vol.labels.min() >= 0 and vol.labels.max() <= 255 else np.int32
            lpath = labels_path_for(path)
            nib.save(_nifti_image(vol.labels, vol.affine.matrix, dtype), str(lpath))
            written.append(lpath)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return written


# ----------------------------------------------------------------------------
# Raw interchange
# ----------------------------------------------------------------------------

def _parse_floats(tokens: List[str], lineno: int, line: str) -> List[float]:
    values = []
    for tok in tokens:
        try:
            values.append(float(tok))
        except ValueError:
            raise ParseError(f"{tok!r} is not a number", lineno, line.index(tok) + 1) from None
    return values


def parse_raw_meta(text: str) -> Tuple[Tuple[int, int, int], np.ndarray, str]:
    """(dims, 4x4 affine, datatype) from raw metadata text."""
    dims = None
    datatype = "float32"
    rows: List[List[float]] = []
    affine_line = None
    in_affine = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0].lower()
        if in_affine and key not in ("dims", "datatype", "affine"):
            if len(tokens) != 4:
                raise ParseError(f"affine row has {len(tokens)} values, expected 4", lineno, 1)
            rows.append(_parse_floats(tokens, lineno, raw))
            continue
        in_affine = False
        if key == "dims":
            if len(tokens) != 4:
                raise ParseError("dims needs three integers", lineno, 1)
            try:
                dims = tuple(int(t) for t in tokens[1:])
            except ValueError:
                raise ParseError("dims must be integers", lineno, raw.index(tokens[1]) + 1) from None
            if min(dims) < 1:
                raise ParseError("dims must be >= 1", lineno, raw.index(tokens[1]) + 1)
        elif key == "datatype":
            if len(tokens) != 2 or tokens[1] not in RAW_DATATYPES:
                raise ParseError(f"datatype must be one of {', '.join(RAW_DATATYPES)}", lineno, 1)
            datatype = tokens[1]
        elif key == "affine":
            in_affine = True
            affine_line = lineno
            rows = []
            if len(tokens) > 1:
                values = _parse_floats(tokens[1:], lineno, raw)
                if len(values) != 16:
                    raise ParseError(f"inline affine has {len(values)} values, expected 16", lineno, 1)
                rows = [values[i:i + 4] for i in range(0, 16, 4)]
                in_affine = False
        else:
            raise ParseError(f"unknown key {tokens[0]!r}", lineno, 1)
    if dims is None:
        raise ParseError("missing 'dims' line")
    if affine_line is None:
        raise ParseError("missing 'affine' block")
    if len(rows) != 4:
        raise ParseError(f"affine has {len(rows)} rows, expected 4", affine_line, 1)
    affine = np.array(rows, dtype=np.float64)
    if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise ParseError("affine last row must be 0 0 0 1", affine_line + 4, 1)
    return dims, affine, datatype


def format_raw_meta(dims: Tuple[int, int, int], affine: np.ndarray, datatype: str = "float32") -> str:
    lines = [
        "# keyreg raw volume: little-endian, C order (k fastest)",
        f"dims {dims[0]} {dims[1]} {dims[2]}",
        f"datatype {datatype}",
        "affine",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in np.asarray(affine)]
    return "\n".join(lines) + "\n"


def raw_data_path(path_meta: PathLike) -> Path:
    path_meta = Path(path_meta)
    name = path_meta.name
    if name.endswith(RAW_META_SUFFIX):
        return path_meta.with_name(name[: -len(RAW_META_SUFFIX)] + RAW_DATA_SUFFIX)
    return path_meta.with_suffix(RAW_DATA_SUFFIX)


def read_raw(path_meta: PathLike, path_data: Optional[PathLike] = None) -> Volume:
    path_meta = Path(path_meta)
    path_data = raw_data_path(path_meta) if path_data is None else Path(path_data)
    try:
        text = path_meta.read_text(encoding="utf-8")
        payload = path_data.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read raw volume {path_meta}: {exc}") from exc
    dims, affine, datatype = parse_raw_meta(text)
    dtype = np.dtype(datatype).newbyteorder("<")
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) < expected:
        raise TruncatedData(f"{path_data}: payload has {len(payload)} of {expected} bytes")
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(dims)
    return Volume(data.astype(np.float32), WorldAffine(affine))


def write_raw(vol: Volume, path_meta: PathLike, path_data: Optional[PathLike] = None) -> List[Path]:
    path_meta = Path(path_meta)
    path_data = raw_data_path(path_meta) if path_data is None else Path(path_data)
    try:
        path_meta.write_text(format_raw_meta(vol.dims, vol.affine.matrix), encoding="utf-8")
        path_data.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write raw volume {path_meta}: {exc}") from exc
    return [path_meta, path_data]


def _write_raw_labels(labels: np.ndarray, affine: np.ndarray, path_meta: Path) -> List[Path]:
    path_data = raw_data_path(path_meta)
    path_meta.write_text(format_raw_meta(labels.shape, affine, "int32"), encoding="utf-8")
    path_data.write_bytes(np.ascontiguousarray(labels, dtype="<i4").tobytes())
    return [path_meta, path_data]


# ----------------------------------------------------------------------------
# Dispatch by extension
# ----------------------------------------------------------------------------

def is_nifti(path: PathLike) -> bool:
    name = str(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")


def load_volume(path: PathLike, labels_path: Optional[PathLike] = None) -> Volume:
    """Read a NIfTI or raw volume; labels come from ``labels_path`` if given."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such file: {path}")
    if is_nifti(path):
        return read_nifti(path, labels_path)
    vol = read_raw(path)
    if labels_path is not None:
        labels = read_raw(labels_path).data
        vol = vol.with_labels(np.rint(labels).astype(np.int32))
    return vol


def save_volume(vol: Volume, path: PathLike) -> List[Path]:
    """Write by extension; labels go to the ``_labels`` sibling."""
    path = Path(path)
    if is_nifti(path):
        return write_nifti(vol, path)
    written = write_raw(vol, path)
    if vol.labels is not None:
        try:
            written += _write_raw_labels(vol.labels, vol.affine.matrix, labels_path_for(path))
        except OSError as exc:
            raise IoFailure(f"cannot write labels for {path}: {exc}") from exc
    return written


# ----------------------------------------------------------------------------
# Activation stacks
# ----------------------------------------------------------------------------

def write_activation_stack(stack: ActivationStack, path: PathLike) -> Path:
    path = Path(path)
    n = len(stack)
    d, h, w = stack.dims
    header = ACTIVATION_MAGIC + np.array([n, d, h, w], dtype="<u4").tobytes() + bytes(8)
    try:
        path.write_bytes(header + np.ascontiguousarray(stack.maps, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write activation stack {path}: {exc}") from exc
    return path


def read_activation_stack(path: PathLike, affine: WorldAffine) -> ActivationStack:
    """Maps from an ``RKMACT1`` file, paired with the owning volume's affine."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read activation stack {path}: {exc}") from exc
    if len(raw) < ACTIVATION_HEADER_BYTES:
        raise TruncatedData(f"{path}: header has {len(raw)} of {ACTIVATION_HEADER_BYTES} bytes")
    if raw[:8] != ACTIVATION_MAGIC:
        raise BadMagic(f"{path}: magic is {raw[:8]!r}, expected {ACTIVATION_MAGIC!r}")
    shape = tuple(int(v) for v in np.frombuffer(raw[8:24], dtype="<u4"))
    expected = int(np.prod(shape)) * 4
    payload = raw[ACTIVATION_HEADER_BYTES:]
    if len(payload) < expected:
        raise TruncatedData(f"{path}: payload has {len(payload)} of {expected} bytes")
    maps = np.frombuffer(payload[:expected], dtype="<f4").reshape(shape)
    return ActivationStack(maps.astype(np.float64), affine)


# ----------------------------------------------------------------------------
# Transform and keypoint text files
# ----------------------------------------------------------------------------

def _matrix_lines(m: np.ndarray) -> List[str]:
    return [" ".join(repr(float(v)) for v in row) for row in m]


def format_transform(t: WorldTransform) -> str:
    if isinstance(t, TpsTransform):
        lines = ["# keyreg transform: thin-plate spline, fixed-world -> moving-world", "tps",
                 f"{len(t.control_points)} {t.lam!r}"]
        lines += _matrix_lines(t.control_points)
        lines += _matrix_lines(t.affine_part)
        lines += _matrix_lines(t.warp_coefficients)
    else:
        kind = "rigid" if isinstance(t, RigidTransform) else "affine"
        lines = [f"# keyreg transform: {kind}, moving-world -> fixed-world", kind]
        lines += _matrix_lines(t.matrix)
    return "\n".join(lines) + "\n"


def write_transform(t: WorldTransform, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.write_text(format_transform(t), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write transform {path}: {exc}") from exc
    return path


def parse_transform(text: str) -> WorldTransform:
    """Inverse of :func:`format_transform`; a bare list of 16 reals is an affine."""
    rows: List[Tuple[int, str, List[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((lineno, raw, line.split()))
    if not rows:
        raise ParseError("empty transform file")

    kind = rows[0][2][0].lower()
    if kind not in ("affine", "rigid", "tps"):
        kind = "affine"
    else:
        rows = rows[1:]

    def numbers(selected) -> List[float]:
        out: List[float] = []
        for lineno, raw, tokens in selected:
            out += _parse_floats(tokens, lineno, raw)
        return out

    if kind in ("affine", "rigid"):
        values = numbers(rows)
        if len(values) != 16:
            raise ParseError(f"affine transform needs 16 values, got {len(values)}", rows[0][0] if rows else None)
        matrix = np.array(values).reshape(4, 4)
        return RigidTransform(matrix) if kind == "rigid" else AffineTransform(matrix)

    if not rows or len(rows[0][2]) != 2:
        raise ParseError("tps header must be 'N lambda'", rows[0][0] if rows else None)
    lineno, raw, tokens = rows[0]
    try:
        n = int(tokens[0])
    except ValueError:
        raise ParseError("control point count must be an integer", lineno, 1) from None
    lam = _parse_floats(tokens[1:], lineno, raw)[0]
    body = rows[1:]
    if len(body) != 2 * n + 4:
        raise ParseError(f"tps body has {len(body)} rows, expected {2 * n + 4}", lineno)
    for index, (row_lineno, _, row_tokens) in enumerate(body):
        expected = 4 if n <= index < n + 4 else 3
        if len(row_tokens) != expected:
            raise ParseError(f"row has {len(row_tokens)} values, expected {expected}", row_lineno, 1)
    cps = np.array(numbers(body[:n])).reshape(n, 3)
    affine = np.array(numbers(body[n:n + 4])).reshape(4, 4)
    coeffs = np.array(numbers(body[n + 4:])).reshape(n, 3)
    return TpsTransform(cps, affine, coeffs, lam)


def read_transform(path: PathLike) -> WorldTransform:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read transform {path}: {exc}") from exc
    return parse_transform(text)


def format_keypoints(ks: KeypointSet) -> str:
    return "".join(
        f"{p[0]!r} {p[1]!r} {p[2]!r} {c!r}\n" for p, c in zip(ks.points.tolist(), ks.confidences.tolist())
    )


def write_keypoints(ks: KeypointSet, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.write_text(format_keypoints(ks), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write keypoints {path}: {exc}") from exc
    return path


def parse_keypoints(text: str) -> KeypointSet:
    points, confidences = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise ParseError(f"expected 'x y z [confidence]', got {len(tokens)} values", lineno, 1)
        values = _parse_floats(tokens, lineno, raw)
        points.append(values[:3])
        confidences.append(values[3] if len(values) == 4 else 1.0)
    try:
        return KeypointSet(np.array(points).reshape(-1, 3), np.array(confidences))
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def read_keypoints(path: PathLike) -> KeypointSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read keypoints {path}: {exc}") from exc
    return parse_keypoints(text)
