"""Artifact readers and writers: splat PLY, pose lists, images, traces.

Every format here is binary- or text-exact: writing what was read produces
the same bytes, so pipeline outputs can be compared across runs with a
plain file diff.
"""

import numpy as np
from PIL import Image

from .errors import (
    BadMagicError,
    ContractViolationError,
    EmptySceneError,
    InvalidInputError,
    ParseError,
    TruncatedPayloadError,
)
from .geometry import MAX_SH_DEGREE, GaussianCloud

PLY_MAGIC = b"ply"


def _ply_property_names(degree):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * ((degree + 1) ** 2 - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2"]
    names += [f"rot_{i}" for i in range(4)]
    return names


def write_ply(path, cloud):
    """Write a Gaussian cloud as a binary little-endian splat PLY.

    Vertex properties are float32 in the fixed order x, y, z, f_dc_0..2,
    f_rest_*, opacity (logit), scale_0..2 (log), rot_0..3 (w, x, y, z).
    Higher SH bands are laid out channel-major, matching common splat
    viewers. Confidences are not part of the format and are dropped.
    """
    n = len(cloud)
    if n == 0:
        raise EmptySceneError("refusing to write an empty cloud")
    degree = cloud.sh_degree
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    payload = np.concatenate(
        [
            cloud.positions,
            cloud.sh[:, 0, :],
            rest,
            cloud.opacity_logits[:, None],
            cloud.log_scales,
            cloud.rotations,
        ],
        axis=1,
    ).astype("<f4")
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {name}" for name in _ply_property_names(degree)]
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(payload.tobytes())


def read_ply(path):
    """Read a splat PLY written by write_ply back into a GaussianCloud.

    The float payload survives a write/read/write cycle bit for bit.
    Confidences are initialized to 1 for every point.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(PLY_MAGIC + b"\n"):
        raise BadMagicError(f"{path}: not a PLY file")
    end = blob.find(b"end_header\n")
    if end < 0:
        raise TruncatedPayloadError(f"{path}: header never terminates")
    header = blob[: end + len(b"end_header\n")].decode("ascii", errors="replace")
    body = blob[end + len(b"end_header\n") :]

    n = None
    props = []
    for line_number, line in enumerate(header.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise ParseError(
                    f"{path}: unsupported format {line!r}", line_number=line_number
                )
        elif parts[0] == "element":
            if parts[1] != "vertex" or len(parts) != 3:
                raise ParseError(
                    f"{path}: only vertex elements are supported", line_number=line_number
                )
            try:
                n = int(parts[2])
            except ValueError:
                raise ParseError(
                    f"{path}: bad vertex count {parts[2]!r}", line_number=line_number
                ) from None
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] != "float":
                raise ParseError(
                    f"{path}: expected 'property float <name>'", line_number=line_number
                )
            props.append(parts[2])
    if n is None:
        raise ParseError(f"{path}: missing vertex element", line_number=1)

    degree = None
    for d in range(MAX_SH_DEGREE + 1):
        if props == _ply_property_names(d):
            degree = d
            break
    if degree is None:
        raise ContractViolationError(
            f"{path}: vertex properties do not match the splat layout: {props}"
        )

    n_props = len(props)
    expected = n * n_props * 4
    if len(body) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(body)} bytes, expected {expected}"
        )
    if len(body) > expected:
        raise ContractViolationError(f"{path}: {len(body) - expected} trailing bytes")
    table = np.frombuffer(body, dtype="<f4").reshape(n, n_props).astype(np.float64)

    bands = (degree + 1) ** 2
    rest_cols = 3 * (bands - 1)
    sh = np.zeros((n, bands, 3))
    sh[:, 0, :] = table[:, 3:6]
    if rest_cols:
        sh[:, 1:, :] = table[:, 6 : 6 + rest_cols].reshape(n, 3, bands - 1).transpose(0, 2, 1)
    col = 6 + rest_cols
    return GaussianCloud(
        positions=table[:, 0:3],
        sh=sh,
        opacity_logits=table[:, col],
        rotations=table[:, col + 4 : col + 8],
        log_scales=table[:, col + 1 : col + 4],
        confidences=np.ones(n),
    )


def write_poses(path, cameras, indices=None):
    """Write camera-to-world poses, one `index tx ty tz qx qy qz qw` line each.

    Values carry 9 significant digits; the identity pose prints exactly as
    `0 0 0 0 0 0 0 1`.
    """
    if indices is None:
        indices = range(len(cameras))
    with open(path, "w") as f:
        for idx, cam in zip(indices, cameras):
            w, x, y, z = cam.quat
            tx, ty, tz = cam.t
            fields = [f"{v:.9g}" for v in (tx, ty, tz, x, y, z, w)]
            f.write(f"{int(idx)} " + " ".join(fields) + "\n")


def read_poses(path):
    """Parse a pose file into {index: (quat wxyz, center)}.

    Raises ParseError naming the offending line on malformed input.
    """
    poses = {}
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(
                    f"{path}: expected 8 fields, got {len(parts)}", line_number=line_number
                )
            try:
                idx = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line_number=line_number) from None
            if idx in poses:
                raise ParseError(f"{path}: duplicate view {idx}", line_number=line_number)
            tx, ty, tz, x, y, z, w = vals
            poses[idx] = (np.array([w, x, y, z]), np.array([tx, ty, tz]))
    return poses


def _quantize(image):
    rgb = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    # Round half up; rint would round ties to even.
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image):
    """Write an RGB image in [0, 1] as 8-bit PNG or raw PPM (P6) by extension."""
    data = _quantize(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) image, got {data.shape}")
    path = str(path)
    if path.endswith(".ppm"):
        h, w = data.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
    elif path.endswith(".png"):
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    else:
        raise InvalidInputError(f"unsupported image extension: {path}")


def read_image(path):
    """Read an 8-bit RGB image back to float32 in [0, 1]."""
    path = str(path)
    if path.endswith(".ppm"):
        with open(path, "rb") as f:
            blob = f.read()
        if not blob.startswith(b"P6"):
            raise BadMagicError(f"{path}: not a raw PPM file")
        fields = []
        pos = 2
        while len(fields) < 3:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if pos < len(blob) and blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            if start == pos:
                raise TruncatedPayloadError(f"{path}: header never terminates")
            fields.append(blob[start:pos])
        pos += 1  # single whitespace byte after maxval
        try:
            w, h, maxval = (int(v) for v in fields)
        except ValueError:
            raise ParseError(f"{path}: non-numeric header field", line_number=1) from None
        if maxval != 255:
            raise ContractViolationError(f"{path}: only maxval 255 is supported")
        expected = w * h * 3
        body = blob[pos : pos + expected]
        if len(body) < expected:
            raise TruncatedPayloadError(
                f"{path}: payload holds {len(body)} bytes, expected {expected}"
            )
        data = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    elif path.endswith(".png"):
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.uint8)
    else:
        raise InvalidInputError(f"unsupported image extension: {path}")
    return data.astype(np.float32) / np.float32(255.0)


def write_loss_trace(path, trace):
    """Write an `iteration,loss` CSV; float text is shortest-roundtrip exact."""
    with open(path, "w") as f:
        f.write("iteration,loss\n")
        for i, value in enumerate(np.asarray(trace, dtype=np.float64)):
            f.write(f"{i},{float(value)!r}\n")


def read_loss_trace(path):
    values = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "iteration,loss":
            raise ParseError(f"{path}: bad header {header!r}", line_number=1)
        for line_number, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 2:
                raise ParseError(f"{path}: expected 2 fields", line_number=line_number)
            try:
                idx = int(parts[0])
                values.append(float(parts[1]))
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line_number=line_number) from None
            if idx != len(values) - 1:
                raise ParseError(
                    f"{path}: iteration {idx} out of order", line_number=line_number
                )
    return np.array(values)


def write_metrics(path, metrics):
    """Write a `name: value` report; floats print shortest-roundtrip exact."""
    with open(path, "w") as f:
        for name, value in metrics.items():
            if isinstance(value, (float, np.floating)):
                f.write(f"{name}: {float(value)!r}\n")
            else:
                f.write(f"{name}: {value}\n")


def read_metrics(path):
    metrics = {}
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if ": " not in line:
                raise ParseError(f"{path}: missing separator", line_number=line_number)
            name, text = line.rstrip("\n").split(": ", 1)
            try:
                metrics[name] = int(text)
            except ValueError:
                try:
                    metrics[name] = float(text)
                except ValueError:
                    metrics[name] = text
    return metrics
