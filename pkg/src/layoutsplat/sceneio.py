"""External formats: layout JSON, checkpoints, PLY splats, images, trace CSV.

The layout JSON document is the contract an external layout interpreter (an
LLM following docs/llm_layout_prompt.md, or a human) produces; parse_layout
validates it exhaustively and reports every violation at once. Checkpoints are
a checksummed binary container that round-trips the full optimization state
bit-exactly. PLY export follows the de-facto Gaussian-splat vertex layout.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .optimizer import OptimizationTrace, SceneState
from .scene import (
    EmptySceneError,
    InstanceGaussians,
    InstanceLayout,
    LearnableFlags,
    SceneSnapshot,
)

LAYOUT_VERSION = 1
CHECKPOINT_MAGIC = b"LSCK"
CHECKPOINT_VERSION = 1
SH_C0 = 0.28209479177387814

PLY_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


class LayoutValidationError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("layout document invalid:\n" + "\n".join(f"  - {e}" for e in errors))


class CheckpointError(RuntimeError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class LayoutInstanceSpec:
    id: str
    prompt: str
    center: list[float]
    extents: list[float]
    scale_factor: float = 1.0
    yaw_degrees: float = 0.0
    learnable: dict = field(default_factory=lambda: {"center": False, "scale": False, "yaw": False})
    opacity_logit: float | None = None


@dataclass
class LayoutDocument:
    version: int
    scene_prompt: str
    instances: list[LayoutInstanceSpec]

    def to_layouts(self) -> list[InstanceLayout]:
        out = []
        for spec in self.instances:
            out.append(
                InstanceLayout(
                    id=spec.id,
                    prompt=spec.prompt,
                    center=np.array(spec.center, dtype=np.float64),
                    extents=np.array(spec.extents, dtype=np.float64),
                    scale_factor=spec.scale_factor,
                    yaw=math.radians(spec.yaw_degrees),
                    learnable=LearnableFlags(
                        bool(spec.learnable.get("center", False)),
                        bool(spec.learnable.get("scale", False)),
                        bool(spec.learnable.get("yaw", False)),
                    ),
                    opacity_logit=spec.opacity_logit,
                )
            )
        return out

    @classmethod
    def from_layouts(cls, layouts: list[InstanceLayout], scene_prompt: str = "") -> "LayoutDocument":
        instances = [
            LayoutInstanceSpec(
                id=lay.id,
                prompt=lay.prompt,
                center=[float(v) for v in lay.center],
                extents=[float(v) for v in lay.extents],
                scale_factor=float(lay.scale_factor),
                yaw_degrees=math.degrees(lay.yaw),
                learnable={
                    "center": lay.learnable.center,
                    "scale": lay.learnable.scale,
                    "yaw": lay.learnable.yaw,
                },
                opacity_logit=lay.opacity_logit,
            )
            for lay in layouts
        ]
        return cls(version=LAYOUT_VERSION, scene_prompt=scene_prompt, instances=instances)

    def to_dict(self) -> dict:
        out = {"version": self.version, "scene_prompt": self.scene_prompt, "instances": []}
        for spec in self.instances:
            entry = {
                "id": spec.id,
                "prompt": spec.prompt,
                "center": spec.center,
                "extents": spec.extents,
                "scale_factor": spec.scale_factor,
                "yaw_degrees": spec.yaw_degrees,
                "learnable": dict(spec.learnable),
            }
            if spec.opacity_logit is not None:
                entry["opacity_logit"] = spec.opacity_logit
            out["instances"].append(entry)
        return out


def serialize_layout(doc: LayoutDocument) -> bytes:
    return json.dumps(doc.to_dict(), indent=2).encode()


def _check_vec3(value, name: str, errors: list[str], positive=False) -> list[float] | None:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        errors.append(f"{name} must be a 3-element array")
        return None
    out = []
    for i, v in enumerate(value):
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            errors.append(f"{name}[{i}] must be a finite number")
            return None
        if positive and v <= 0:
            errors.append(f"{name}[{i}] must be > 0, got {v}")
            return None
        out.append(float(v))
    return out


def parse_layout(data: bytes | str) -> LayoutDocument:
    """Validate a layout JSON document, reporting every violation at once."""
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise LayoutValidationError([f"malformed JSON: {exc}"]) from exc

    errors: list[str] = []
    if not isinstance(raw, dict):
        raise LayoutValidationError(["document root must be an object"])
    version = raw.get("version")
    if version != LAYOUT_VERSION:
        errors.append(f"version must be {LAYOUT_VERSION}, got {version!r}")
    scene_prompt = raw.get("scene_prompt", "")
    if not isinstance(scene_prompt, str):
        errors.append("scene_prompt must be a string")
        scene_prompt = ""
    raw_instances = raw.get("instances")
    if not isinstance(raw_instances, list):
        errors.append("instances must be an array")
        raw_instances = []

    instances: list[LayoutInstanceSpec] = []
    seen_ids: dict[str, int] = {}
    for idx, entry in enumerate(raw_instances):
        where = f"instances[{idx}]"
        if not isinstance(entry, dict):
            errors.append(f"{where} must be an object")
            continue
        ident = entry.get("id")
        if not isinstance(ident, str) or not ident:
            errors.append(f"{where}.id must be a non-empty string")
            ident = f"<invalid-{idx}>"
        elif ident in seen_ids:
            errors.append(
                f"{where}.id duplicates instances[{seen_ids[ident]}].id ({ident!r})"
            )
        else:
            seen_ids[ident] = idx
        prompt = entry.get("prompt")
        if not isinstance(prompt, str):
            errors.append(f"{where}.prompt must be a string")
            prompt = ""
        center = _check_vec3(entry.get("center"), f"{where}.center", errors)
        extents = _check_vec3(entry.get("extents"), f"{where}.extents", errors, positive=True)

        scale_factor = entry.get("scale_factor", 1.0)
        if (
            not isinstance(scale_factor, (int, float))
            or isinstance(scale_factor, bool)
            or not math.isfinite(scale_factor)
            or scale_factor <= 0
        ):
            errors.append(f"{where}.scale_factor must be a finite number > 0")
            scale_factor = 1.0
        yaw_degrees = entry.get("yaw_degrees", 0.0)
        if not isinstance(yaw_degrees, (int, float)) or isinstance(yaw_degrees, bool) or not math.isfinite(yaw_degrees):
            errors.append(f"{where}.yaw_degrees must be a finite number")
            yaw_degrees = 0.0
        learnable = entry.get("learnable", {})
        if not isinstance(learnable, dict):
            errors.append(f"{where}.learnable must be an object")
            learnable = {}
        for key, val in learnable.items():
            if key not in ("center", "scale", "yaw"):
                errors.append(f"{where}.learnable.{key} is not a recognized flag")
            elif not isinstance(val, bool):
                errors.append(f"{where}.learnable.{key} must be a boolean")
        opacity_logit = entry.get("opacity_logit")
        if opacity_logit is not None and (
            not isinstance(opacity_logit, (int, float)) or isinstance(opacity_logit, bool)
            or not math.isfinite(opacity_logit)
        ):
            errors.append(f"{where}.opacity_logit must be a finite number")
            opacity_logit = None

        if center is not None and extents is not None:
            instances.append(
                LayoutInstanceSpec(
                    id=ident,
                    prompt=prompt,
                    center=center,
                    extents=extents,
                    scale_factor=float(scale_factor),
                    yaw_degrees=float(yaw_degrees),
                    learnable={
                        "center": bool(learnable.get("center", False)),
                        "scale": bool(learnable.get("scale", False)),
                        "yaw": bool(learnable.get("yaw", False)),
                    },
                    opacity_logit=None if opacity_logit is None else float(opacity_logit),
                )
            )

    if errors:
        raise LayoutValidationError(errors)
    return LayoutDocument(version=LAYOUT_VERSION, scene_prompt=scene_prompt, instances=instances)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_PARAM_NAMES = ("positions", "rotations", "scales_raw", "opacity_raw", "colors_raw")


def checkpoint_bytes(state: SceneState) -> bytes:
    doc = LayoutDocument.from_layouts(state.layouts, state.scene_prompt)
    arrays: list[tuple[str, np.ndarray]] = []
    for lay in state.layouts:
        gauss = state.gaussians[lay.id]
        for name in _PARAM_NAMES:
            arrays.append((f"params/{lay.id}/{name}", getattr(gauss, name)))
    for key in sorted(state.moments):
        m, v = state.moments[key]
        arrays.append((f"moments/{key}/m", m))
        arrays.append((f"moments/{key}/v", v))

    header = {
        "layout_document": doc.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "adam_steps": {k: state.adam_steps[k] for k in sorted(state.adam_steps)},
        "arrays": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            for name, arr in arrays
        ],
    }
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(np.ascontiguousarray(arr).tobytes() for _, arr in arrays)
    payload = struct.pack("<Q", len(header_json)) + header_json + blob
    digest = hashlib.sha256(payload).digest()
    return CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + digest + payload


def save_checkpoint(state: SceneState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state))


def checkpoint_from_bytes(data: bytes) -> SceneState:
    if len(data) < 44 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("not a scene checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    digest = data[8:40]
    payload = data[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumMismatchError("checkpoint checksum mismatch (truncated or corrupt)")

    (header_len,) = struct.unpack("<Q", payload[:8])
    header = json.loads(payload[8 : 8 + header_len])
    blob = payload[8 + header_len :]

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for meta in header["arrays"]:
        dtype = np.dtype(meta["dtype"])
        shape = tuple(meta["shape"])
        n_bytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        arrays[meta["name"]] = arr
        offset += n_bytes

    doc_dict = header["layout_document"]
    doc = parse_layout(json.dumps(doc_dict))
    layouts = doc.to_layouts()
    gaussians = {}
    for lay in layouts:
        kwargs = {name: arrays[f"params/{lay.id}/{name}"] for name in _PARAM_NAMES}
        gaussians[lay.id] = InstanceGaussians(**kwargs)

    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in arrays:
        if name.startswith("moments/") and name.endswith("/m"):
            key = name[len("moments/") : -len("/m")]
            moments[key] = (arrays[name], arrays[f"moments/{key}/v"])

    return SceneState(
        layouts=layouts,
        gaussians=gaussians,
        scene_prompt=doc.scene_prompt,
        seed=int(header["seed"]),
        step=int(header["step"]),
        moments=moments,
        adam_steps={k: int(v) for k, v in header["adam_steps"].items()},
    )


def load_checkpoint(path) -> SceneState:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# --------------------------------------------------------------------------
# PLY export
# --------------------------------------------------------------------------


def _quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product, (w, x, y, z) convention; q2 may be batched (M, 4)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def export_ply(snapshot: SceneSnapshot) -> bytes:
    """Binary little-endian PLY in the common Gaussian-splat vertex layout.

    World-frame values; instance ownership is not representable in this
    format and is therefore lost on export.
    """
    if snapshot.count == 0:
        raise EmptySceneError("cannot export an empty snapshot")

    chunks = []
    for layout, gauss in snapshot.instances:
        yaw_quat = np.array(
            [math.cos(layout.yaw / 2), 0.0, 0.0, math.sin(layout.yaw / 2)]
        )
        norms = np.linalg.norm(gauss.rotations, axis=1, keepdims=True)
        world_rot = _quat_multiply(yaw_quat, gauss.rotations / np.maximum(norms, 1e-12))
        world_scales = layout.scale_factor * gauss.scales
        sl = snapshot.instance_slice(layout.id)
        positions = snapshot.world_positions[sl]
        opacities = snapshot.opacities[sl]
        colors = snapshot.colors[sl]
        record = np.empty((gauss.count, 14), dtype=np.float32)
        record[:, 0:3] = positions
        record[:, 3:6] = (colors - 0.5) / SH_C0
        record[:, 6] = np.log(opacities / (1.0 - opacities))
        record[:, 7:10] = np.log(world_scales)
        record[:, 10:14] = world_rot
        chunks.append(record)

    body = np.concatenate(chunks)
    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {snapshot.count}"]
    header_lines += [f"property float {name}" for name in PLY_PROPERTIES]
    header_lines.append("end_header")
    return ("\n".join(header_lines) + "\n").encode("ascii") + body.tobytes()


def import_ply(data: bytes) -> dict[str, np.ndarray]:
    """Read back an exported PLY into activated parameter arrays."""
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply" or header[1] != "format binary_little_endian 1.0":
        raise ValueError("not a binary little-endian PLY")
    n = int(next(line.split()[-1] for line in header if line.startswith("element vertex")))
    props = [line.split()[-1] for line in header if line.startswith("property")]
    if tuple(props) != PLY_PROPERTIES:
        raise ValueError(f"unexpected property layout: {props}")
    body = np.frombuffer(data[end:], dtype=np.float32, count=n * 14).reshape(n, 14)
    return {
        "positions": body[:, 0:3].astype(np.float64),
        "colors": body[:, 3:6].astype(np.float64) * SH_C0 + 0.5,
        "opacities": 1.0 / (1.0 + np.exp(-body[:, 6].astype(np.float64))),
        "scales": np.exp(body[:, 7:10].astype(np.float64)),
        "rotations": body[:, 10:14].astype(np.float64),
    }


# --------------------------------------------------------------------------
# Images and traces
# --------------------------------------------------------------------------


def image_to_bytes(rgb: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to uint8 with round-half-to-even."""
    clamped = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    return np.rint(clamped * 255.0).astype(np.uint8)


def write_image(img, path) -> None:
    rgb = img.rgb if hasattr(img, "rgb") else img
    Image.fromarray(image_to_bytes(rgb), mode="RGB").save(path, format="PNG")


def encode_png(img) -> bytes:
    rgb = img.rgb if hasattr(img, "rgb") else img
    buf = io.BytesIO()
    Image.fromarray(image_to_bytes(rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_trace_csv(trace: OptimizationTrace, path) -> None:
    if not trace.records:
        raise ValueError("empty trace")
    ids = list(trace.records[0].layout_poses.keys())
    fields = ["step", "eta", "total", "global_sds", "reg"]
    for ident in ids:
        fields += [f"sds[{ident}]", f"layout[{ident}]", f"refine[{ident}]"]
    for ident in ids:
        fields += [
            f"center_x[{ident}]", f"center_y[{ident}]", f"center_z[{ident}]",
            f"scale_factor[{ident}]", f"yaw[{ident}]",
        ]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in trace.records:
            row = {
                "step": rec.step,
                "eta": rec.eta,
                "total": rec.report.total,
                "global_sds": rec.report.global_sds,
                "reg": rec.report.reg,
            }
            for ident in ids:
                row[f"sds[{ident}]"] = rec.report.sds_instance.get(ident, 0.0)
                row[f"layout[{ident}]"] = rec.report.layout.get(ident, 0.0)
                row[f"refine[{ident}]"] = rec.report.refine.get(ident, 0.0)
                pose = rec.layout_poses[ident]
                row[f"center_x[{ident}]"] = pose["center"][0]
                row[f"center_y[{ident}]"] = pose["center"][1]
                row[f"center_z[{ident}]"] = pose["center"][2]
                row[f"scale_factor[{ident}]"] = pose["scale_factor"]
                row[f"yaw[{ident}]"] = pose["yaw"]
            writer.writerow(row)
