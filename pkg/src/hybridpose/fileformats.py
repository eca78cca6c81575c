"""JSON scene/prediction documents and the flat key=value config format."""

from __future__ import annotations

import base64
import dataclasses
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolation
from .postprocess import PersonInstance
from .synthetic import SyntheticScene, render_image
from .targets import GroundTruthPerson
from .trainer import TrainConfig

SCENE_FORMAT = "hybridpose-scene"
PREDICTION_FORMAT = "hybridpose-predictions"
VERSION = 1


def dumps(doc) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _load_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ContractViolation(f"{path}: invalid JSON ({e})") from None


# ---------------------------------------------------------------------- scenes


@dataclasses.dataclass
class SceneRecord:
    id: str
    image_size: tuple[int, int]
    persons: list[GroundTruthPerson]
    image: np.ndarray | None = None  # (K + 1, H, W)
    seed: int | None = None

    @property
    def num_keypoints(self) -> int:
        if self.persons:
            return len(self.persons[0].delta)
        if self.image is not None:
            return self.image.shape[0] - 1
        raise ContractViolation(f"scene {self.id!r} has neither persons nor an image")

    def feature_image(self, num_keypoints: int) -> np.ndarray:
        """Embedded image, else a noise-free rendering of the persons."""
        if self.image is not None:
            return self.image
        return render_image(self.persons, self.image_size, num_keypoints)


def scene_record(scene: SyntheticScene, scene_id: str | None = None) -> SceneRecord:
    return SceneRecord(scene_id or f"scene-{scene.seed}", tuple(scene.image_size), list(scene.persons),
                       scene.image, scene.seed)


def encode_image(image: np.ndarray) -> dict:
    arr = np.ascontiguousarray(image, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "float64-le", "data": base64.b64encode(arr.tobytes()).decode()}


def decode_image(doc: Mapping) -> np.ndarray:
    if doc.get("dtype") != "float64-le":
        raise ContractViolation(f"unsupported image dtype {doc.get('dtype')!r}")
    raw = base64.b64decode(doc["data"])
    shape = tuple(int(v) for v in doc["shape"])
    if len(raw) != 8 * int(np.prod(shape)):
        raise ContractViolation("embedded image size does not match its shape")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def scene_to_doc(rec: SceneRecord, embed_image: bool = True) -> dict:
    doc = {
        "format": SCENE_FORMAT,
        "version": VERSION,
        "id": rec.id,
        "image_size": list(rec.image_size),
        "persons": [{"box": [float(v) for v in p.box],
                     "keypoints": [[float(x), float(y), int(d)] for (x, y), d in zip(p.keypoints, p.delta)]}
                    for p in rec.persons],
    }
    if rec.seed is not None:
        doc["seed"] = int(rec.seed)
    if embed_image and rec.image is not None:
        doc["image"] = encode_image(rec.image)
    return doc


def scene_from_doc(doc: Mapping, base_dir: Path | None = None) -> SceneRecord:
    try:
        h, w = (int(v) for v in doc["image_size"])
        persons = []
        for p in doc["persons"]:
            kps = np.asarray(p["keypoints"], dtype=np.float64).reshape(-1, 3)
            if not np.all(np.isin(kps[:, 2], (0, 1))):
                raise ContractViolation("keypoint flags must be 0 or 1")
            persons.append(GroundTruthPerson(tuple(float(v) for v in p["box"]), kps[:, :2], kps[:, 2].astype(np.int64)))
        scene_id = str(doc.get("id", "scene"))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ContractViolation):
            raise
        raise ContractViolation(f"malformed scene document ({e})") from None
    if len({len(p.delta) for p in persons}) > 1:
        raise ContractViolation("keypoint count differs between persons")
    image = None
    if "image" in doc:
        image = decode_image(doc["image"])
    elif "image_path" in doc:
        path = Path(doc["image_path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        image = np.load(path).astype(np.float64)
    if image is not None and image.shape[1:] != (h, w):
        raise ContractViolation(f"image shape {image.shape} does not match image_size {(h, w)}")
    return SceneRecord(scene_id, (h, w), persons, image, doc.get("seed"))


def read_scenes(path: str | Path) -> list[SceneRecord]:
    """A single scene document or ``{"scenes": [...]}``."""
    doc = _load_json(path)
    base = Path(path).parent
    docs = doc["scenes"] if isinstance(doc, dict) and "scenes" in doc else [doc]
    recs = [scene_from_doc(d, base) for d in docs]
    ids = [r.id for r in recs]
    if len(set(ids)) != len(ids):
        raise ContractViolation("duplicate scene ids")
    return recs


def write_scenes(path: str | Path, recs: Sequence[SceneRecord], embed_image: bool = True) -> None:
    docs = [scene_to_doc(r, embed_image) for r in recs]
    Path(path).write_text(dumps(docs[0] if len(docs) == 1 else {"scenes": docs}))


# ----------------------------------------------------------------- predictions


def predictions_to_doc(preds: Mapping[str, Sequence[PersonInstance]]) -> dict:
    return {"format": PREDICTION_FORMAT, "version": VERSION,
            "images": {str(k): [p.to_dict() for p in v] for k, v in preds.items()}}


def predictions_from_doc(doc: Mapping) -> dict[str, list[PersonInstance]]:
    try:
        images = doc["images"]
        out = {str(k): [PersonInstance.from_dict(p) for p in v] for k, v in images.items()}
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ContractViolation(f"malformed prediction document ({e})") from None
    for k, insts in out.items():
        for p in insts:
            if not 0.0 <= p.score <= 1.0 or np.any(p.vis_scores < 0) or np.any(p.vis_scores > 1):
                raise ContractViolation(f"image {k!r}: scores must lie in [0, 1]")
    return out


def read_predictions(path: str | Path) -> dict[str, list[PersonInstance]]:
    return predictions_from_doc(_load_json(path))


def write_predictions(path: str | Path, preds: Mapping[str, Sequence[PersonInstance]]) -> None:
    Path(path).write_text(dumps(predictions_to_doc(preds)))


# ---------------------------------------------------------------------- config


def _parse_value(kind, text: str):
    if kind is tuple or kind == "tuple[int, ...]":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, base: Mapping | None = None) -> TrainConfig:
    """``key = value`` lines mirroring :class:`TrainConfig`; ``#`` starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = dict(base or {})
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ContractViolation(f"config line {n}: unknown key {key!r}")
        try:
            values[key] = _parse_value(fields[key], val)
        except ValueError:
            raise ContractViolation(f"config line {n}: bad value {val!r} for {key}") from None
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    return "\n".join(lines) + "\n"
