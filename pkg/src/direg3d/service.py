"""HTTP inference service: a loaded checkpoint + rig served over FastAPI.

The batch pipeline stays on the CLI; this wraps the long-running,
multi-client part — metadata construction and hand inference — so several
clients can query one loaded model. Images travel as base64-encoded PGM.
"""

from __future__ import annotations

import base64
import binascii
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .errors import DataError, Direg3dError, NumericError
from .geometry import BoundingBox, FisheyeCamera, read_rig
from .hand_model import obj_string
from .harness import InferView, ModelBundle, infer, load_model
from .metadata import compute_metadata, normalize
from .synth import parse_pgm


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool


class ModelInfo(BaseModel):
    crop_size: int
    image_feature_dim: int
    n_parameters: int
    n_vertices: int
    cameras: list[str]


class BoxModel(BaseModel):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def to_box(self) -> BoundingBox:
        return BoundingBox(self.x_min, self.y_min, self.x_max, self.y_max)


class MetadataRequest(BaseModel):
    camera: str = Field(description="camera name in the loaded rig")
    box: BoxModel
    crop_size: int | None = None


class MetadataResponse(BaseModel):
    raw: list[float]
    normalized: list[float]


class ViewInput(BaseModel):
    camera: str
    image_pgm_b64: str
    box: BoxModel


class InferRequest(BaseModel):
    views: list[ViewInput] = Field(min_length=1, max_length=2)
    include_mesh: bool = False


class InferResponse(BaseModel):
    mode: str
    keypoints3d: list[list[float]]
    keypoint_scale_mm: list[float]
    mano_keypoints3d: list[list[float]]
    vertices: list[list[float]] | None = None
    obj: str | None = None


class ServiceState:
    def __init__(self, bundle: ModelBundle | None,
                 rig: dict[str, FisheyeCamera] | None):
        self.bundle = bundle
        self.rig = rig


def _decode_pgm(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise DataError(f"invalid base64 image payload: {exc}") from exc
    return parse_pgm(raw, source="<request image>")


def create_app(ckpt_path: str | Path | None = None,
               rig_path: str | Path | None = None,
               bundle: ModelBundle | None = None,
               rig: dict[str, FisheyeCamera] | None = None) -> FastAPI:
    if bundle is None and ckpt_path is not None:
        bundle = load_model(ckpt_path)
    if rig is None and rig_path is not None:
        rig = read_rig(rig_path)
    state = ServiceState(bundle, rig)
    app = FastAPI(title="direg3d", version="0.1.0")

    def ready() -> tuple[ModelBundle, dict[str, FisheyeCamera]]:
        if state.bundle is None or state.rig is None:
            raise HTTPException(status_code=503, detail="model or rig not loaded")
        return state.bundle, state.rig

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(
            status="ok",
            model_loaded=state.bundle is not None and state.rig is not None,
        )

    @app.get("/model", response_model=ModelInfo)
    def model_info():
        bundle, rig_ = ready()
        return ModelInfo(
            crop_size=bundle.net.config.crop_size,
            image_feature_dim=bundle.net.config.image_feature_dim,
            n_parameters=sum(t.value.size for t in bundle.parameters().values()),
            n_vertices=bundle.template.n_vertices,
            cameras=sorted(rig_),
        )

    @app.post("/metadata", response_model=MetadataResponse)
    def metadata(req: MetadataRequest):
        bundle, rig_ = ready()
        if req.camera not in rig_:
            raise HTTPException(status_code=422, detail=f"unknown camera '{req.camera}'")
        crop_size = req.crop_size or bundle.net.config.crop_size
        try:
            meta = compute_metadata(rig_[req.camera], req.box.to_box(), crop_size)
        except Direg3dError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return MetadataResponse(
            raw=[float(x) for x in meta.raw],
            normalized=[float(x) for x in normalize(meta, bundle.stats)],
        )

    @app.post("/infer", response_model=InferResponse)
    def run_infer(req: InferRequest):
        bundle, rig_ = ready()
        try:
            views = [
                InferView(v.camera, _decode_pgm(v.image_pgm_b64), v.box.to_box())
                for v in req.views
            ]
            pred, state_np, _decoded = infer(bundle, views, rig_)
        except (DataError, NumericError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        response = InferResponse(
            mode="stereo" if len(views) == 2 else "mono",
            keypoints3d=np.asarray(pred.indep_keypoints).tolist(),
            keypoint_scale_mm=np.exp(np.asarray(pred.keypoint_log_scale)).tolist(),
            mano_keypoints3d=np.asarray(state_np.keypoints3d).tolist(),
        )
        if req.include_mesh:
            verts = np.asarray(state_np.vertices)
            response.vertices = verts.tolist()
            response.obj = obj_string(verts, bundle.template.faces)
        return response

    return app
