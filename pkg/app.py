# app.py
# FastAPI inference service for trained ConvVitMamba runs
# Serves parameter counts and full-scene classification maps from a run directory

import os
import tempfile

import uvicorn
from fastapi import FastAPI, File, HTTPException, UploadFile
from fastapi.responses import Response

from constants import ENVIRONMENT, HOST, PORT
from exceptions import ConfigurationError, CvmError
from hsi_io import default_palette, load_palette, read_cube, read_labels, render_map
from loaders import load_trained, resolve_config
from metrics import predict_scene
from model import count_flops, count_params
from preprocess import pca_apply
from utils import setup_logging

logger = setup_logging()

app = FastAPI(
    title="ConvVitMamba Inference",
    description="Hyperspectral scene classification from a trained run directory",
    version="1.0.0"
)

# run directory -> (model config, params, pca, palette)
_loaded_runs = {}


def load_run(run_dir=None):
    """Restore the model and PCA of a run directory, cached per directory.

    Args:
        run_dir (str): Directory holding resolved_config.json and best.ckpt;
            defaults to SERVE_RUN_DIR

    Returns:
        tuple: (ModelConfig, params, PcaModel, palette)
    """
    run_dir = run_dir or os.getenv("SERVE_RUN_DIR")
    if not run_dir:
        raise ConfigurationError("SERVE_RUN_DIR is not set")
    if run_dir not in _loaded_runs:
        config = resolve_config(os.path.join(run_dir, "resolved_config.json"), output_dir=run_dir)
        num_classes = config.model["num_classes"]
        if num_classes is None:
            if not config.data["labels"]:
                raise ConfigurationError(f"run {run_dir} names neither model.num_classes nor a label map")
            num_classes = read_labels(config.data["labels"]).num_classes
        model_config, params, pca, meta = load_trained(config, num_classes)
        palette = load_palette(config.eval["palette"]) if config.eval["palette"] else default_palette(num_classes)
        _loaded_runs[run_dir] = (model_config, params, pca, palette)
        logger.info(f"Serving run {run_dir} (best epoch {meta.epoch}, val OA {meta.val_oa:.4f})")
    return _loaded_runs[run_dir]


async def health():
    return {"status": "ok", "environment": ENVIRONMENT}


async def params_report():
    """Parameter, FLOPs and MACs counts of the served model."""
    try:
        model_config, _, _, _ = load_run()
    except CvmError as e:
        logger.error(f"Could not load run: {e}")
        raise HTTPException(status_code=400, detail=f"{type(e).__name__}: {e}")
    flops, macs = count_flops(model_config)
    return {"params": count_params(model_config), "flops": flops, "macs": macs,
            "config": model_config.to_dict()}


async def predict(file: UploadFile = File(...)):
    """
    Classify an uploaded HSI1 cube and return the rendered P6 map.

    The cube must carry the raw band count the served PCA model was fit on.
    Extraction and forward times are returned as response headers.
    """
    payload = await file.read()
    try:
        model_config, params, pca, palette = load_run()
        with tempfile.NamedTemporaryFile(suffix=".hsi", delete=False) as tmp:
            tmp.write(payload)
            tmp_path = tmp.name
        try:
            cube = read_cube(tmp_path)
        finally:
            os.unlink(tmp_path)
        prediction, _, timing = predict_scene(pca_apply(cube, pca), params, model_config)
        image = render_map(prediction, palette)
    except CvmError as e:
        logger.error(f"Prediction failed for upload {file.filename}: {e}")
        raise HTTPException(status_code=400, detail=f"{type(e).__name__}: {e}")

    headers = {
        "X-Extract-Seconds": f"{timing['extract_s']:.6f}",
        "X-Forward-Seconds": f"{timing['forward_s']:.6f}",
        "X-Pixels": str(timing["pixels"]),
    }
    return Response(content=image, media_type="image/x-portable-pixmap", headers=headers)


app.add_api_route("/health", health, methods=["GET"])
app.add_api_route("/params", params_report, methods=["GET"])
app.add_api_route("/predict", predict, methods=["POST"])

if __name__ == "__main__":
    port = int(PORT)
    is_production = ENVIRONMENT == "production"

    if is_production:
        uvicorn.run(
            "app:app",
            host=HOST,
            port=port,
            log_level="info",
            access_log=True
        )
    else:
        uvicorn.run(
            "app:app",
            host=HOST,
            port=port,
            reload=True,
            log_level="debug"
        )
