"""FastAPI application serving fused predictions and the gradient check."""
import logging
from typing import Optional, Tuple

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import ValidationError

from app.config import Config
from app.confusion import load_partition
from app.ensemble import predict as fused_predict
from app.errors import ConfNetError
from app.loss import gradcheck as run_gradcheck
from app.model import ModelState, load_checkpoint
from app.schemas import FusionConfig, GradcheckReport, GradcheckRequest, PredictRequest, PredictResponse

# Validate configuration on startup
try:
    Config.validate()
except ValueError as e:
    logging.error(f"Configuration error: {e}")
    raise

app = FastAPI(
    title="ConfNet",
    version="1.0.0",
    docs_url=None,
    redoc_url=None,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

logger = logging.getLogger(__name__)

_loaded: Optional[Tuple[str, str, ModelState]] = None


def get_model() -> Optional[ModelState]:
    """Checkpoint named by ``Config.MODEL_PATH``, reloaded when the configured paths change."""
    global _loaded
    if not Config.MODEL_PATH:
        return None
    key = (Config.MODEL_PATH, Config.PARTITION_PATH)
    if _loaded is None or _loaded[:2] != key:
        model = load_checkpoint(Config.MODEL_PATH)
        if Config.PARTITION_PATH:
            partition = load_partition(Config.PARTITION_PATH, model.class_count)
            served = [g.class_indices for g in partition.groups]
            heads = [h.group.class_indices for h in model.heads[1:]]
            if served != heads:
                raise ConfNetError(f"partition {served} does not match checkpoint heads {heads}")
        logger.info(f"loaded {Config.MODEL_PATH}: {model.head_count} heads, {model.class_count} classes")
        _loaded = (*key, model)
    return _loaded[2]


@app.get("/")
async def root():
    """Root endpoint - minimal response."""
    return {"status": "ok"}


@app.get("/health")
async def health():
    """Health check endpoint."""
    return {
        "status": "healthy",
        "config": {
            "fusion_rule": Config.FUSION_RULE,
            "model_loaded": _loaded is not None and _loaded[0] == Config.MODEL_PATH,
        },
    }


@app.post("/predict", response_model=PredictResponse)
async def predict(request: PredictRequest):
    """
    Fuse every head of the served model for each feature row.

    Raises:
        HTTPException: 503 without a configured model, 400 on bad input
    """
    try:
        model = get_model()
    except (ConfNetError, FileNotFoundError) as e:
        logger.error(f"Model load failed: {e}")
        raise HTTPException(status_code=500, detail=f"Model load failed: {e}")
    if model is None:
        raise HTTPException(status_code=503, detail="no model configured (set CONFNET_MODEL_PATH)")

    try:
        rule = request.rule or Config.FUSION_RULE
        probs, classes = fused_predict(model, request.features, None, FusionConfig(rule=rule))
        return PredictResponse(
            rule=rule,
            classes=[int(c) for c in classes],
            class_names=list(model.class_names),
            probabilities=probs.tolist(),
        )
    except ValidationError as e:
        logger.error(f"Validation error: {e}")
        raise HTTPException(status_code=422, detail=f"Validation error: {str(e)}")
    except ConfNetError as e:
        logger.error(f"Value error: {e}")
        raise HTTPException(status_code=400, detail=str(e))


@app.post("/gradcheck", response_model=GradcheckReport)
async def gradcheck(request: GradcheckRequest):
    """Analytic vs finite-difference gradient of the weighted loss on random instances."""
    try:
        return run_gradcheck(trials=request.trials, k_min=request.k_min, k_max=request.k_max, seed=request.seed)
    except ConfNetError as e:
        raise HTTPException(status_code=400, detail=str(e))


@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    """Global exception handler."""
    logger.error(f"Unhandled exception: {exc}", exc_info=True)
    return JSONResponse(
        status_code=500,
        content={"detail": "An unexpected error occurred"},
    )


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "app.api:app",
        host=Config.API_HOST,
        port=Config.API_PORT,
    )
