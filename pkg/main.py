"""
Главное FastAPI приложение движка DFM
"""
import logging
from contextlib import asynccontextmanager
from datetime import datetime

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from api import experiments, metrics, paths, quantize, sampling
from config import config
from database import engine, init_models
from middleware import APILoggingMiddleware
from services.errors import EngineError, SizeError, StageError

logging.basicConfig(
    level=config.LOG_LEVEL,
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifecycle events"""
    logger.info(f"Starting {config.ENGINE_NAME} v{config.API_VERSION}")
    logger.info(f"Run registry: {config.DATABASE_URL.split('@')[-1]}")
    await init_models()

    yield

    logger.info(f"Stopping {config.ENGINE_NAME}")
    await engine.dispose()


openapi_tags = [
    {"name": "1 Пути и скорости", "description": "Условные пути, расписания, законы скачков, точные маргиналы"},
    {"name": "2 Генерация", "description": "Сэмплер Эйлера с оракульным денойзером"},
    {"name": "3 Квантизация", "description": "Мультикодбучная квантизация векторов"},
    {"name": "4 Метрики", "description": "TV, KL, MRR"},
    {"name": "5 Эксперименты", "description": "Запуск пайплайнов и реестр запусков"},
]

app = FastAPI(
    title=f"{config.ENGINE_NAME} API",
    version=config.API_VERSION,
    lifespan=lifespan,
    openapi_tags=openapi_tags,
)

app.add_middleware(
    CORSMiddleware,
    allow_origin_regex=r"http://localhost:\d+",
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)
app.add_middleware(APILoggingMiddleware)


@app.exception_handler(EngineError)
async def engine_error_handler(request: Request, exc: EngineError):
    """Доменные ошибки: 413 для лимитов размера, 500 для упавшей стадии пайплайна, иначе 400"""
    if isinstance(exc, SizeError):
        status = 413
    elif isinstance(exc, StageError):
        status = 500
    else:
        status = 400
    body = {"detail": str(exc), "error": type(exc).__name__}
    if isinstance(exc, StageError):
        body["stage"] = exc.stage
        body["cause"] = type(exc.cause).__name__
    return JSONResponse(status_code=status, content=body)


app.include_router(paths.router)
app.include_router(sampling.router)
app.include_router(quantize.router)
app.include_router(metrics.router)
app.include_router(experiments.router)


@app.get("/", summary="Информация о движке")
async def root():
    return {
        "engine": config.ENGINE_NAME,
        "api_version": config.API_VERSION,
        "status": "online"
    }


@app.get("/health", summary="Проверка работоспособности")
async def health():
    """Health check endpoint"""
    return {
        "status": "ok",
        "timestamp": datetime.utcnow().isoformat()
    }
