"""
Experiments API - запуск пайплайнов и реестр запусков
"""
import logging

from fastapi import APIRouter, Depends, HTTPException
from fastapi.concurrency import run_in_threadpool
from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession

from database import get_db
from models import ExperimentRun
from schemas import PIPELINES, ExperimentConfig
from services.errors import EngineError
from services.experiment_service import ExperimentService

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["5 Эксперименты"])


def _serialize(run: ExperimentRun) -> dict:
    return {
        "run_id": run.run_id,
        "pipeline": run.pipeline,
        "config_hash": run.config_hash,
        "seed": run.seed,
        "status": run.status,
        "metrics": run.metrics,
        "violations": run.violations,
        "error": run.error,
        "report_path": run.report_path,
        "created_at": run.created_at.isoformat() if run.created_at else None,
    }


@router.get("/pipelines", summary="Список пайплайнов")
async def list_pipelines():
    return {"pipelines": list(PIPELINES)}


@router.post("/{pipeline}", summary="Запустить пайплайн")
async def run_pipeline(
    pipeline: str,
    cfg: ExperimentConfig,
    db: AsyncSession = Depends(get_db)
):
    """
    Синхронный запуск пайплайна (в пуле потоков) с записью в реестр

    Ошибка компонента сохраняется в реестре со статусом failed и
    возвращается как 500 с именем стадии.
    """
    if pipeline not in PIPELINES:
        raise HTTPException(404, f"Unknown pipeline '{pipeline}'")
    cfg = cfg.model_copy(update={"pipeline": pipeline})
    try:
        report = await run_in_threadpool(ExperimentService.run_experiment, cfg)
    except EngineError as exc:
        await ExperimentService.record_run(db, cfg, None, error=str(exc))
        raise
    run = await ExperimentService.record_run(db, cfg, report)
    return {"run": _serialize(run), "report": report.model_dump(mode="json")}


@router.get("", summary="История запусков")
async def list_runs(
    pipeline: str = None,
    limit: int = 50,
    db: AsyncSession = Depends(get_db)
):
    runs = await ExperimentService.list_runs(db, pipeline, limit)
    return {"runs": [_serialize(run) for run in runs]}


@router.get("/runs/{run_id}", summary="Запуск по id")
async def get_run(
    run_id: str,
    db: AsyncSession = Depends(get_db)
):
    result = await db.execute(select(ExperimentRun).where(ExperimentRun.run_id == run_id))
    run = result.scalar_one_or_none()
    if not run:
        raise HTTPException(404, "Run not found")
    return _serialize(run)
