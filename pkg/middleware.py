"""
Middleware для логирования API calls
"""
import logging
import time
from datetime import datetime

from fastapi import Request
from starlette.middleware.base import BaseHTTPMiddleware

from database import get_db
from models import APICallLog

logger = logging.getLogger(__name__)


class APILoggingMiddleware(BaseHTTPMiddleware):
    """
    Логирование всех API запросов

    Каждый запрос сохраняется в api_calls_log; сбой записи лога не ломает ответ.
    """

    skip_paths = ("/docs", "/openapi.json", "/health", "/favicon.ico")

    async def dispatch(self, request: Request, call_next):
        start_time = time.time()
        response = await call_next(request)
        response_time_ms = int((time.time() - start_time) * 1000)

        if any(request.url.path.startswith(path) for path in self.skip_paths):
            return response

        pipeline = None
        if request.url.path.startswith("/experiments/"):
            pipeline = request.url.path.rstrip("/").rsplit("/", 1)[-1]

        try:
            async for db in get_db():
                db.add(APICallLog(
                    endpoint=request.url.path,
                    method=request.method,
                    pipeline=pipeline,
                    status_code=response.status_code,
                    response_time_ms=response_time_ms,
                    ip_address=request.client.host if request.client else None,
                    user_agent=request.headers.get("User-Agent", "")[:500],
                    created_at=datetime.utcnow(),
                ))
                await db.commit()
                break
        except Exception as e:
            logger.warning(f"Failed to log API call: {e}")

        return response
