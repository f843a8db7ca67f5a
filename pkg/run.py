"""
Точка входа для запуска API движка

Используется для корректной работы абсолютных импортов
"""
import logging
import sys
from pathlib import Path

# Добавляем корневую директорию в PYTHONPATH
root_dir = Path(__file__).parent
sys.path.insert(0, str(root_dir))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def main(port: int = 8000) -> None:
    import uvicorn

    from config import config

    logging.basicConfig(level=config.LOG_LEVEL, format=LOG_FORMAT)
    logger = logging.getLogger(__name__)
    logger.info(f"Starting {config.ENGINE_NAME} on port {port}")
    logger.info(f"Swagger UI: http://localhost:{port}/docs")

    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=port,
        reload=False,
        log_level=config.LOG_LEVEL.lower()
    )


if __name__ == "__main__":
    main()
