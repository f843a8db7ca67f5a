"""
SQLAlchemy модели реестра экспериментов
"""
from datetime import datetime

from sqlalchemy import JSON, Column, DateTime, Integer, String, Text
from sqlalchemy.ext.declarative import declarative_base

Base = declarative_base()


class ExperimentRun(Base):
    """Запуск пайплайна: конфиг (хэш), seed, итоговые метрики и нарушения порогов"""
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(100), unique=True, nullable=False)
    pipeline = Column(String(50), nullable=False, index=True)
    config_hash = Column(String(64), nullable=False)
    seed = Column(Integer, nullable=False)
    status = Column(String(20), nullable=False)  # completed / violations / failed
    metrics = Column(JSON, default=dict)
    violations = Column(JSON, default=list)
    error = Column(Text)
    report_path = Column(String(500))
    created_at = Column(DateTime, default=datetime.utcnow, index=True)
    finished_at = Column(DateTime)


class APICallLog(Base):
    """Лог вызовов API"""
    __tablename__ = "api_calls_log"

    id = Column(Integer, primary_key=True)

    # Детали запроса
    endpoint = Column(String(500), nullable=False)
    method = Column(String(10), nullable=False)
    pipeline = Column(String(50))  # для POST /experiments

    # Результат
    status_code = Column(Integer)
    response_time_ms = Column(Integer)

    ip_address = Column(String(50))
    user_agent = Column(String(500))

    created_at = Column(DateTime, default=datetime.utcnow, index=True)
