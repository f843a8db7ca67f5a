"""
Database connection and session management (реестр запусков)
"""
from typing import AsyncGenerator

from sqlalchemy.ext.asyncio import AsyncSession, async_sessionmaker, create_async_engine

from config import config
from models import Base

# Convert to async URL if needed
if config.DATABASE_URL.startswith("postgresql://"):
    ASYNC_DATABASE_URL = config.DATABASE_URL.replace("postgresql://", "postgresql+asyncpg://")
elif config.DATABASE_URL.startswith("sqlite://"):
    ASYNC_DATABASE_URL = config.DATABASE_URL.replace("sqlite://", "sqlite+aiosqlite://")
else:
    ASYNC_DATABASE_URL = config.DATABASE_URL

engine = create_async_engine(ASYNC_DATABASE_URL, echo=config.DATABASE_ECHO)

AsyncSessionLocal = async_sessionmaker(
    engine,
    class_=AsyncSession,
    expire_on_commit=False
)


async def init_models() -> None:
    """Создание таблиц реестра (идемпотентно)"""
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)


async def get_db() -> AsyncGenerator[AsyncSession, None]:
    """
    Dependency для получения database session
    """
    async with AsyncSessionLocal() as session:
        try:
            yield session
            await session.commit()
        except Exception:
            await session.rollback()
            raise
        finally:
            await session.close()
