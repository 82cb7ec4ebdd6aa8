from celery import Celery

from .config import settings

celery = Celery(
    __name__,
    broker=settings.celery_broker_url,
    backend=settings.celery_result_backend,
    include=["app.tasks"],
)

celery.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    timezone="UTC",
    enable_utc=True,
    task_always_eager=settings.celery_always_eager,
    task_eager_propagates=True,
    # one training run per worker slot at a time
    worker_prefetch_multiplier=1,
)
