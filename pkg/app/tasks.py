from .celery_app import celery
from .ablation import AblationPlan, run_cell


@celery.task(name="ablation.run_cell")
def run_ablation_cell(variant: str, seed: int, plan: dict, train_root: str, test_root: str) -> dict:
    """Train and evaluate one (variant, seed) cell; returns the metrics report as a dict."""
    return run_cell(variant, seed, AblationPlan.model_validate(plan), train_root, test_root)
