from opentelemetry.metrics import Counter, get_meter_provider

NAME_TRAIN_STEPS_TOTAL = "skinfcn.train.steps_total"
NAME_TRAIN_IMAGES_TOTAL = "skinfcn.train.images_total"
NAME_PREDICT_IMAGES_TOTAL = "skinfcn.predict.images_total"
NAME_SCORE_IMAGES_TOTAL = "skinfcn.score.images_total"

_DESCRIPTIONS = {
    NAME_TRAIN_STEPS_TOTAL: "Counts the optimizer steps taken during training.",
    NAME_TRAIN_IMAGES_TOTAL: "Counts the training images consumed (one per image per epoch).",
    NAME_PREDICT_IMAGES_TOTAL: "Counts the images segmented by predict.",
    NAME_SCORE_IMAGES_TOTAL: "Counts the prediction/ground-truth pairs scored.",
}
_METRICS: dict[str, Counter] = {}


def init_metrics() -> None:
    # no-op meter unless the host process installed a provider
    meter = get_meter_provider().get_meter("skinfcn.meter")
    for name, description in _DESCRIPTIONS.items():
        if name not in _METRICS:
            _METRICS[name] = meter.create_counter(name=name, description=description)


def get_metric(name: str) -> Counter | None:
    return _METRICS.get(name)


def increment_metric(name: str, value: int = 1) -> None:
    if name not in _METRICS:
        raise ValueError(f"Metric {name} not found")
    _METRICS[name].add(value)
