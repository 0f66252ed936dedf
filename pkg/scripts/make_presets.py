"""Regenerate the shipped preset files under src/msmatch/presets/."""

import dataclasses
from pathlib import Path

from msmatch.experiment import DatasetSpec, ExperimentConfig, ModelSpec, SplitSpec
from msmatch.trainer import TrainConfig

OUT = Path(__file__).resolve().parents[1] / "src" / "msmatch" / "presets"
SEEDS = (0, 1, 2)

# reported accuracies (%), labels per class -> value
EUROSAT_RGB = {5: 94.53, 10: 96.04, 50: 97.62, 100: 97.63, 200: 98.07, 300: 98.14}
EUROSAT_MS = {5: 95.86, 10: 96.63, 50: 98.23, 100: 98.33, 200: 98.47, 300: 98.65}
EUROSAT_SUPERVISED = {5: 40.75, 10: 54.63, 50: 77.99, 100: 87.41, 200: 91.74, 300: 93.94}
UCM = {5: 90.71, 10: 94.13, 21: 95.71, 80: 98.33}
WEIGHT_DECAY_BEST = 96.63  # 25 labels per class, wd 7.5e-4

EUROSAT_TRAIN = TrainConfig(batch_labeled=32, unlabeled_ratio=7, epochs=500, iters_per_epoch=1000,
                            weight_decay=7.5e-4, log_every=100, eval_every=10000)
UCM_TRAIN = dataclasses.replace(EUROSAT_TRAIN, batch_labeled=16, unlabeled_ratio=4, epochs=1000)
DESK_TRAIN = TrainConfig(batch_labeled=16, unlabeled_ratio=4, epochs=2, iters_per_epoch=50,
                         weight_decay=5e-4, log_every=10, eval_every=50)
B2 = ModelSpec("B2", 0.3)
TINY = ModelSpec("desk_tiny", 0.0)


def eurosat(modality: str) -> DatasetSpec:
    return DatasetSpec(name="eurosat", root=f"EuroSAT_{modality.upper()}", modality=modality)


def write(cfg: ExperimentConfig) -> None:
    (OUT / f"{cfg.name}.yaml").write_text(cfg.render())


def main():
    OUT.mkdir(exist_ok=True)
    for modality, targets in (("rgb", EUROSAT_RGB), ("ms", EUROSAT_MS)):
        for n, target in targets.items():
            write(ExperimentConfig(f"eurosat_{modality}_{n}", eurosat(modality), SplitSpec(0.1, n, SEEDS),
                                   EUROSAT_TRAIN, B2, target_accuracy=target))
    sup = dataclasses.replace(EUROSAT_TRAIN, mode="supervised")
    for n, target in EUROSAT_SUPERVISED.items():
        write(ExperimentConfig(f"eurosat_rgb_{n}_supervised", eurosat("rgb"), SplitSpec(0.1, n, SEEDS),
                               sup, B2, target_accuracy=target))
    write(ExperimentConfig("eurosat_rgb_25_wd", eurosat("rgb"), SplitSpec(0.1, 25, SEEDS), EUROSAT_TRAIN, B2,
                           target_accuracy=WEIGHT_DECAY_BEST))
    ucm = DatasetSpec(name="ucm", root="UCMerced_LandUse/Images", modality="rgb", resize=224)
    for n, target in UCM.items():
        write(ExperimentConfig(f"ucm_{n}", ucm, SplitSpec(0.2, n, SEEDS), UCM_TRAIN, B2, target_accuracy=target))

    syn = DatasetSpec(name="synthetic", n_classes=4, channels=3, side=16, per_class=750)
    write(ExperimentConfig("desk", syn, SplitSpec(0.2, 4, SEEDS), DESK_TRAIN, TINY))
    write(ExperimentConfig("desk_ms", dataclasses.replace(syn, channels=13, modality="ms"),
                           SplitSpec(0.2, 4, SEEDS), DESK_TRAIN, TINY))
    gain = dataclasses.replace(DESK_TRAIN, epochs=1, iters_per_epoch=10000, log_every=100, eval_every=2000)
    write(ExperimentConfig("desk_ssl_gain", syn, SplitSpec(0.2, 4, SEEDS), gain, TINY))


if __name__ == "__main__":
    main()
