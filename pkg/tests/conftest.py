import numpy as np
import pytest
import torch

from leuda.core import ImageKind, ImageTensor, SegMask, Subject, TrainingConfig, split_dataset
from leuda.synthdata import PhantomSpec, generate_phantoms

torch.set_num_threads(1)


def make_subject(
    sid: str,
    domain: str = "source",
    n_slices: int = 2,
    labeled: bool = True,
    size: int = 16,
    seed: int = 0,
) -> Subject:
    rng = np.random.default_rng(seed)
    kind = ImageKind.S if domain == "source" else ImageKind.T
    slices = tuple(
        ImageTensor(
            rng.normal(size=(1, size, size)).astype(np.float32),
            kind,
            slice_id=f"{sid}/{k:03d}",
        )
        for k in range(n_slices)
    )
    masks = None
    if labeled:
        masks = tuple(
            SegMask(rng.integers(0, 5, size=(size, size)).astype(np.int64))
            for _ in range(n_slices)
        )
    return Subject(id=sid, slices=slices, masks=masks, domain=domain)


def make_pool(n_source: int = 20, n_target: int = 20, n_slices: int = 2, size: int = 16):
    source = [make_subject(f"s{i:02d}", "source", n_slices, True, size, seed=i) for i in range(n_source)]
    target = [
        make_subject(f"t{i:02d}", "target", n_slices, True, size, seed=100 + i)
        for i in range(n_target)
    ]
    return source + target


@pytest.fixture(scope="session")
def tiny_phantoms():
    spec = PhantomSpec(n_subjects=3, slices_per_subject=2, image_size=32, seed=11)
    return generate_phantoms(spec)


@pytest.fixture(scope="session")
def tiny_split(tiny_phantoms):
    source, target = tiny_phantoms
    return split_dataset(source + target, train_fraction=1.0, label_ratio=0.34, seed=3)


@pytest.fixture()
def fast_config():
    return TrainingConfig(
        t_max=2,
        warmup_epochs=1,
        batch_labeled=4,
        batch_unlabeled=4,
        steps_per_epoch=2,
        noise_sigma=0.05,
    )
