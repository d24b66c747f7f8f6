import numpy as np
import pytest
import torch

from dascseg.datapipe import BinaryMask, ClassTag, Domain, DomainSample, Slice


@pytest.fixture(autouse=True)
def _seed_everything():
    np.random.seed(0)
    torch.manual_seed(0)


def random_sample(rng: np.random.Generator, size=(16, 16), domain=Domain.SOURCE,
                  sample_id="s0", with_label=True) -> DomainSample:
    img = rng.random(size).astype(np.float32)
    label = None
    if with_label:
        label = BinaryMask((rng.random(size) > 0.6).astype(np.uint8))
    tag = ClassTag.POSITIVE if (with_label and label.pixels.any()) else ClassTag.NEGATIVE
    return DomainSample(image=Slice(img), label=label, domain=domain,
                        sample_id=sample_id, class_tag=tag)
