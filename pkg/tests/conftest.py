import numpy as np
import pytest
import torch

from nailguard import dataset, pipeline, models
from nailguard.backbones import TinyTestBackbone
from nailguard.models import Classifier, ClassifierNet
from nailguard.backbones import BACKBONES

torch.set_num_threads(2)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: list[tuple[int, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, description, outcome in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d} [{outcome}] {description}")


def write_png(path, pixels_uint8):
    from PIL import Image

    Image.fromarray(pixels_uint8).save(path)


def solid_image(rgb, size=(224, 224)):
    arr = np.zeros((size[0], size[1], 3), dtype=np.uint8)
    arr[:, :] = rgb
    return arr


@pytest.fixture(scope="session")
def tiny_tree(tmp_path_factory):
    """6 categories x 2 small solid-color images, ingest-compatible."""
    root = tmp_path_factory.mktemp("tiny_tree")
    rng = np.random.default_rng(1)
    for cat in dataset.CANONICAL_CATEGORIES:
        sub = root / cat
        sub.mkdir()
        for i in range(2):
            rgb = rng.integers(0, 256, size=3)
            write_png(sub / f"{cat}_{i}.png", solid_image(rgb, size=(40, 60)))
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_tree):
    return dataset.ingest(tiny_tree)


def build_tiny(seed=0, head_seed=None, head_scale=0.1):
    """tiny_test classifier; optionally randomize the (zero-init) head."""
    clf = models.build("tiny_test", seed=seed)
    if head_seed is not None:
        g = torch.Generator().manual_seed(head_seed)
        with torch.no_grad():
            clf.net.head.weight.copy_(torch.randn(clf.net.head.weight.shape, generator=g) * head_scale)
            clf.net.head.bias.copy_(torch.randn(clf.net.head.bias.shape, generator=g) * head_scale)
    return clf


def build_gentle_tiny(seed=0, weight_scale=0.05, head_scale=0.1):
    """tiny_test architecture with small random weights everywhere.

    The shipped init is deliberately high-gain for fast low-lr learning;
    numeric probes (finite differences at a fixed step) need a gentler
    operating point, set explicitly here.
    """
    torch.manual_seed(seed)
    backbone = TinyTestBackbone(init_gain=1.0)
    net = ClassifierNet(backbone)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * weight_scale)
        net.head.weight.mul_(head_scale / weight_scale)
        net.head.bias.mul_(head_scale / weight_scale)
    return Classifier(BACKBONES["tiny_test"], dataset.LabelTaxonomy(), net)


def random_batch(n=4, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 224, 224, 3)).astype(np.float32)
    if labels is None:
        labels = rng.integers(0, 6, size=n)
    return pipeline.ImageBatch(
        images=images,
        labels=pipeline.one_hot(labels),
        sample_ids=tuple(f"s{i}" for i in range(n)),
    )
