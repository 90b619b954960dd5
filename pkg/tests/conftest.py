import numpy as np
import pytest
import torch

from blobcf.blobgen import Generator, GeneratorConfig
from blobcf.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(7)


@pytest.fixture(scope="session")
def small_gen():
    return Generator(GeneratorConfig(resolution=32, K=5))


def random_scene(rng, K=5, d_s=8):
    """Random valid scene vector with blobs well inside a 32x32 frame."""
    from blobcf.blobgen import BlobScene

    spatial = np.column_stack([
        rng.uniform(0.25, 0.75, K),
        rng.uniform(0.25, 0.75, K),
        np.log(rng.uniform(0.1, 0.3, K)),
        rng.uniform(-0.4, 0.4, K),
        rng.uniform(-np.pi, np.pi, K),
        rng.uniform(-1.0, 3.0, K),
    ])
    style = rng.normal(0.0, 1.0, (K, d_s))
    bg = rng.normal(0.0, 0.5, d_s)
    return BlobScene(spatial, style, bg)


class PhantomData:
    """The seed-7 phantom dataset (700 per class) split into train/val/test tensors."""

    def __init__(self):
        from blobcf.phantom import assign_splits, synthesize_dataset

        self.generator = Generator(GeneratorConfig())
        self.samples, self.manifest = synthesize_dataset(700, self.generator, make_rng(7))
        splits = np.array(assign_splits(len(self.samples)))
        images = torch.from_numpy(np.stack([s.image for s in self.samples]))
        labels = np.array([s.label for s in self.samples])
        self.split_index = {sp: np.flatnonzero(splits == sp) for sp in ("train", "val", "test")}
        self.images = {sp: images[i] for sp, i in self.split_index.items()}
        self.labels = {sp: labels[i] for sp, i in self.split_index.items()}

    def scenes(self, split):
        return [self.samples[i].scene for i in self.split_index[split]]


@pytest.fixture(scope="session")
def phantom_data():
    return PhantomData()


@pytest.fixture(scope="session")
def trained_classifier(phantom_data):
    from blobcf.classifier import train_classifier

    d = phantom_data
    return train_classifier(d.images["train"], d.labels["train"], d.images["val"], d.labels["val"], make_rng(7))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one ``[criterion N] PASS|FAIL`` line; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


class Pipeline:
    """Seed-7 models: classifier, pretrained encoder and its finetuned copy."""

    PRETRAIN_STEPS = 5000
    FINETUNE_STEPS = 2000

    def __init__(self, data, classifier):
        from blobcf.encoder import EncoderModel, finetune_encoder, pretrain_encoder
        from blobcf.phantom import PhantomPrior

        g = data.generator
        self.generator = g
        self.classifier = classifier
        self.prior = PhantomPrior(g.K, g.d_s)
        pre = EncoderModel.initialize(g.K, g.d_s, self.prior, g, make_rng(3))
        pretrain_encoder(pre, self.prior, g, self.PRETRAIN_STEPS, make_rng(7))
        self.pretrained = pre
        ft = EncoderModel.from_dict(pre.to_dict())
        finetune_encoder(ft, data.images["train"], self.prior, g, classifier,
                         steps=self.FINETUNE_STEPS, rng=make_rng(7))
        self.finetuned = ft

    def models(self, encoder):
        from blobcf.counterfact import Models

        return Models(self.generator, self.classifier, encoder)


@pytest.fixture(scope="session")
def pipeline(phantom_data, trained_classifier):
    return Pipeline(phantom_data, trained_classifier)
