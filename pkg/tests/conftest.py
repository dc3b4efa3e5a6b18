"""Shared fixtures: small synthetic corpora and a trained reference network."""

from __future__ import annotations

import numpy as np
import pytest

from painbench.fixtures import SyntheticFaceParams, generate_corpus, load_ground_truth, table2_replica


@pytest.fixture(scope="session")
def face_dir(tmp_path_factory):
    """40 images: 4 subjects x 5 frames x 2 classes, 96 px."""
    out = tmp_path_factory.mktemp("faces")
    corpus, _ = generate_corpus(SyntheticFaceParams(seed=3, n_subjects=4, frames_per_subject_per_class=5, image_side=96), out)
    return out, corpus


@pytest.fixture(scope="session")
def face_corpus(face_dir):
    return face_dir[1]


@pytest.fixture(scope="session")
def ground_truth(face_dir):
    return load_ground_truth(face_dir[0] / "ground_truth.json")


@pytest.fixture(scope="session")
def tiny_images(face_corpus):
    from painbench.preprocess import preprocess_corpus

    images = preprocess_corpus(face_corpus, "tiny_cnn")
    return [images[s.sample_id] for s in face_corpus]


@pytest.fixture(scope="session")
def trained_tiny(tiny_images):
    from painbench.models.zoo import TrainConfig, build, train

    return train(build("tiny_cnn", seed=0), tiny_images, TrainConfig(seed=0))


@pytest.fixture(scope="session")
def table2_corpus(tmp_path_factory):
    return table2_replica(tmp_path_factory.mktemp("table2"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, echoed in the terminal summary so they survive output capture
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[number] = (passed, detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
