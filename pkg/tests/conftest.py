import numpy as np
import pytest

from rehab_assess.sequence import MotionSequence, PreprocessConfig, preprocess
from rehab_assess.skeleton import KINECT_V2, chain_graph
from rehab_assess.synthetic import Perturbation, SyntheticSpec, generate_dataset


def random_sequence(rng, graph=KINECT_V2, t=None, label=None, exercise_id="ex", subject_id="s"):
    t = t or int(rng.integers(2, 12))
    ts = np.cumsum(rng.uniform(0.01, 0.1, size=t))
    frames = rng.normal(size=(t, graph.joint_count, graph.dimensionality))
    return MotionSequence(frames, ts, graph, exercise_id, subject_id, label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Preprocessed 12 + 12 sequences over a 5-joint chain, 16 frames each."""
    g = chain_graph(5, 3)
    spec = SyntheticSpec(graph=g, duration_frames=30, incorrect_perturbation=Perturbation(0.3, 0.03, (3, 4)))
    seqs = generate_dataset(spec, 12, 12)
    return [preprocess(s, PreprocessConfig(target_length=16)) for s in seqs]
