import zlib

import numpy as np
import pytest

from geln.dataset import SPC_SCHEMA, Case, Dataset, LabelSchema, SynthConfig, synth_generate


def binary_schema(n):
    return LabelSchema.from_pairs([(f"c{i}", ["neg", "pos"]) for i in range(n)])


def make_case(case_id, split, labels, dims=(3, 2), rng=None):
    rng = rng or np.random.default_rng(zlib.crc32(case_id.encode()))
    feats = {"clinical": rng.normal(size=dims[0]), "dermoscopy": rng.normal(size=dims[1])}
    return Case(case_id, split, feats, labels)


@pytest.fixture
def abc_dataset():
    """Three binary categories A, B, C with positive sets {A,B}, {A}, {A,B,C}."""
    schema = LabelSchema.from_pairs([("A", ["no", "yes"]), ("B", ["no", "yes"]), ("C", ["no", "yes"])])
    rows = [("yes", "yes", "no"), ("yes", "no", "no"), ("yes", "yes", "yes")]
    cases = [
        make_case(f"c{i}", "train", dict(zip("ABC", r))) for i, r in enumerate(rows)
    ]
    return Dataset(schema, tuple(cases), {"clinical": 3, "dermoscopy": 2})


@pytest.fixture
def spc_case():
    labels = {"Diag": "MEL", "PN": "ATP", "BWV": "PRS", "RS": "ABS", "VS": "ABS", "PIG": "IR", "STR": "REG",
              "DaG": "IR"}
    return make_case("spc-0", "train", labels, dims=(4, 4))


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(n_train=120, n_val=40, n_test=40, seed=11, noise_scale=2.0,
                                      feature_dims={"clinical": 16, "dermoscopy": 12}))


@pytest.fixture
def spc():
    return SPC_SCHEMA
