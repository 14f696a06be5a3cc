"""Session fixtures: small trained models shared by the VAE, saliency and acceptance tests."""

from dataclasses import dataclass

import numpy as np
import pytest

from concept_saliency.data import gen_squares, gen_st_layers
from concept_saliency.vae import init_model, preset, train

N_TRAIN, N_TEST = 2000, 400
SQUARE_EPOCHS = 30
# KL weight ramps over the whole run; at full weight from the start the square models collapse to the prior
SQUARE_KL_WARMUP = 30
ST_EPOCHS = 60


@dataclass
class Trained:
    model: object
    train: object
    test: object


def _squares(brightness):
    ds = gen_squares(N_TRAIN + N_TEST, brightness=brightness, seed=11)
    tr, te = ds.split(N_TRAIN)
    model = train(init_model(preset("st"), seed=1), tr, epochs=SQUARE_EPOCHS, batch_size=32, seed=1,
                  kl_warmup=SQUARE_KL_WARMUP)
    return Trained(model, tr, te)


@pytest.fixture(scope="session")
def bright_model():
    return _squares("bright")


@pytest.fixture(scope="session")
def dark_model():
    return _squares("dark")


@pytest.fixture(scope="session")
def st_model():
    ds = gen_st_layers(n_genes=300, layer_patterns=3, noise=0.2, seed=5)
    model = train(init_model(preset("st"), seed=2), ds, epochs=ST_EPOCHS, batch_size=32, seed=2)
    return Trained(model, ds, ds)


@pytest.fixture
def tiny_model():
    """Quarter-width ST model, randomly initialised, 64-bit."""
    return init_model(preset("st", width=0.25), seed=3, dtype=np.float64)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
