"""Shared fixtures: a trained scale/in-plane regressor for pipeline tests.

Fitting takes ~30 s, so the weights are cached in /tmp keyed by the fit
configuration and the source of the modules that determine the result.
A cache hit must be byte-identical to a fresh fit (the fit is seeded and
deterministic), so reruns are cheap and stable.
"""

import hashlib
from pathlib import Path

import pytest

from patchpose.estimator import read_weights, write_weights
from patchpose.store import synthetic_store, write_store

FIT_CONFIG = dict(
    seed=0,
    n_train=80_000,
    object_seed=0,
    dim=16,
    hidden=(128, 128),
    epochs=60,
)

_SRC = Path(__file__).resolve().parent.parent / "src" / "patchpose"


def _cache_path():
    h = hashlib.sha256()
    h.update(repr(sorted(FIT_CONFIG.items())).encode())
    for mod in ("synthetic.py", "estimator.py"):
        h.update((_SRC / mod).read_bytes())
    h.update((Path(__file__).resolve().parent / "oracle_fit.py").read_bytes())
    return Path("/tmp") / f"patchpose-regressor-{h.hexdigest()[:16]}.gpwt"


@pytest.fixture(scope="session")
def regressor_weights():
    cache = _cache_path()
    if cache.exists():
        return read_weights(cache)
    from oracle_fit import fit_regressor

    weights, rms_ln_s, rms_alpha = fit_regressor(**FIT_CONFIG)
    # degradation guard: a regressor this far off would poison every
    # downstream pipeline test, so fail loudly here instead
    assert rms_ln_s < 0.02, f"scale head degraded: rms ln s = {rms_ln_s:.4f}"
    assert rms_alpha < 0.2, f"in-plane head degraded: rms alpha = {rms_alpha:.4f}"
    tmp = cache.with_suffix(".tmp")
    write_weights(weights, tmp)
    tmp.replace(cache)
    return weights


@pytest.fixture(scope="session")
def regressor_weights_path(regressor_weights, tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "regressor.gpwt"
    write_weights(regressor_weights, path)
    return path


@pytest.fixture(scope="session")
def synth_store():
    """Full 162-template synthetic store shared by pipeline and CLI tests."""
    return synthetic_store(object_id=7)


@pytest.fixture(scope="session")
def synth_store_path(synth_store, tmp_path_factory):
    path = tmp_path_factory.mktemp("store") / "synthetic.gpst"
    write_store(synth_store, path)
    return path
